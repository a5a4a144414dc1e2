from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import random_dera_instance
from dera_access.dera import (
    INJECTION,
    WITHDRAWAL,
    AccessInterval,
    BidCurve,
    DeraBid,
    DeraPortfolio,
    InfeasibleAccessError,
    Prosumer,
    bid_constant,
    bid_curves,
    direct_objective,
    load_portfolio,
    make_bid,
    optimal_decision,
    oracle_surplus,
    portfolio_from_dict,
    portfolio_to_dict,
    pwl_benefit_value,
)
from dera_access.prosumer import NemTariff, ProsumerParams, UtilityFn, nem_surplus

U = UtilityFn(0.65, 0.2)
TARIFF = NemTariff(0.06, 0.03)


def _port(r, d_min=0.0, d_max=10.0, zeta=1.003, lmp=0.03, households=1.0, u=U, tariff=TARIFF):
    return DeraPortfolio((Prosumer(2, u, ProsumerParams(d_min, d_max, r), households),), zeta, lmp, tariff)


def test_injection_cap_binds():
    port = _port(5.2)
    dec = optimal_decision(port, [AccessInterval(-0.1, 0.1)])
    assert dec.d_star[0] == pytest.approx(5.1)
    assert dec.parts[0].phi_hi < 0 and dec.parts[0].phi_lo == 0
    val, arg = oracle_surplus(port, [AccessInterval(-0.1, 0.1)], return_argmax=True)
    assert dec.phi_total == pytest.approx(val, abs=1e-8)
    assert arg[0] == pytest.approx(5.1, abs=1e-6)


def test_withdrawal_cap_binds():
    port = _port(0.0)
    dec = optimal_decision(port, [AccessInterval(-0.1, 0.1)])
    assert dec.d_star[0] == pytest.approx(0.1)
    assert dec.parts[0].phi_lo < 0 and dec.parts[0].phi_hi == 0
    assert dec.phi_total == pytest.approx(oracle_surplus(port, [AccessInterval(-0.1, 0.1)]), abs=1e-8)


def test_zero_access_forces_self_supply():
    port = _port(4.0)
    dec = optimal_decision(port, [AccessInterval(0.0, 0.0)])
    assert dec.d_star[0] == pytest.approx(4.0)
    expected = U(4.0) - port.zeta * nem_surplus(U, TARIFF, ProsumerParams(0, 10, 4.0))
    assert dec.phi_total == pytest.approx(expected)
    assert oracle_surplus(port, [AccessInterval(0.0, 0.0)]) == pytest.approx(expected, abs=1e-9)


def test_zeta_limit():
    zeta = 1 + 1e-9
    port = _port(2.0, zeta=zeta)
    acc = [AccessInterval(-100, 100)]
    dec = optimal_decision(port, acc)
    d = dec.d_star[0]
    expected = U(d) - nem_surplus(U, TARIFF, ProsumerParams(0, 10, 2.0)) - 0.03 * (d - 2.0)
    assert dec.phi_total == pytest.approx(expected, abs=1e-8)


def test_closed_form_matches_oracle():
    rng = np.random.default_rng(42)
    worst_val = worst_arg = 0.0
    for _ in range(500):
        port, access = random_dera_instance(rng)
        dec = optimal_decision(port, access)
        val, arg = oracle_surplus(port, access, return_argmax=True)
        worst_val = max(worst_val, abs(dec.phi_total - val))
        worst_arg = max(worst_arg, np.abs(dec.d_star - arg).max())
    assert worst_val <= 1e-7
    assert worst_arg <= 1e-6


def test_decomposition_equals_direct_objective():
    rng = np.random.default_rng(7)
    for _ in range(200):
        port, access = random_dera_instance(rng)
        dec = optimal_decision(port, access)
        direct = direct_objective(port, dec.d_star, dec.omega_star)
        assert dec.phi_total == pytest.approx(direct, abs=1e-10)
        assert dec.constant == pytest.approx(bid_constant(port), abs=1e-12)


def test_at_most_one_binding_term():
    rng = np.random.default_rng(8)
    for _ in range(200):
        port, access = random_dera_instance(rng)
        for part in optimal_decision(port, access).parts:
            assert part.phi_lo * part.phi_hi == 0


def test_participation_binds():
    rng = np.random.default_rng(9)
    for _ in range(100):
        port, access = random_dera_instance(rng)
        dec = optimal_decision(port, access)
        for pr, d, w in zip(port.prosumers, dec.d_star, dec.omega_star):
            left = pr.utility(d) - w
            assert left == pytest.approx(port.zeta * nem_surplus(pr.utility, port.tariff, pr.params), abs=1e-12)


def test_widening_access_never_hurts():
    rng = np.random.default_rng(10)
    for _ in range(200):
        port, access = random_dera_instance(rng)
        base = optimal_decision(port, access).phi_total
        wider = [AccessInterval(a.c_lo - rng.uniform(0, 2), a.c_hi + rng.uniform(0, 2)) for a in access]
        assert optimal_decision(port, wider).phi_total >= base - 1e-12


def test_infeasible_access():
    port = _port(15.0, d_max=10.0)
    with pytest.raises(InfeasibleAccessError):
        optimal_decision(port, [AccessInterval(-1.0, 1.0)])
    with pytest.raises(InfeasibleAccessError):
        oracle_surplus(port, [AccessInterval(-1.0, 1.0)])


def test_access_interval_validation():
    with pytest.raises(ValueError):
        AccessInterval(0.1, 0.2)
    with pytest.raises(ValueError):
        _port(1.0, zeta=1.0)


def test_household_weight_scales_surplus():
    one = _port(5.2)
    three = _port(5.2, households=3.0)
    a1 = optimal_decision(one, [AccessInterval(-0.1, 0.1)]).phi_total
    a3 = optimal_decision(three, [AccessInterval(-0.3, 0.3)]).phi_total
    assert a3 == pytest.approx(3 * a1)


def test_bids_vanish_when_generation_matches_preferred_consumption():
    port = _port(3.1)  # d_hat = (0.65 - 0.03) / 0.2
    for curve in bid_curves(port):
        assert np.allclose(curve.marginals, 0.0)
        assert curve.value_at_zero == 0.0


def test_injection_marginal_at_high_generation():
    port = _port(15.2, d_max=20.0)
    inj = next(c for c in bid_curves(port, n_segments=20) if c.direction == INJECTION)
    # segment containing 5 kWh = 0.005 MW
    k = int(np.searchsorted(inj.capacities, 0.005))
    assert inj.marginals[k] == pytest.approx(0.03, abs=1e-12)


def test_bid_curves_respond_to_generation_level():
    levels = (0.2, 5.2, 10.2, 15.2)
    curves = {}
    for r in levels:
        for c in bid_curves(_port(r, d_max=20.0)):
            curves[(r, c.direction)] = c.marginals
    for lo, hi in zip(levels, levels[1:]):
        assert np.all(curves[(hi, WITHDRAWAL)] <= curves[(lo, WITHDRAWAL)] + 1e-12)
        assert np.all(curves[(hi, INJECTION)] >= curves[(lo, INJECTION)] - 1e-12)


@pytest.mark.parametrize("r", [0.2, 15.2])
def test_bid_curve_reproduces_exact_surplus_at_breakpoints(r):
    """Bid value at a breakpoint equals the closed-form surplus with that access."""
    port = _port(r, d_max=20.0)
    curves = {c.direction: c for c in bid_curves(port, n_segments=10)}
    for direction, c in curves.items():
        other = sum(o.value_at_zero for d, o in curves.items() if d != direction)
        for cap in c.capacities:
            signed = cap if direction == INJECTION else -cap
            acc = AccessInterval(min(signed * 1000, 0), max(signed * 1000, 0))
            exact = optimal_decision(port, [acc]).phi_total
            bid = bid_constant(port) + other + c.value_at_zero + pwl_benefit_value(c, signed)
            assert bid == pytest.approx(exact, abs=1e-9)


def test_pwl_benefit_value_cases():
    flat = BidCurve(2, INJECTION, ((0.1, 0.05),))
    assert pwl_benefit_value(flat, 0.0) == 0.0
    assert pwl_benefit_value(flat, 0.1) == pytest.approx(0.05 * 0.1 * 1000)
    wd = BidCurve(2, WITHDRAWAL, ((0.05, 0.2), (0.1, 0.1)))
    assert pwl_benefit_value(wd, -0.1) == pytest.approx((0.05 * 0.2 + 0.05 * 0.1) * 1000)
    with pytest.raises(ValueError, match="domain"):
        pwl_benefit_value(flat, 0.2)
    with pytest.raises(ValueError):
        pwl_benefit_value(flat, -0.05)
    with pytest.raises(ValueError):
        pwl_benefit_value(wd, 0.05)


def test_pwl_benefit_value_is_concave():
    rng = np.random.default_rng(3)
    for _ in range(50):
        caps = np.cumsum(rng.uniform(0.01, 0.05, 6))
        marg = np.sort(rng.normal(size=6))[::-1]
        c = BidCurve(2, INJECTION, tuple(zip(caps, marg)))
        top = caps[-1]
        f_top = pwl_benefit_value(c, top)
        for x in rng.uniform(0, top, 20):
            assert pwl_benefit_value(c, x) >= x / top * f_top - 1e-9


def test_signed_pwl_matches_benefit_value():
    wd = BidCurve(2, WITHDRAWAL, ((0.05, 0.2), (0.1, 0.1)))
    f = wd.signed_pwl()
    for x in np.linspace(-0.1, 0, 11):
        assert f.value(x) == pytest.approx(pwl_benefit_value(wd, x), abs=1e-12)


def test_bid_curve_validation():
    with pytest.raises(ValueError, match="nonincreasing"):
        BidCurve(2, INJECTION, ((0.05, 0.1), (0.1, 0.2)))
    with pytest.raises(ValueError, match="increasing"):
        BidCurve(2, INJECTION, ((0.1, 0.2), (0.05, 0.1)))
    with pytest.raises(ValueError):
        BidCurve(2, "sideways", ())


def test_config_round_trip(tmp_path):
    port = DeraPortfolio(
        (Prosumer(3, U, ProsumerParams(0, 20, 5.2), 2.0), Prosumer(7, U, ProsumerParams(0, 20, 0.2))),
        1.003, 0.03, TARIFF, id="D1", c_max=AccessInterval(-0.2, 0.1),
    )
    path = tmp_path / "d.json"
    path.write_text(json.dumps(portfolio_to_dict(port)))
    assert load_portfolio(path) == port


def test_config_errors():
    cfg = portfolio_to_dict(_port(1.0))
    cfg["buses_served"] = [99]
    with pytest.raises(ValueError, match="buses_served"):
        portfolio_from_dict(cfg)
    cfg = portfolio_to_dict(_port(1.0))
    del cfg["zeta"]
    with pytest.raises(ValueError, match="zeta"):
        portfolio_from_dict(cfg)
    cfg = portfolio_to_dict(_port(1.0))
    cfg["prosumers"].append(dict(cfg["prosumers"][0]))
    with pytest.raises(ValueError, match="one prosumer"):
        portfolio_from_dict(cfg)


def test_bid_round_trip():
    bid = make_bid(_port(10.2, d_max=20.0))
    back = DeraBid.from_dict(json.loads(json.dumps(bid.to_dict())))
    assert back == bid
