from __future__ import annotations

import numpy as np
import pytest

from dera_access.auction import payments, price_identity_terms
from dera_access.scenario import (
    ScenarioConfig,
    _trunk_lines,
    adopter_mask,
    build_scenario,
    scenario_network,
    sweep_config,
)


def test_trunk_lines_leave_the_substation():
    net = scenario_network(ScenarioConfig())
    trunk = sorted(_trunk_lines(net, 6))
    assert len(trunk) == 6
    # consecutive chain starting at the reference bus
    buses = {net.lines[k].to_bus for k in trunk} | {net.lines[k].from_bus for k in trunk}
    assert 1 in buses and len(buses) == 7
    assert sum(ln.flow_limit_mw == 15.0 for ln in net.lines) == 6
    assert sum(ln.flow_limit_mw == 2.0 for ln in net.lines) == 134


def test_adopter_mask_deterministic():
    cfg = ScenarioConfig(seed=3)
    a = adopter_mask(cfg, 4, 140)
    assert np.array_equal(a, adopter_mask(cfg, 4, 140))
    assert 0.7 < a.mean() < 0.9


def test_restricted_dera_buses():
    data = build_scenario()
    buses = data.portfolios[3].buses
    assert min(buses) == 118 and max(buses) == 134
    assert len(data.portfolios[0].buses) == 140


def test_utility_range_scales_with_ratio():
    full = build_scenario(ScenarioConfig(dera_ratio=1.0))
    half = build_scenario(ScenarioConfig(dera_ratio=0.5))
    assert not full.utility_lo.any() and not full.utility_hi.any()
    assert (half.utility_lo < 0).all() and (half.utility_hi >= 0).all()
    with pytest.raises(ValueError):
        build_scenario(ScenarioConfig(dera_ratio=1.5))


def test_sweep_config():
    cfg = ScenarioConfig()
    assert sweep_config(cfg, "dg_level", 5.2).dg_levels == (5.2,) * 4
    assert sweep_config(cfg, "dera_ratio", 0.4).dera_ratio == 0.4
    with pytest.raises(ValueError):
        sweep_config(cfg, "zeta", 1.0)


def test_low_dg_aggregator_buys_withdrawal(case141_outcome):
    _, _, r, _ = case141_outcome
    assert (r.c_lo["DERA1"] < -1e-9).mean() >= 0.9
    assert not (r.c_hi["DERA1"] > 1e-9).any()


def test_high_dg_aggregators_buy_injection_where_they_have_dg(case141_outcome):
    data, _, r, _ = case141_outcome
    for k, port in zip(r.dera_ids[1:], data.portfolios[1:]):
        cols = [data.bundle.bus_ids.index(p.bus) for p in port.prosumers if p.params.r > 0]
        assert (r.c_hi[k][cols] > 1e-9).mean() >= 0.9


def test_prices_jump_behind_the_binding_line(case141_outcome):
    data, _, r, _ = case141_outcome
    b = data.bundle
    binding = np.flatnonzero(r.duals.mu_hi > 1e-9)
    behind = (b.a_matrix[binding] != 0).any(axis=0)
    assert behind.any() and not behind.all()
    lam = r.duals.lambda_hi
    assert lam[behind].min() > lam[~behind].max()
    assert all(np.isfinite(v) for v in payments(r).values())


def test_network_terms_follow_binding_rows(case141_outcome):
    data, _, r, _ = case141_outcome
    net, b = data.network, data.bundle
    net_hi, _ = price_identity_terms(r, b)
    binding = np.flatnonzero((r.duals.mu_hi > 1e-9) | (r.duals.mu_lo > 1e-9))
    lines = set()
    for j in binding:
        lines |= {int(j)} if j < b.n_lines else set(net.root_path(b.bus_ids[j - b.n_lines]))
    touched = np.array([bool(set(net.root_path(bus)) & lines) for bus in b.bus_ids])
    assert np.array_equal(np.abs(net_hi) > 1e-12, touched)
