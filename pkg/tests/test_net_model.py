from __future__ import annotations

import itertools
import json

import numpy as np
import pytest

from conftest import five_bus, random_radial
from dera_access.net_model import (
    Bus,
    CaseFormatError,
    Line,
    NetworkTopologyError,
    RadialNetwork,
    alpha_from_power_factor,
    build_sensitivity,
    evaluate_flow,
    parse_matpower_case,
    power_factor_from_alpha,
    squared_voltage,
    worst_case_bounds,
)
from dera_access.scenario import bundled_case141

S_GOLDEN = np.array([[1, 1, 1, 1], [0, 1, 1, 1], [0, 1, 0, 0], [0, 0, 1, 0]])

TWO_BUS = """
function mpc = two
mpc.baseMVA = 1;
mpc.bus = [
    1   3   0   0   0   0   1   1   0   12.47   1   1.05    0.95;
    2   1   0   0   0   0   1   1   0   12.47   1   1.05    0.95;
];
mpc.branch = [
    1   2   0.01    0.02    0   15  15  15  0   0   1   -360    360;
];
"""


def _case(branches: str, nbus: int = 3, ref: int = 1) -> str:
    rows = "\n".join(
        f"    {i} {3 if i == ref else 1} 0 0 0 0 1 1 0 12.47 1 1.05 0.95;" for i in range(1, nbus + 1)
    )
    return f"mpc.baseMVA = 10;\nmpc.bus = [\n{rows}\n];\nmpc.branch = [\n{branches}\n];\n"


def test_five_bus_shift_factor_matches_golden():
    b = build_sensitivity(five_bus())
    assert np.array_equal(b.shift_reduced, S_GOLDEN)


def test_five_bus_impedance_patterns():
    r = np.array([1.0, 2.0, 3.0, 4.0])
    x = np.array([5.0, 6.0, 7.0, 8.0])
    b = build_sensitivity(five_bus(r, x))
    assert np.array_equal(b.r_matrix, r[:, None] * S_GOLDEN)
    assert np.array_equal(b.x_matrix, x[:, None] * S_GOLDEN)
    assert np.array_equal(b.r_matrix[0], [1, 1, 1, 1])
    assert np.array_equal(b.r_matrix[1], [0, 2, 2, 2])


def test_five_bus_voltage_block():
    alpha = alpha_from_power_factor(0.98)
    b = build_sensitivity(five_bus(alpha=alpha))
    S, R, X = b.shift_reduced, b.r_matrix, b.x_matrix
    assert np.allclose(b.a_matrix[4:], 2 * S.T @ (R + alpha * X), atol=1e-12, rtol=0)
    assert np.array_equal(b.a_matrix[:4], S)


def test_two_bus_chain():
    net = RadialNetwork((Bus(1), Bus(2)), (Line(2, 1, 0.3, 0.4),), 1.0, 0.5)
    b = build_sensitivity(net)
    assert b.shift_reduced.tolist() == [[1.0]]
    assert b.r_matrix.tolist() == [[0.3]]
    assert b.x_matrix.tolist() == [[0.4]]
    assert b.a_matrix[1, 0] == pytest.approx(2 * (0.3 + 0.5 * 0.4))
    f, u = evaluate_flow(b, [0.7], [0.0])
    assert f[0] == pytest.approx(0.7)
    assert u[0] == pytest.approx(2 * (0.3 + 0.5 * 0.4) * 0.7)


def test_sign_split_invariants(rng):
    b = build_sensitivity(random_radial(rng, 9))
    assert np.array_equal(b.a_plus - b.a_minus, b.a_matrix)
    assert (b.a_plus >= 0).all() and (b.a_minus >= 0).all()
    assert (np.minimum(b.a_plus, b.a_minus) == 0).all()
    assert (b.limit_lo <= b.limit_hi).all()


def test_columns_follow_root_paths(rng):
    net = random_radial(rng, 12)
    b = build_sensitivity(net)
    parent = {ln.from_bus: (k, ln.to_bus) for k, ln in enumerate(net.lines)}
    for col, bus in enumerate(b.bus_ids):
        path, cur = set(), bus
        while cur != 1:
            k, cur = parent[cur]
            path.add(k)
        assert set(np.flatnonzero(b.shift_reduced[:, col])) == path


def test_voltage_bound_conventions():
    b = build_sensitivity(five_bus(), voltage_dev=0.05)
    assert np.allclose(b.limit_hi[4:], 0.05)
    assert np.allclose(b.limit_lo[4:], -0.05)
    bv = build_sensitivity(five_bus(), voltage_dev=0.05, bounds_on="v")
    assert np.allclose(bv.limit_hi[4:], 1.05**2 - 1)
    assert np.allclose(bv.limit_lo[4:], 0.95**2 - 1)


def test_flow_limits_symmetric_and_missing():
    b = build_sensitivity(five_bus(limits=(3.0, 2.0, None, 1.0)))
    assert b.limit_hi[:4].tolist() == [3.0, 2.0, np.inf, 1.0]
    assert b.limit_lo[:4].tolist() == [-3.0, -2.0, -np.inf, -1.0]
    with pytest.raises(ValueError, match="missing flow limit"):
        build_sensitivity(five_bus(limits=(3.0, 2.0, None, 1.0)), require_flow_limits=True)


@pytest.mark.parametrize("dev", [0.0, 1.0, -0.1])
def test_voltage_dev_range(dev):
    with pytest.raises(ValueError):
        build_sensitivity(five_bus(), voltage_dev=dev)


def test_zero_injection_is_neutral():
    b = build_sensitivity(five_bus(alpha=0.2))
    f, u = evaluate_flow(b, np.zeros(4), np.zeros(4))
    assert not f.any() and not u.any()
    assert np.all(squared_voltage(b, u) == b.u_base)


def test_evaluate_flow_matches_branch_recursion(rng):
    """Voltage drops accumulated line by line from the root."""
    alpha = 0.2
    net = five_bus(r=(0.01, 0.02, 0.03, 0.04), x=(0.05, 0.06, 0.07, 0.08), alpha=alpha)
    b = build_sensitivity(net)
    p, p0 = rng.normal(size=4), rng.normal(size=4)
    f, u = evaluate_flow(b, p, p0)
    inj = dict(zip(range(2, 6), p + p0))
    downstream = {2: [2, 3, 4, 5], 5: [5, 3, 4], 3: [3], 4: [4]}
    flow = {ln.from_bus: sum(inj[k] for k in downstream[ln.from_bus]) for ln in net.lines}
    assert np.allclose(f, [flow[ln.from_bus] for ln in net.lines])
    drop = {1: 0.0}
    for ln in net.lines:  # parents precede children in this ordering
        drop[ln.from_bus] = drop[ln.to_bus] + 2 * (ln.resistance_pu + alpha * ln.reactance_pu) * flow[ln.from_bus]
    assert np.allclose(u, [drop[k] for k in range(2, 6)], atol=1e-14)


def test_worst_case_hand_example():
    wmin, wmax = worst_case_bounds(np.array([[1.0, -2.0]]), [0, 0], [1, 1])
    assert wmax.tolist() == [1.0] and wmin.tolist() == [-2.0]


def test_worst_case_degenerate_box(rng):
    A = rng.normal(size=(3, 4))
    p = rng.normal(size=4)
    wmin, wmax = worst_case_bounds(A, p, p)
    assert np.allclose(wmin, A @ p) and np.allclose(wmax, A @ p)


def test_worst_case_matches_vertex_enumeration(rng):
    for _ in range(20):
        A = rng.normal(size=(4, 4))
        lo = rng.normal(size=4)
        hi = lo + rng.uniform(0, 2, 4)
        verts = np.array([[h if bit else l for bit, l, h in zip(bits, lo, hi)]
                          for bits in itertools.product((0, 1), repeat=4)])
        vals = verts @ A.T
        wmin, wmax = worst_case_bounds(A, lo, hi)
        assert np.allclose(wmax, vals.max(axis=0), atol=1e-12)
        assert np.allclose(wmin, vals.min(axis=0), atol=1e-12)


def test_worst_case_contains_random_points(rng):
    b = build_sensitivity(random_radial(rng, 6))
    lo = rng.normal(size=5)
    hi = lo + rng.uniform(0, 1, 5)
    wmin, wmax = worst_case_bounds(b, lo, hi)
    p = lo + (hi - lo) * rng.random((1000, 5))
    w = p @ b.a_matrix.T
    assert (w <= wmax + 1e-12).all() and (w >= wmin - 1e-12).all()


def test_worst_case_rejects_inverted_box():
    with pytest.raises(ValueError, match="lo > hi"):
        worst_case_bounds(np.eye(2), [0, 1], [1, 0])


def test_parse_two_bus_case():
    net = parse_matpower_case(TWO_BUS)
    assert net.n_bus == 2 and len(net.lines) == 1
    ln = net.lines[0]
    assert (ln.from_bus, ln.to_bus) == (2, 1)
    assert ln.flow_limit_mw == 15
    assert ln.resistance_pu == pytest.approx(0.01)


def test_parse_case141():
    net = parse_matpower_case(bundled_case141(), power_factor=0.98)
    assert net.n_bus == 141 and len(net.lines) == 140
    assert net.base_mva == 10
    b = build_sensitivity(net)
    assert b.a_matrix.shape == (280, 140)


def test_parse_loop_rejected():
    text = _case("1 2 0.01 0.02 0 0 0 0 0 0 1 -360 360;\n2 3 0.01 0.02 0 0 0 0 0 0 1 -360 360;\n"
                 "3 1 0.01 0.02 0 0 0 0 0 0 1 -360 360;")
    with pytest.raises(NetworkTopologyError, match="not radial"):
        parse_matpower_case(text)


def test_parse_requires_reference_bus():
    text = _case("1 2 0.01 0.02 0 0 0 0 0 0 1 -360 360;\n2 3 0.01 0.02 0 0 0 0 0 0 1 -360 360;", ref=0)
    with pytest.raises(CaseFormatError, match="reference"):
        parse_matpower_case(text)


def test_parse_reference_bus_relabelled_to_one():
    text = _case("1 2 0.01 0.02 0 0 0 0 0 0 1 -360 360;\n2 3 0.01 0.02 0 0 0 0 0 0 1 -360 360;", ref=3)
    net = parse_matpower_case(text)
    assert net.n_bus == 3
    assert net.root_path(3) != []


def test_parse_duplicate_branch():
    text = _case("1 2 0.01 0.02 0 0 0 0 0 0 1 -360 360;\n1 2 0.01 0.02 0 0 0 0 0 0 1 -360 360;")
    with pytest.raises(NetworkTopologyError, match="duplicate"):
        parse_matpower_case(text)


def test_parse_malformed_reports_line():
    text = _case("1 2 0.01 abc 0 0 0 0 0 0 1 -360 360;\n2 3 0.01 0.02 0 0 0 0 0 0 1 -360 360;")
    with pytest.raises(CaseFormatError, match=r"line \d+"):
        parse_matpower_case(text)


def test_disconnected_network_rejected():
    lines = (Line(2, 1, 0.1, 0.1), Line(4, 3, 0.1, 0.1))
    with pytest.raises(NetworkTopologyError):
        RadialNetwork(tuple(Bus(i) for i in range(1, 5)), lines[:1] + (Line(3, 4, 0.1, 0.1),) + lines[1:], 1.0)


def test_json_round_trip(tmp_path):
    net = parse_matpower_case(bundled_case141(), power_factor=0.98)
    path = tmp_path / "net.json"
    net.save(path)
    back = RadialNetwork.load(path)
    assert back == net
    data = json.loads(path.read_text())
    assert data["power_factor"] == pytest.approx(0.98)


def test_power_factor_conversion():
    a = alpha_from_power_factor(0.98)
    assert a == pytest.approx(0.2031, abs=1e-4)
    assert power_factor_from_alpha(a) == pytest.approx(0.98)
    assert alpha_from_power_factor(1.0) == 0.0


def test_negative_impedance_rejected():
    with pytest.raises(ValueError):
        Line(2, 1, -0.1, 0.1)
