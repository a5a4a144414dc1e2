from __future__ import annotations

import numpy as np
import pytest

from dera_access.net_model import Bus, Line, RadialNetwork, alpha_from_power_factor, build_sensitivity

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(label: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def five_bus(r=(1.0, 2.0, 3.0, 4.0), x=(5.0, 6.0, 7.0, 8.0), alpha=0.0, limits=(None,) * 4):
    """Lines 2-1, 5-2, 3-5, 4-5 in that order."""
    pairs = [(2, 1), (5, 2), (3, 5), (4, 5)]
    lines = tuple(Line(f, t, ri, xi, lim) for (f, t), ri, xi, lim in zip(pairs, r, x, limits))
    return RadialNetwork(tuple(Bus(i) for i in range(1, 6)), lines, 1.0, alpha)


def random_radial(rng: np.random.Generator, n: int, limit_range=(0.08, 0.3), pf: float = 0.98):
    lines = tuple(
        Line(i, int(rng.integers(1, i)), rng.uniform(0.01, 0.05), rng.uniform(0.01, 0.05),
             rng.uniform(*limit_range))
        for i in range(2, n + 1)
    )
    return RadialNetwork(tuple(Bus(i) for i in range(1, n + 1)), lines, 1.0, alpha_from_power_factor(pf))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_curve(rng, bus: int, direction: str, top: float, n_seg: int = 10):
    from dera_access.dera import BidCurve

    marg = np.sort(rng.uniform(0.0, 0.06, n_seg))[::-1]
    caps = np.linspace(0.0, top, n_seg + 1)[1:]
    return BidCurve(bus, direction, tuple(zip(caps, marg)), value_at_zero=rng.uniform(-1, 0))


def random_auction(rng, n: int, n_dera: int = 2, j_segments: int = 20, dso=(-0.096, 0.2)):
    """Random radial network with random concave bids at every non-reference bus."""
    from dera_access.auction import AuctionInstance, DsoCost
    from dera_access.dera import INJECTION, WITHDRAWAL, DeraBid

    bundle = build_sensitivity(random_radial(rng, n), 0.05)
    bids = []
    for k in range(n_dera):
        curves = []
        for bus in range(2, n + 1):
            curves.append(random_curve(rng, bus, INJECTION, rng.uniform(0.05, 0.15)))
            curves.append(random_curve(rng, bus, WITHDRAWAL, rng.uniform(0.05, 0.15)))
        bids.append(DeraBid(f"d{k}", tuple(curves), 0.0))
    return AuctionInstance(
        bundle, tuple(bids), -rng.uniform(0, 0.01, n - 1), rng.uniform(0, 0.01, n - 1), DsoCost(*dso), j_segments
    )


def random_dera_instance(rng):
    """Random portfolio of 1-4 buses with a feasible access interval per bus."""
    from dera_access.dera import AccessInterval, DeraPortfolio, Prosumer
    from dera_access.prosumer import NemTariff, ProsumerParams, UtilityFn

    n = int(rng.integers(1, 5))
    prosumers, access = [], []
    for i in range(n):
        a = rng.uniform(0.3, 1.0)
        b = rng.uniform(0.05, 0.4)
        d_min = rng.uniform(0, 2)
        d_max = d_min + rng.uniform(0.5, 12)
        r = rng.uniform(0, 20)
        hh = float(rng.choice([1.0, 2.5, 3.0]))
        prosumers.append(Prosumer(i + 2, UtilityFn(a, b), ProsumerParams(d_min, d_max, r), hh))
        # keep r - d feasible: widen the box until it reaches the consumption range
        c_lo = min(-rng.uniform(0, 5), (r - d_max) * hh) if rng.random() < 0.5 else -rng.uniform(0, 5)
        c_hi = max(rng.uniform(0, 5), (r - d_min) * hh) if rng.random() < 0.5 else rng.uniform(0, 5)
        c_lo = min(c_lo, hh * (r - d_min) - 1e-3)
        c_hi = max(c_hi, hh * (r - d_max) + 1e-3)
        access.append(AccessInterval(min(c_lo, 0.0), max(c_hi, 0.0)))
    lmp = rng.uniform(0.01, 0.2)
    port = DeraPortfolio(tuple(prosumers), rng.uniform(1.0 + 1e-6, 1.1), lmp, NemTariff(lmp + 0.03, lmp))
    return port, access


@pytest.fixture(scope="session")
def case141_outcome():
    """Default 141-bus experiment, cleared once per session, with its wall time."""
    import time

    from dera_access.scenario import build_scenario
    from dera_access.auction import clear

    data = build_scenario()
    inst = data.instance()
    start = time.perf_counter()
    result = clear(inst)
    elapsed = time.perf_counter() - start
    return data, inst, result, elapsed
