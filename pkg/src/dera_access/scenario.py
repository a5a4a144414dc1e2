"""The 141-bus experiment: four aggregators with different rooftop-solar levels.

Every non-reference bus hosts one household group per aggregator (the fourth
aggregator only on buses 118-134).  A group of ``households_per_group``
households either all own DG or none do, drawn per group with probability
``adopter_share``.  A fraction ``dera_ratio`` of each group is served by its
aggregator; the rest stay with the utility under net metering and occupy the
utility-customer range ``[p0_lo, p0_hi]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .auction import AuctionInstance, ClearingResult, DsoCost, clear, payments
from .dera import (
    KWH_PER_MW_HOUR,
    AccessInterval,
    DeraBid,
    DeraPortfolio,
    Prosumer,
    make_bid,
)
from .net_model import RadialNetwork, SensitivityBundle, build_sensitivity, parse_matpower_case
from .prosumer import NemTariff, ProsumerParams, UtilityFn, nem_consumption


def bundled_case141() -> str:
    return resources.files("dera_access").joinpath("data/case141.m").read_text(encoding="utf-8")


@dataclass(frozen=True)
class ScenarioConfig:
    power_factor: float = 0.98
    main_limit_mw: float = 15.0
    main_lines: int = 6
    other_limit_mw: float = 2.0
    voltage_dev: float = 0.05
    bounds_on: str = "u"
    dg_levels: tuple[float, ...] = (0.2, 5.2, 10.2, 15.2)
    restricted_buses: dict[int, tuple[int, int]] = field(default_factory=lambda: {3: (118, 134)})
    a_hat: float = 0.65
    b_hat: float = 0.2
    d_min: float = 0.0
    d_max: float = 20.0
    lmp: float = 0.03
    pi_plus: float = 0.06
    pi_minus: float = 0.03
    pi_zero: float = 0.0
    zeta: float = 1.003
    adopter_share: float = 0.8
    households_per_group: float = 3.0
    dera_ratio: float = 1.0
    c_max_mw: float = 0.1
    dso_a: float = -0.096
    dso_b: float = 0.2
    bid_segments: int = 10
    j_segments: int = 20
    interval_hours: float = 1.0
    seed: int = 0

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    @property
    def kwh_per_mw(self) -> float:
        return KWH_PER_MW_HOUR * self.interval_hours


def scenario_network(cfg: ScenarioConfig, case_text: str | None = None) -> RadialNetwork:
    net = parse_matpower_case(case_text or bundled_case141(), power_factor=cfg.power_factor)
    trunk = _trunk_lines(net, cfg.main_lines)
    limits = [cfg.main_limit_mw if k in trunk else cfg.other_limit_mw for k in range(len(net.lines))]
    return net.with_flow_limits(limits)


def _trunk_lines(net: RadialNetwork, count: int) -> set[int]:
    """Indices of the ``count`` lines consecutively connected to the substation."""
    children: dict[int, list[int]] = {}
    for k, ln in enumerate(net.lines):
        children.setdefault(ln.to_bus, []).append(k)
    out: list[int] = []
    bus = 1
    while len(out) < count and children.get(bus):
        k = min(children[bus], key=lambda i: net.lines[i].from_bus)
        out.append(k)
        bus = net.lines[k].from_bus
    return set(out)


@dataclass(frozen=True)
class ScenarioData:
    cfg: ScenarioConfig
    network: RadialNetwork
    bundle: SensitivityBundle
    portfolios: tuple[DeraPortfolio, ...]
    bids: tuple[DeraBid, ...]
    utility_lo: np.ndarray
    utility_hi: np.ndarray

    def instance(self) -> AuctionInstance:
        return AuctionInstance(
            self.bundle,
            self.bids,
            self.utility_lo,
            self.utility_hi,
            DsoCost(self.cfg.dso_a, self.cfg.dso_b),
            self.cfg.j_segments,
        )


def adopter_mask(cfg: ScenarioConfig, n_groups: int, n_buses: int) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    return rng.random((n_groups, n_buses)) < cfg.adopter_share


def build_scenario(cfg: ScenarioConfig = ScenarioConfig(), case_text: str | None = None) -> ScenarioData:
    if not 0.0 <= cfg.dera_ratio <= 1.0:
        raise ValueError("dera_ratio must lie in [0, 1]")
    net = scenario_network(cfg, case_text)
    bundle = build_sensitivity(net, cfg.voltage_dev, bounds_on=cfg.bounds_on)
    buses = bundle.bus_ids
    mask = adopter_mask(cfg, len(cfg.dg_levels), len(buses))
    u = UtilityFn(cfg.a_hat, cfg.b_hat)
    tariff = NemTariff(cfg.pi_plus, cfg.pi_minus, cfg.pi_zero)
    cap = AccessInterval(-cfg.c_max_mw, cfg.c_max_mw)
    n_dera = cfg.households_per_group * cfg.dera_ratio
    n_util = cfg.households_per_group * (1.0 - cfg.dera_ratio)
    u_lo = np.zeros(len(buses))
    u_hi = np.zeros(len(buses))
    ports, bids = [], []
    for k, dg in enumerate(cfg.dg_levels):
        window = cfg.restricted_buses.get(k)
        members = []
        for col, bus in enumerate(buses):
            if window is not None and not window[0] <= bus <= window[1]:
                continue
            r = dg if mask[k, col] else 0.0
            params = ProsumerParams(cfg.d_min, cfg.d_max, r)
            if n_dera > 0:
                members.append(Prosumer(bus, u, params, n_dera))
            if n_util > 0:
                d_nem = nem_consumption(u, tariff, params)
                u_lo[col] -= n_util * d_nem / cfg.kwh_per_mw
                u_hi[col] += n_util * max(r - cfg.d_min, 0.0) / cfg.kwh_per_mw
        port = DeraPortfolio(tuple(members), cfg.zeta, cfg.lmp, tariff, id=f"DERA{k + 1}", c_max=cap)
        ports.append(port)
        bids.append(make_bid(port, cfg.bid_segments, cfg.kwh_per_mw))
    return ScenarioData(cfg, net, bundle, tuple(ports), tuple(bids), u_lo, u_hi)


@dataclass(frozen=True)
class ScenarioOutcome:
    data: ScenarioData
    result: ClearingResult

    @property
    def dera_surplus(self) -> float:
        return float(sum(self.result.dera_value.values()))

    @property
    def dera_profit(self) -> float:
        return self.dera_surplus - float(sum(payments(self.result).values()))


def run_scenario(cfg: ScenarioConfig = ScenarioConfig(), case_text: str | None = None) -> ScenarioOutcome:
    data = build_scenario(cfg, case_text)
    return ScenarioOutcome(data, clear(data.instance()))


SWEEP_PARAMS = ("dg_level", "dera_ratio")


def sweep_config(cfg: ScenarioConfig, param: str, value: float) -> ScenarioConfig:
    """``dg_level`` sets a common DG level for every aggregator."""
    if param == "dera_ratio":
        return cfg.replace(dera_ratio=float(value))
    if param == "dg_level":
        return cfg.replace(dg_levels=tuple(float(value) for _ in cfg.dg_levels))
    raise ValueError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")


def load_case_text(path: str | Path | None) -> str | None:
    return None if path is None else Path(path).read_text(encoding="utf-8")
