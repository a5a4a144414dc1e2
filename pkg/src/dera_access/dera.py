"""Profit-maximizing DER aggregation and the access bids it induces.

An aggregator pays each household enough to beat its net-metering surplus
by the factor ``zeta`` and trades the net energy at the wholesale price.
Given per-bus access limits ``[c_lo, c_hi]`` on the net export ``r - d``,
the optimal consumption and the aggregator surplus have closed forms; the
surplus splits into a withdrawal term, an injection term and a constant.
The withdrawal and injection terms, sampled on a capacity grid, become the
piecewise-linear bids submitted to the access auction.

Prosumer quantities are kWh per household; auction capacities are MW over an
interval, converted with ``kwh_per_mw`` (1000 for a one-hour interval).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .prosumer import (
    NemTariff,
    ProsumerParams,
    UtilityFn,
    inverse_marginal,
    nem_surplus,
)
from .solver import ConcavePwl

KWH_PER_MW_HOUR = 1000.0

INJECTION = "injection"
WITHDRAWAL = "withdrawal"


class InfeasibleAccessError(ValueError):
    """No consumption level satisfies both the household bounds and the access box."""


@dataclass(frozen=True)
class AccessInterval:
    c_lo: float
    c_hi: float

    def __post_init__(self) -> None:
        if not self.c_lo <= 0.0 <= self.c_hi:
            raise ValueError(f"need c_lo <= 0 <= c_hi, got [{self.c_lo}, {self.c_hi}]")

    def scaled(self, k: float) -> "AccessInterval":
        return AccessInterval(self.c_lo * k, self.c_hi * k)


@dataclass(frozen=True)
class Prosumer:
    """``households`` identical households at one bus, represented by one record.

    The count may be fractional; it acts as a weight on the household surplus.
    """

    bus: int
    utility: UtilityFn
    params: ProsumerParams
    households: float = 1.0

    def __post_init__(self) -> None:
        if not self.households > 0:
            raise ValueError("households must be positive")


@dataclass(frozen=True)
class DeraPortfolio:
    prosumers: tuple[Prosumer, ...]
    zeta: float
    lmp: float
    tariff: NemTariff
    id: str = "dera"
    c_max: AccessInterval = AccessInterval(-0.1, 0.1)

    def __post_init__(self) -> None:
        object.__setattr__(self, "prosumers", tuple(self.prosumers))
        if not self.zeta > 1.0:
            raise ValueError("zeta must exceed 1")
        if self.lmp < 0:
            raise ValueError("negative wholesale prices are not supported")
        buses = [p.bus for p in self.prosumers]
        if len(set(buses)) != len(buses):
            raise ValueError("one prosumer record per bus")

    @property
    def buses(self) -> list[int]:
        return [p.bus for p in self.prosumers]


@dataclass(frozen=True)
class BusParts:
    phi_lo: float
    phi_hi: float
    h: float
    nem_share: float  # zeta * S_NEM(r), per bus (households included)


@dataclass(frozen=True)
class DeraDecision:
    d_star: np.ndarray
    omega_star: np.ndarray
    phi_total: float
    parts: tuple[BusParts, ...]

    @property
    def constant(self) -> float:
        return float(sum(p.h - p.nem_share for p in self.parts))


# ---------------------------------------------------------------------------
# single household closed forms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Household:
    """Cached scalars for one household under a given portfolio."""

    u: UtilityFn
    p: ProsumerParams
    lmp: float
    zeta: float
    s_nem: float

    @property
    def v_inv(self) -> float:
        return inverse_marginal(self.u, self.lmp)

    @property
    def d_hat(self) -> float:
        return min(self.p.d_max, max(self.v_inv, self.p.d_min))

    @property
    def h(self) -> float:
        d = self.d_hat
        return self.u(d) - self.lmp * (d - self.p.r)

    def phi_hi(self, c_hi: float) -> float:
        if self.p.r >= c_hi + max(self.v_inv, self.p.d_min):
            return self.u(self.p.r - c_hi) + self.lmp * c_hi - self.h
        return 0.0

    def phi_lo(self, c_lo: float) -> float:
        if self.p.r <= c_lo + min(self.v_inv, self.p.d_max):
            return self.u(self.p.r - c_lo) + self.lmp * c_lo - self.h
        return 0.0

    def feasible_range(self, a: AccessInterval) -> tuple[float, float]:
        return max(self.p.d_min, self.p.r - a.c_hi), min(self.p.d_max, self.p.r - a.c_lo)


def _household(port: DeraPortfolio, pr: Prosumer) -> _Household:
    return _Household(pr.utility, pr.params, port.lmp, port.zeta, nem_surplus(pr.utility, port.tariff, pr.params))


def _check_access(port: DeraPortfolio, access: Sequence[AccessInterval]) -> list[AccessInterval]:
    access = list(access)
    if len(access) != len(port.prosumers):
        raise ValueError(f"need one access interval per prosumer ({len(port.prosumers)})")
    return access


def optimal_decision(port: DeraPortfolio, access: Sequence[AccessInterval]) -> DeraDecision:
    """Closed-form optimum of the aggregator problem.

    ``access[i]`` is the bus-level interval in kWh for ``port.prosumers[i]``;
    it is shared evenly among that record's households.
    """
    access = _check_access(port, access)
    d_star, omega, parts = [], [], []
    total = 0.0
    for pr, acc in zip(port.prosumers, access):
        hh = _household(port, pr)
        a = acc.scaled(1.0 / pr.households)
        lo, hi = hh.feasible_range(a)
        if lo > hi + 1e-12:
            raise InfeasibleAccessError(
                f"bus {pr.bus}: no consumption in [{pr.params.d_min}, {pr.params.d_max}] "
                f"keeps r - d inside [{a.c_lo}, {a.c_hi}]"
            )
        d = min(pr.params.r - a.c_lo, max(hh.d_hat, pr.params.r - a.c_hi))
        w = pr.utility(d) - port.zeta * hh.s_nem
        n = pr.households
        part = BusParts(
            phi_lo=n * hh.phi_lo(a.c_lo),
            phi_hi=n * hh.phi_hi(a.c_hi),
            h=n * hh.h,
            nem_share=n * port.zeta * hh.s_nem,
        )
        d_star.append(d)
        omega.append(w)
        parts.append(part)
        total += part.phi_lo + part.phi_hi + part.h - part.nem_share
    return DeraDecision(np.array(d_star), np.array(omega), float(total), tuple(parts))


def direct_objective(port: DeraPortfolio, d: Sequence[float], omega: Sequence[float]) -> float:
    """Aggregator objective ``sum_i n_i (omega_i - lmp (d_i - r_i))`` at a given decision."""
    return float(
        sum(
            pr.households * (w - port.lmp * (di - pr.params.r))
            for pr, di, w in zip(port.prosumers, d, omega)
        )
    )


def _ternary_max(f, lo: float, hi: float, width: float = 1e-10, iters: int = 200) -> tuple[float, float]:
    a, b = lo, hi
    for _ in range(iters):
        if b - a <= width:
            break
        m1 = a + (b - a) / 3.0
        m2 = b - (b - a) / 3.0
        if f(m1) < f(m2):
            a = m1
        else:
            b = m2
    best = 0.5 * (a + b)
    cands = [(f(best), best), (f(lo), lo), (f(hi), hi)]
    val, arg = max(cands, key=lambda t: t[0])
    return val, arg


def oracle_surplus(
    port: DeraPortfolio, access: Sequence[AccessInterval], return_argmax: bool = False
):
    """Aggregator surplus by direct numerical maximization, independent of the closed form.

    The participation constraint is always tight, so the payment is eliminated and
    the remaining concave function of ``d`` is maximized by ternary search.
    """
    access = _check_access(port, access)
    total = 0.0
    args = []
    for pr, acc in zip(port.prosumers, access):
        a = acc.scaled(1.0 / pr.households)
        lo = max(pr.params.d_min, pr.params.r - a.c_hi)
        hi = min(pr.params.d_max, pr.params.r - a.c_lo)
        if lo > hi + 1e-12:
            raise InfeasibleAccessError(f"bus {pr.bus}: empty feasible consumption interval")
        hi = max(lo, hi)
        share = port.zeta * nem_surplus(pr.utility, port.tariff, pr.params)

        def g(d, pr=pr, share=share):
            return pr.utility(d) - share - port.lmp * (d - pr.params.r)

        val, arg = _ternary_max(g, lo, hi)
        total += pr.households * val
        args.append(arg)
    if return_argmax:
        return total, np.array(args)
    return total


# ---------------------------------------------------------------------------
# bids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BidCurve:
    """Step marginal-benefit curve for one bus and direction.

    ``breakpoints`` holds ``(segment end capacity magnitude in MW, marginal
    benefit in $/kWh)`` pairs.  ``value_at_zero`` is the bid's value with no
    access, so the full bid is ``value_at_zero + pwl_benefit_value``.
    """

    bus: int
    direction: str
    breakpoints: tuple[tuple[float, float], ...]
    value_at_zero: float = 0.0
    kwh_per_mw: float = KWH_PER_MW_HOUR
    dera_id: str = "dera"

    def __post_init__(self) -> None:
        if self.direction not in (INJECTION, WITHDRAWAL):
            raise ValueError(f"direction must be {INJECTION!r} or {WITHDRAWAL!r}")
        bps = tuple((float(c), float(m)) for c, m in self.breakpoints)
        object.__setattr__(self, "breakpoints", bps)
        caps = self.capacities
        if caps.size and (caps[0] <= 0 or np.any(np.diff(caps) <= 0)):
            raise ValueError("capacities must be positive and strictly increasing")
        marg = self.marginals
        if marg.size > 1 and np.any(np.diff(marg) > 1e-12 * max(1.0, np.abs(marg).max())):
            raise ValueError("marginal benefits must be nonincreasing (concave bid)")

    @property
    def capacities(self) -> np.ndarray:
        return np.array([c for c, _ in self.breakpoints])

    @property
    def marginals(self) -> np.ndarray:
        return np.array([m for _, m in self.breakpoints])

    @property
    def c_max(self) -> float:
        return float(self.capacities[-1]) if self.breakpoints else 0.0

    def signed_pwl(self) -> ConcavePwl:
        """Benefit ($) as a concave function of the signed capacity variable (MW)."""
        caps = np.concatenate([[0.0], self.capacities])
        slopes = self.marginals * self.kwh_per_mw
        if self.direction == INJECTION:
            return ConcavePwl(caps, slopes)
        # withdrawal: variable runs from -c_max up to 0
        bp = -caps[::-1]
        sl = -slopes[::-1]
        offset = float(np.dot(np.diff(caps), slopes))
        return ConcavePwl(bp, sl, offset=offset)

    def to_dict(self) -> dict:
        return {
            "bus": self.bus,
            "direction": self.direction,
            "value_at_zero": self.value_at_zero,
            "kwh_per_mw": self.kwh_per_mw,
            "breakpoints": [list(b) for b in self.breakpoints],
        }

    @classmethod
    def from_dict(cls, d: dict, dera_id: str = "dera") -> "BidCurve":
        return cls(
            bus=int(d["bus"]),
            direction=d["direction"],
            breakpoints=tuple(tuple(b) for b in d["breakpoints"]),
            value_at_zero=float(d.get("value_at_zero", 0.0)),
            kwh_per_mw=float(d.get("kwh_per_mw", KWH_PER_MW_HOUR)),
            dera_id=dera_id,
        )


def pwl_benefit_value(curve: BidCurve, capacity: float) -> float:
    """Integral of the marginal-benefit steps from 0 to ``capacity`` ($)."""
    if curve.direction == INJECTION and capacity < 0:
        raise ValueError("injection capacity must be nonnegative")
    if curve.direction == WITHDRAWAL and capacity > 0:
        raise ValueError("withdrawal capacity must be nonpositive")
    mag = abs(capacity)
    if mag == 0.0:
        return 0.0
    top = curve.c_max
    if mag > top * (1 + 1e-12) + 1e-15:
        raise ValueError(f"capacity {capacity} MW beyond the curve domain ({top} MW)")
    caps = np.concatenate([[0.0], curve.capacities])
    fill = np.clip(mag - caps[:-1], 0.0, np.diff(caps))
    return float(fill @ curve.marginals) * curve.kwh_per_mw


def _concave_envelope(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Upper concave hull evaluated back on ``x`` (x strictly increasing)."""
    hull = [0]
    for k in range(1, x.size):
        while len(hull) >= 2:
            i, j = hull[-2], hull[-1]
            # drop j if it lies on or below the chord i -> k
            if (y[j] - y[i]) * (x[k] - x[i]) <= (y[k] - y[i]) * (x[j] - x[i]):
                hull.pop()
            else:
                break
        hull.append(k)
    return np.interp(x, x[hull], y[hull])


def benefit_samples(
    port: DeraPortfolio,
    pr: Prosumer,
    direction: str,
    capacities_mw: np.ndarray,
    kwh_per_mw: float = KWH_PER_MW_HOUR,
) -> np.ndarray:
    """Exact bus-level bid values ($) at the given capacity magnitudes (MW)."""
    hh = _household(port, pr)
    n = pr.households
    per_hh = np.asarray(capacities_mw, dtype=float) * kwh_per_mw / n
    if direction == INJECTION:
        return np.array([n * hh.phi_hi(c) for c in per_hh])
    return np.array([n * hh.phi_lo(-c) for c in per_hh])


def bid_curves(
    port: DeraPortfolio,
    c_max: Sequence[AccessInterval] | AccessInterval | None = None,
    n_segments: int = 10,
    kwh_per_mw: float = KWH_PER_MW_HOUR,
) -> list[BidCurve]:
    """Injection and withdrawal bids for every bus the portfolio serves.

    ``c_max`` is in MW (per bus, or one interval for all buses; defaults to the
    portfolio's own cap).  Each curve samples the exact benefit at
    ``n_segments + 1`` uniform capacities and keeps its concave envelope.
    """
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    if c_max is None:
        c_max = port.c_max
    if isinstance(c_max, AccessInterval):
        c_max = [c_max] * len(port.prosumers)
    c_max = _check_access(port, c_max)
    curves = []
    for pr, cap in zip(port.prosumers, c_max):
        for direction, top in ((WITHDRAWAL, -cap.c_lo), (INJECTION, cap.c_hi)):
            if top <= 0:
                continue
            grid = np.linspace(0.0, top, n_segments + 1)
            vals = benefit_samples(port, pr, direction, grid, kwh_per_mw)
            env = _concave_envelope(grid, vals)
            slopes = np.diff(env) / (np.diff(grid) * kwh_per_mw)
            # the hull guarantees concavity; clear float noise before validation
            slopes = np.minimum.accumulate(slopes)
            curves.append(
                BidCurve(
                    bus=pr.bus,
                    direction=direction,
                    breakpoints=tuple(zip(grid[1:].tolist(), slopes.tolist())),
                    value_at_zero=float(env[0]),
                    kwh_per_mw=kwh_per_mw,
                    dera_id=port.id,
                )
            )
    return curves


def bid_constant(port: DeraPortfolio) -> float:
    """Capacity-independent part of the bid, ``sum_i (h_i - zeta S_NEM(r_i))``."""
    total = 0.0
    for pr in port.prosumers:
        hh = _household(port, pr)
        total += pr.households * (hh.h - port.zeta * hh.s_nem)
    return total


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def portfolio_from_dict(cfg: dict) -> DeraPortfolio:
    try:
        tariff = NemTariff(**cfg["tariff"])
        prosumers = []
        for rec in cfg.get("prosumers", []):
            prosumers.append(
                Prosumer(
                    bus=int(rec["bus"]),
                    utility=UtilityFn(float(rec["a_hat"]), float(rec["b_hat"])),
                    params=ProsumerParams(float(rec["d_min"]), float(rec["d_max"]), float(rec["r_kwh"])),
                    households=float(rec.get("households", 1.0)),
                )
            )
        cm = cfg.get("c_max", {"injection_mw": 0.1, "withdrawal_mw": 0.1})
        c_max = AccessInterval(-float(cm["withdrawal_mw"]), float(cm["injection_mw"]))
        port = DeraPortfolio(
            prosumers=tuple(prosumers),
            zeta=float(cfg["zeta"]),
            lmp=float(cfg["lmp"]),
            tariff=tariff,
            id=str(cfg.get("id", "dera")),
            c_max=c_max,
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"bad DERA config: missing or malformed {exc}") from exc
    served = cfg.get("buses_served")
    if served is not None and sorted(int(b) for b in served) != sorted(port.buses):
        raise ValueError("buses_served does not match the prosumer list")
    return port


def portfolio_to_dict(port: DeraPortfolio) -> dict:
    return {
        "id": port.id,
        "zeta": port.zeta,
        "lmp": port.lmp,
        "tariff": {
            "pi_plus": port.tariff.pi_plus,
            "pi_minus": port.tariff.pi_minus,
            "pi_zero": port.tariff.pi_zero,
        },
        "prosumers": [
            {
                "bus": p.bus,
                "a_hat": p.utility.a_hat,
                "b_hat": p.utility.b_hat,
                "d_min": p.params.d_min,
                "d_max": p.params.d_max,
                "r_kwh": p.params.r,
                "households": p.households,
            }
            for p in port.prosumers
        ],
        "c_max": {"injection_mw": port.c_max.c_hi, "withdrawal_mw": -port.c_max.c_lo},
        "buses_served": port.buses,
    }


def load_portfolio(path: str | Path) -> DeraPortfolio:
    return portfolio_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class DeraBid:
    """Everything a DERA submits: curves plus the capacity-independent constant."""

    dera_id: str
    curves: tuple[BidCurve, ...]
    constant: float = 0.0
    c_max: AccessInterval = AccessInterval(-0.1, 0.1)

    def to_dict(self) -> dict:
        return {
            "dera_id": self.dera_id,
            "constant": self.constant,
            "c_max": {"injection_mw": self.c_max.c_hi, "withdrawal_mw": -self.c_max.c_lo},
            "curves": [c.to_dict() for c in self.curves],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeraBid":
        did = str(d["dera_id"])
        cm = d.get("c_max", {"injection_mw": 0.1, "withdrawal_mw": 0.1})
        return cls(
            dera_id=did,
            curves=tuple(BidCurve.from_dict(c, did) for c in d.get("curves", [])),
            constant=float(d.get("constant", 0.0)),
            c_max=AccessInterval(-float(cm["withdrawal_mw"]), float(cm["injection_mw"])),
        )


def make_bid(port: DeraPortfolio, n_segments: int = 10, kwh_per_mw: float = KWH_PER_MW_HOUR) -> DeraBid:
    return DeraBid(
        dera_id=port.id,
        curves=tuple(bid_curves(port, port.c_max, n_segments, kwh_per_mw)),
        constant=bid_constant(port),
        c_max=port.c_max,
    )
