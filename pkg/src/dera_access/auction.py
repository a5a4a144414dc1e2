"""Robust forward auction for distribution-network access.

Each DERA bids concave benefits for injection access ``C_hi >= 0`` and
withdrawal access ``C_lo <= 0`` at every bus it serves.  The DSO maximizes
total bid benefit minus its operating cost ``J`` while guaranteeing that any
dispatch inside the cleared boxes, together with any utility-customer
injection inside ``[p0_lo, p0_hi]``, respects the line-flow and voltage
limits.  Splitting ``A = A+ - A-`` turns the robust constraint into

    A+ P_hi - A- P_lo <= b_hi,    A+ P_lo - A- P_hi >= b_lo,

with ``P_hi = sum_k C_hi_k + p0_hi`` and ``P_lo = sum_k C_lo_k + p0_lo``.

Sign conventions
----------------
The balance rows are posed as ``sum_k C_k - P = -p0`` and the reported prices
``lambda_hi``, ``lambda_lo`` are their rhs sensitivities.  Network multipliers
``mu_hi``, ``mu_lo`` are both nonnegative.  With these conventions

    lambda_hi = dJ/dP_hi + A+^T mu_hi + A-^T mu_lo
    lambda_lo = dJ/dP_lo - A-^T mu_hi - A+^T mu_lo

and ``lambda`` equals the derivative of the optimal surplus when the balance
is perturbed as ``P = sum_k C_k + p0 - eps``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dera import INJECTION, WITHDRAWAL, BidCurve, DeraBid, pwl_benefit_value
from .net_model import SensitivityBundle, worst_case_bounds
from .solver import (
    ConcavePwl,
    ConvexSeparableProgram,
    InfeasibleProgramError,
    KktResiduals,
    dual_objective,
    solve,
)

logger = logging.getLogger(__name__)

ROBUST_TOL = 1e-7


class AuctionInfeasibleError(RuntimeError):
    """The utility range alone already violates a network limit."""

    def __init__(self, message: str, blocks: Sequence[str] = ()):
        super().__init__(message)
        self.blocks = list(blocks)


@dataclass(frozen=True)
class DsoCost:
    """``J = sum_i j(P_hi_i) + sum_i j(-P_lo_i)`` with ``j(x) = b x^2 / 2 - a x`` ($/MW, $/MW^2)."""

    a_coeff: float = -0.096
    b_coeff: float = 0.2

    def __post_init__(self) -> None:
        if self.b_coeff < 0:
            raise ValueError("b_coeff must be nonnegative (convex cost)")

    def j(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * self.b_coeff * x * x - self.a_coeff * x

    def value(self, p_hi, p_lo) -> float:
        return float(np.sum(self.j(p_hi)) + np.sum(self.j(-np.asarray(p_lo, dtype=float))))

    def grad_hi(self, p_hi) -> np.ndarray:
        return self.b_coeff * np.asarray(p_hi, dtype=float) - self.a_coeff

    def grad_lo(self, p_lo) -> np.ndarray:
        # d/dP of j(-P)
        return self.a_coeff + self.b_coeff * np.asarray(p_lo, dtype=float)


@dataclass(frozen=True)
class AuctionInstance:
    bundle: SensitivityBundle
    bids: tuple[DeraBid, ...]
    utility_lo: np.ndarray
    utility_hi: np.ndarray
    dso_cost: DsoCost = DsoCost()
    j_segments: int = 20

    def __post_init__(self) -> None:
        object.__setattr__(self, "bids", tuple(self.bids))
        n = self.bundle.n_inj
        lo = np.asarray(self.utility_lo, dtype=float)
        hi = np.asarray(self.utility_hi, dtype=float)
        if lo.shape != (n,) or hi.shape != (n,):
            raise ValueError(f"utility range must have one entry per non-reference bus ({n})")
        if np.any(lo > hi):
            raise ValueError("utility range lower bound exceeds upper bound")
        object.__setattr__(self, "utility_lo", lo)
        object.__setattr__(self, "utility_hi", hi)
        if self.j_segments < 1:
            raise ValueError("j_segments must be >= 1")
        ids = [b.dera_id for b in self.bids]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate DERA ids")
        valid = set(self.bundle.bus_ids)
        for bid in self.bids:
            seen = set()
            for c in bid.curves:
                if c.bus not in valid:
                    raise ValueError(f"DERA {bid.dera_id!r} bids at bus {c.bus}, which is not a non-reference bus")
                key = (c.bus, c.direction)
                if key in seen:
                    raise ValueError(f"DERA {bid.dera_id!r} has two {c.direction} curves at bus {c.bus}")
                seen.add(key)

    def column(self, bus: int) -> int:
        return self.bundle.bus_ids.index(bus)


@dataclass(frozen=True)
class _Layout:
    """Where each decision variable lives in the assembled program."""

    c_vars: tuple[tuple[int, int, str, int, BidCurve], ...]  # (dera idx, column, direction, var, curve)
    p_hi: np.ndarray
    p_lo: np.ndarray
    j_pwl_hi: tuple[ConcavePwl, ...]
    j_pwl_lo: tuple[ConcavePwl, ...]
    width_hi: np.ndarray
    width_lo: np.ndarray
    mu_hi_rows: np.ndarray  # network row index -> program row, -1 when the limit is infinite
    mu_lo_rows: np.ndarray


def _j_pwl(cost: DsoCost, lo: float, hi: float, n: int, sign: float) -> tuple[ConcavePwl, float]:
    """``-j(sign * x)`` on ``[lo, hi]`` padded by half a segment on both sides."""
    w = max(hi - lo, 1e-3) / n
    xs = lo - 0.5 * w + w * np.arange(n + 2)
    vals = -cost.j(sign * xs)
    slopes = np.diff(vals) / w
    slopes = np.minimum.accumulate(slopes)
    return ConcavePwl(xs, slopes, offset=float(vals[0])), w


def assemble(inst: AuctionInstance, eps_hi=None, eps_lo=None) -> tuple[ConvexSeparableProgram, _Layout]:
    """Build the deterministic counterpart of the robust auction.

    ``eps_hi`` / ``eps_lo`` shift the balance rows to ``P = sum C + p0 - eps``.
    """
    bundle = inst.bundle
    n = bundle.n_inj
    prog = ConvexSeparableProgram()
    c_vars = []
    cap_hi = np.zeros(n)
    cap_lo = np.zeros(n)
    for k, bid in enumerate(inst.bids):
        for curve in bid.curves:
            col = inst.column(curve.bus)
            top = curve.c_max
            if curve.direction == INJECTION:
                v = prog.add_variable(0.0, top, curve.signed_pwl(), name=f"Chi[{bid.dera_id},{curve.bus}]")
                cap_hi[col] += top
            else:
                v = prog.add_variable(-top, 0.0, curve.signed_pwl(), name=f"Clo[{bid.dera_id},{curve.bus}]")
                cap_lo[col] += top
            c_vars.append((k, col, curve.direction, v, curve))

    cost = inst.dso_cost
    p_hi, p_lo, pw_hi, pw_lo, w_hi, w_lo = [], [], [], [], [], []
    for col in range(n):
        lo, hi = inst.utility_hi[col], inst.utility_hi[col] + cap_hi[col]
        pwl, w = _j_pwl(cost, lo, hi, inst.j_segments, 1.0)
        p_hi.append(prog.add_variable(pwl.lb, pwl.ub, pwl, name=f"Phi[{bundle.bus_ids[col]}]"))
        pw_hi.append(pwl)
        w_hi.append(w)
    for col in range(n):
        lo, hi = inst.utility_lo[col] - cap_lo[col], inst.utility_lo[col]
        pwl, w = _j_pwl(cost, lo, hi, inst.j_segments, -1.0)
        p_lo.append(prog.add_variable(pwl.lb, pwl.ub, pwl, name=f"Plo[{bundle.bus_ids[col]}]"))
        pw_lo.append(pwl)
        w_lo.append(w)

    e_hi = np.zeros(n) if eps_hi is None else np.asarray(eps_hi, dtype=float)
    e_lo = np.zeros(n) if eps_lo is None else np.asarray(eps_lo, dtype=float)
    members_hi: list[list[int]] = [[] for _ in range(n)]
    members_lo: list[list[int]] = [[] for _ in range(n)]
    for _, col, direction, v, _ in c_vars:
        (members_hi if direction == INJECTION else members_lo)[col].append(v)
    for col in range(n):
        bus = bundle.bus_ids[col]
        idx = members_hi[col] + [p_hi[col]]
        prog.add_row(idx, [1.0] * len(members_hi[col]) + [-1.0], "=",
                     -inst.utility_hi[col] + e_hi[col], tag=("lam_hi", bus))
    for col in range(n):
        bus = bundle.bus_ids[col]
        idx = members_lo[col] + [p_lo[col]]
        prog.add_row(idx, [1.0] * len(members_lo[col]) + [-1.0], "=",
                     -inst.utility_lo[col] + e_lo[col], tag=("lam_lo", bus))

    ap, am = bundle.a_plus, bundle.a_minus
    p_hi_arr = np.array(p_hi)
    p_lo_arr = np.array(p_lo)
    n_net = ap.shape[0]
    mu_hi_rows = np.full(n_net, -1)
    mu_lo_rows = np.full(n_net, -1)
    for j in range(n_net):
        if np.isfinite(bundle.limit_hi[j]):
            idx, coef = _row(ap[j], p_hi_arr, -am[j], p_lo_arr)
            mu_hi_rows[j] = prog.add_row(idx, coef, "<=", bundle.limit_hi[j], tag=("mu_hi", j))
    for j in range(n_net):
        if np.isfinite(bundle.limit_lo[j]):
            idx, coef = _row(ap[j], p_lo_arr, -am[j], p_hi_arr)
            mu_lo_rows[j] = prog.add_row(idx, coef, ">=", bundle.limit_lo[j], tag=("mu_lo", j))

    layout = _Layout(
        c_vars=tuple(c_vars),
        p_hi=p_hi_arr,
        p_lo=p_lo_arr,
        j_pwl_hi=tuple(pw_hi),
        j_pwl_lo=tuple(pw_lo),
        width_hi=np.array(w_hi),
        width_lo=np.array(w_lo),
        mu_hi_rows=mu_hi_rows,
        mu_lo_rows=mu_lo_rows,
    )
    return prog, layout


def _row(c1, v1, c2, v2):
    nz1 = np.flatnonzero(c1)
    nz2 = np.flatnonzero(c2)
    return (
        np.concatenate([v1[nz1], v2[nz2]]).tolist(),
        np.concatenate([c1[nz1], c2[nz2]]).tolist(),
    )


@dataclass(frozen=True)
class DualSolution:
    lambda_hi: np.ndarray
    lambda_lo: np.ndarray
    mu_hi: np.ndarray
    mu_lo: np.ndarray
    eta_lo: dict[str, np.ndarray] = field(default_factory=dict)
    eta_hi: dict[str, np.ndarray] = field(default_factory=dict)
    xi_lo: dict[str, np.ndarray] = field(default_factory=dict)
    xi_hi: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class ClearingResult:
    bus_ids: tuple[int, ...]
    dera_ids: tuple[str, ...]
    c_hi: dict[str, np.ndarray]
    c_lo: dict[str, np.ndarray]
    p_agg_hi: np.ndarray
    p_agg_lo: np.ndarray
    utility_lo: np.ndarray
    utility_hi: np.ndarray
    social_surplus: float
    surplus_pwl: float
    lp_objective: float
    dual_objective: float
    duals: DualSolution
    residuals: KktResiduals
    dera_value: dict[str, float]
    j_width_hi: np.ndarray
    j_width_lo: np.ndarray
    j_pwl_grad_hi: np.ndarray
    j_pwl_grad_lo: np.ndarray
    segment_order_ok: bool = True
    iterations: int = 0

    @property
    def gap_pwl(self) -> float:
        """True-cost surplus minus the surplus the clearing program optimized."""
        return self.social_surplus - self.surplus_pwl

    @property
    def duality_gap(self) -> float:
        return abs(self.lp_objective - self.dual_objective)

    def access_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Total per-bus injection range ``[sum C_lo + p0_lo, sum C_hi + p0_hi]``."""
        lo = self.utility_lo + sum(self.c_lo.values(), np.zeros(len(self.bus_ids)))
        hi = self.utility_hi + sum(self.c_hi.values(), np.zeros(len(self.bus_ids)))
        return lo, hi


def _utility_feasible(inst: AuctionInstance) -> None:
    wmin, wmax = worst_case_bounds(inst.bundle, inst.utility_lo, inst.utility_hi)
    bad_hi = np.flatnonzero(wmax > inst.bundle.limit_hi + ROBUST_TOL)
    bad_lo = np.flatnonzero(wmin < inst.bundle.limit_lo - ROBUST_TOL)
    if bad_hi.size or bad_lo.size:
        rows = [inst.bundle.row_label(j) + " upper" for j in bad_hi]
        rows += [inst.bundle.row_label(j) + " lower" for j in bad_lo]
        blocks = []
        if bad_hi.size:
            blocks.append("network upper limits (mu_hi)")
        if bad_lo.size:
            blocks.append("network lower limits (mu_lo)")
        raise AuctionInfeasibleError(
            f"utility-customer range alone violates {len(rows)} limit(s): {', '.join(rows[:5])}",
            blocks,
        )


def clear(inst: AuctionInstance) -> ClearingResult:
    """Solve the auction and collect allocations, prices and diagnostics."""
    _utility_feasible(inst)
    prog, lay = assemble(inst)
    try:
        sol = solve(prog)
    except InfeasibleProgramError as exc:
        blocks = sorted({str(t[0]) for t in exc.tags if isinstance(t, tuple)})
        raise AuctionInfeasibleError(str(exc), blocks) from exc
    return _collect(inst, prog, lay, sol)


def _collect(inst, prog, lay: _Layout, sol) -> ClearingResult:
    bundle = inst.bundle
    n = bundle.n_inj
    x = sol.x
    y = sol.row_duals
    ids = tuple(b.dera_id for b in inst.bids)
    c_hi = {d: np.zeros(n) for d in ids}
    c_lo = {d: np.zeros(n) for d in ids}
    eta_lo = {d: np.zeros(n) for d in ids}
    eta_hi = {d: np.zeros(n) for d in ids}
    xi_lo = {d: np.zeros(n) for d in ids}
    xi_hi = {d: np.zeros(n) for d in ids}
    value = {d: bid.constant for d, bid in zip(ids, inst.bids)}
    for k, col, direction, v, curve in lay.c_vars:
        d = ids[k]
        val = x[v]
        value[d] += curve.value_at_zero + pwl_benefit_value(curve, _clip_dir(val, direction, curve.c_max))
        if direction == INJECTION:
            c_hi[d][col] = val
            eta_lo[d][col] = sol.bound_lower[v]
            eta_hi[d][col] = sol.bound_upper[v]
        else:
            c_lo[d][col] = val
            xi_lo[d][col] = sol.bound_lower[v]
            xi_hi[d][col] = sol.bound_upper[v]

    lam_hi = y[:n].copy()
    lam_lo = y[n: 2 * n].copy()
    n_net = bundle.a_plus.shape[0]
    mu_hi = np.zeros(n_net)
    mu_lo = np.zeros(n_net)
    has_hi = lay.mu_hi_rows >= 0
    has_lo = lay.mu_lo_rows >= 0
    mu_hi[has_hi] = y[lay.mu_hi_rows[has_hi]]
    mu_lo[has_lo] = -y[lay.mu_lo_rows[has_lo]]

    p_hi = x[lay.p_hi]
    p_lo = x[lay.p_lo]
    cost = inst.dso_cost
    bids_total = float(sum(value.values()))
    j_pwl = -sum(t.value(p) for t, p in zip(lay.j_pwl_hi, p_hi)) - sum(
        t.value(p) for t, p in zip(lay.j_pwl_lo, p_lo)
    )
    net_hi = bundle.a_plus.T @ mu_hi + bundle.a_minus.T @ mu_lo
    net_lo = -bundle.a_minus.T @ mu_hi - bundle.a_plus.T @ mu_lo
    g_hi = np.array([_pwl_grad(t, p, v) for t, p, v in zip(lay.j_pwl_hi, p_hi, lam_hi - net_hi)])
    g_lo = np.array([_pwl_grad(t, p, v) for t, p, v in zip(lay.j_pwl_lo, p_lo, lam_lo - net_lo)])

    return ClearingResult(
        bus_ids=tuple(bundle.bus_ids),
        dera_ids=ids,
        c_hi=c_hi,
        c_lo=c_lo,
        p_agg_hi=p_hi,
        p_agg_lo=p_lo,
        utility_lo=inst.utility_lo.copy(),
        utility_hi=inst.utility_hi.copy(),
        social_surplus=bids_total - cost.value(p_hi, p_lo),
        surplus_pwl=bids_total - float(j_pwl),
        lp_objective=sol.objective,
        dual_objective=dual_objective(prog, y),
        duals=DualSolution(lam_hi, lam_lo, mu_hi, mu_lo, eta_lo, eta_hi, xi_lo, xi_hi),
        residuals=sol.residuals,
        dera_value=value,
        j_width_hi=lay.width_hi,
        j_width_lo=lay.width_lo,
        j_pwl_grad_hi=g_hi,
        j_pwl_grad_lo=g_lo,
        segment_order_ok=sol.segment_order_ok,
        iterations=sol.iterations,
    )


def _clip_dir(val: float, direction: str, top: float) -> float:
    if direction == INJECTION:
        return min(max(val, 0.0), top)
    return max(min(val, 0.0), -top)


def _pwl_grad(term: ConcavePwl, p: float, target: float) -> float:
    """Supergradient of ``J_pwl`` (the cost, so sign flipped) nearest to ``target``."""
    lo, hi = term.superdifferential(p)
    # cost gradient is minus the objective supergradient
    return float(np.clip(target, -hi, -lo))


def locational_prices(result: ClearingResult) -> dict[int, tuple[float, float]]:
    return {
        bus: (float(result.duals.lambda_hi[i]), float(result.duals.lambda_lo[i]))
        for i, bus in enumerate(result.bus_ids)
    }


@dataclass(frozen=True)
class PriceIdentityReport:
    residual_hi: float
    residual_lo: float
    residual_hi_pwl: float
    residual_lo_pwl: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return max(self.residual_hi, self.residual_lo) <= self.tolerance


def price_identity_terms(result: ClearingResult, bundle: SensitivityBundle):
    """Network terms ``A+^T mu_hi + A-^T mu_lo`` and ``-A-^T mu_hi - A+^T mu_lo``."""
    d = result.duals
    net_hi = bundle.a_plus.T @ d.mu_hi + bundle.a_minus.T @ d.mu_lo
    net_lo = -bundle.a_minus.T @ d.mu_hi - bundle.a_plus.T @ d.mu_lo
    return net_hi, net_lo


def check_price_identity(
    result: ClearingResult, bundle: SensitivityBundle, cost: DsoCost, base_tol: float = 1e-6
) -> PriceIdentityReport:
    """Compare the prices with the cost gradient plus the network multiplier terms.

    The true quadratic gradient is used, so the tolerance is widened by
    ``b * segment width`` to cover the linearization of ``J``.  The same
    residual against the linearized gradient is reported as well and should
    sit at solver precision.
    """
    d = result.duals
    net_hi, net_lo = price_identity_terms(result, bundle)
    r_hi = np.abs(d.lambda_hi - (cost.grad_hi(result.p_agg_hi) + net_hi))
    r_lo = np.abs(d.lambda_lo - (cost.grad_lo(result.p_agg_lo) + net_lo))
    rp_hi = np.abs(d.lambda_hi - (result.j_pwl_grad_hi + net_hi))
    rp_lo = np.abs(d.lambda_lo - (result.j_pwl_grad_lo + net_lo))
    width = max(
        float(np.max(result.j_width_hi, initial=0.0)), float(np.max(result.j_width_lo, initial=0.0))
    )
    tol = base_tol + cost.b_coeff * width

    def _mx(v):
        return float(np.max(v)) if v.size else 0.0

    return PriceIdentityReport(_mx(r_hi), _mx(r_lo), _mx(rp_hi), _mx(rp_lo), tol)


def perturbed_optimum(inst: AuctionInstance, eps_hi=None, eps_lo=None) -> float | None:
    """Optimal program value with ``P = sum C + p0 - eps``; ``None`` if infeasible."""
    prog, _ = assemble(inst, eps_hi, eps_lo)
    try:
        return solve(prog).objective
    except InfeasibleProgramError:
        return None


@dataclass(frozen=True)
class EnvelopePoint:
    bus: int
    direction: str
    price: float
    forward: float | None
    backward: float | None

    @property
    def central(self) -> float | None:
        if self.forward is None or self.backward is None:
            return None
        return 0.5 * (self.forward + self.backward)

    def kinked(self, tol: float = 1e-6) -> bool:
        if self.forward is None or self.backward is None:
            return True
        return abs(self.forward - self.backward) > tol * max(1.0, abs(self.price))

    def bracket_ok(self, tol: float = 1e-6) -> bool:
        """Concavity of the value function puts the price between the one-sided slopes."""
        s = tol * max(1.0, abs(self.price))
        if self.forward is not None and self.price < self.forward - s:
            return False
        if self.backward is not None and self.price > self.backward + s:
            return False
        return True


def envelope_check(
    inst: AuctionInstance,
    result: ClearingResult,
    h: float = 1e-4,
    buses: Sequence[int] | None = None,
) -> list[EnvelopePoint]:
    """Finite differences of the optimal value against ``lambda_hi`` and ``lambda_lo``."""
    n = inst.bundle.n_inj
    base = result.lp_objective
    cols = range(n) if buses is None else [inst.column(b) for b in buses]
    out = []
    for col in cols:
        for direction in (INJECTION, WITHDRAWAL):
            e = np.zeros(n)
            e[col] = h
            kw_p = {"eps_hi": e} if direction == INJECTION else {"eps_lo": e}
            kw_m = {"eps_hi": -e} if direction == INJECTION else {"eps_lo": -e}
            sp_ = perturbed_optimum(inst, **kw_p)
            sm_ = perturbed_optimum(inst, **kw_m)
            price = result.duals.lambda_hi[col] if direction == INJECTION else result.duals.lambda_lo[col]
            out.append(
                EnvelopePoint(
                    bus=inst.bundle.bus_ids[col],
                    direction=direction,
                    price=float(price),
                    forward=None if sp_ is None else (sp_ - base) / h,
                    backward=None if sm_ is None else (base - sm_) / h,
                )
            )
    return out


def payments(result: ClearingResult) -> dict[str, float]:
    """``sum_i C_hi_i * lambda_hi_i - C_lo_i * lambda_lo_i`` per DERA."""
    d = result.duals
    return {
        k: float(result.c_hi[k] @ d.lambda_hi - result.c_lo[k] @ d.lambda_lo)
        for k in result.dera_ids
    }


@dataclass(frozen=True)
class RobustCertificate:
    exact_ok: bool
    exact_margin: float
    worst_row: str
    sampled_ok: bool
    n_samples: int
    n_violations: int
    worst_sample_margin: float
    witness: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.exact_ok and self.sampled_ok

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "exact_ok": self.exact_ok,
            "exact_margin": self.exact_margin,
            "worst_row": self.worst_row,
            "sampled_ok": self.sampled_ok,
            "n_samples": self.n_samples,
            "n_violations": self.n_violations,
            "worst_sample_margin": self.worst_sample_margin,
            "witness": None if self.witness is None else self.witness.tolist(),
        }


def verify_robust(
    result: ClearingResult,
    bundle: SensitivityBundle,
    utility_range: tuple[np.ndarray, np.ndarray] | None = None,
    n_samples: int = 10_000,
    seed: int = 0,
    tol: float = ROBUST_TOL,
    chunk: int = 2_000,
) -> RobustCertificate:
    """Certify that every dispatch inside the cleared boxes is network-feasible.

    The exact part evaluates the worst case of each limit over the whole box;
    the sampled part draws independent uniform profiles for every DERA and
    for the utility customers.
    """
    u_lo, u_hi = (result.utility_lo, result.utility_hi) if utility_range is None else utility_range
    u_lo = np.asarray(u_lo, dtype=float)
    u_hi = np.asarray(u_hi, dtype=float)
    n = bundle.n_inj
    tot_lo = u_lo + sum(result.c_lo.values(), np.zeros(n))
    tot_hi = u_hi + sum(result.c_hi.values(), np.zeros(n))
    wmin, wmax = worst_case_bounds(bundle, tot_lo, tot_hi)
    up = bundle.limit_hi - wmax
    dn = wmin - bundle.limit_lo
    margins = np.minimum(up, dn)
    j = int(np.argmin(margins)) if margins.size else 0
    exact_margin = float(margins[j]) if margins.size else math.inf
    exact_ok = exact_margin >= -tol
    witness = None
    if not exact_ok:
        row = bundle.a_matrix[j]
        if up[j] <= dn[j]:
            witness = np.where(row >= 0, tot_hi, tot_lo)
        else:
            witness = np.where(row >= 0, tot_lo, tot_hi)
    worst_row = bundle.row_label(j) if margins.size else ""

    rng = np.random.default_rng(seed)
    boxes = [(u_lo, u_hi)] + [(result.c_lo[k], result.c_hi[k]) for k in result.dera_ids]
    n_viol = 0
    worst = math.inf
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        p = np.zeros((m, n))
        for lo, hi in boxes:
            p += lo + (hi - lo) * rng.random((m, n))
        w = p @ bundle.a_matrix.T
        marg = np.minimum(bundle.limit_hi - w, w - bundle.limit_lo).min(axis=1)
        bad = marg < -tol
        n_viol += int(bad.sum())
        if bad.any() and witness is None:
            witness = p[int(np.argmax(bad))]
        worst = min(worst, float(marg.min()))
        done += m
    return RobustCertificate(
        exact_ok=bool(exact_ok),
        exact_margin=exact_margin,
        worst_row=worst_row,
        sampled_ok=n_viol == 0,
        n_samples=n_samples,
        n_violations=n_viol,
        worst_sample_margin=worst if n_samples else math.inf,
        witness=witness,
    )


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _f(v) -> float:
    # adding 0.0 folds -0.0 into 0.0
    return float(v) + 0.0


def result_to_dict(result: ClearingResult, certificate: RobustCertificate | None = None, meta: dict | None = None) -> dict:
    d = result.duals
    pay = payments(result)
    out = {
        "surplus": _f(result.social_surplus),
        "gap_pwl": _f(result.gap_pwl),
        "surplus_pwl": _f(result.surplus_pwl),
        "lp_objective": _f(result.lp_objective),
        "duality_gap": _f(result.duality_gap),
        "per_bus": [
            {
                "bus": bus,
                "lambda_hi": _f(d.lambda_hi[i]),
                "lambda_lo": _f(d.lambda_lo[i]),
                "p_agg_hi": _f(result.p_agg_hi[i]),
                "p_agg_lo": _f(result.p_agg_lo[i]),
                "p0_lo": _f(result.utility_lo[i]),
                "p0_hi": _f(result.utility_hi[i]),
            }
            for i, bus in enumerate(result.bus_ids)
        ],
        "per_dera": [
            {
                "id": k,
                "payment": _f(pay[k]),
                "value": _f(result.dera_value[k]),
                "per_bus": [
                    {"bus": bus, "c_hi": _f(result.c_hi[k][i]), "c_lo": _f(result.c_lo[k][i])}
                    for i, bus in enumerate(result.bus_ids)
                ],
            }
            for k in result.dera_ids
        ],
        "mu_hi": [_f(v) for v in d.mu_hi],
        "mu_lo": [_f(v) for v in d.mu_lo],
        "kkt_residuals": {
            "stationarity": _f(result.residuals.stationarity),
            "feasibility": _f(result.residuals.feasibility),
            "complementarity": _f(result.residuals.complementarity),
        },
        "robust_certificate": None if certificate is None else certificate.to_dict(),
    }
    if meta:
        out["meta"] = meta
    return out


@dataclass(frozen=True)
class ClearedAllocation:
    """The subset of a result needed to re-verify it: boxes and utility range."""

    bus_ids: tuple[int, ...]
    dera_ids: tuple[str, ...]
    c_hi: dict[str, np.ndarray]
    c_lo: dict[str, np.ndarray]
    utility_lo: np.ndarray
    utility_hi: np.ndarray


def allocation_from_dict(data: dict) -> ClearedAllocation:
    try:
        buses = tuple(int(r["bus"]) for r in data["per_bus"])
        u_lo = np.array([float(r["p0_lo"]) for r in data["per_bus"]])
        u_hi = np.array([float(r["p0_hi"]) for r in data["per_bus"]])
        pos = {b: i for i, b in enumerate(buses)}
        c_hi, c_lo, ids = {}, {}, []
        for rec in data["per_dera"]:
            k = str(rec["id"])
            ids.append(k)
            c_hi[k] = np.zeros(len(buses))
            c_lo[k] = np.zeros(len(buses))
            for r in rec["per_bus"]:
                c_hi[k][pos[int(r["bus"])]] = float(r["c_hi"])
                c_lo[k][pos[int(r["bus"])]] = float(r["c_lo"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed result file: {exc}") from exc
    return ClearedAllocation(buses, tuple(ids), c_hi, c_lo, u_lo, u_hi)


def prices_csv(result: ClearingResult) -> str:
    """Per-bus prices, aggregates and allocations, one row per bus."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["bus", "lambda_hi", "lambda_lo", "p_agg_hi", "p_agg_lo", "p0_lo", "p0_hi"]
    for k in result.dera_ids:
        head += [f"c_hi[{k}]", f"c_lo[{k}]"]
    w.writerow(head)
    d = result.duals
    for i, bus in enumerate(result.bus_ids):
        row = [bus, d.lambda_hi[i], d.lambda_lo[i], result.p_agg_hi[i], result.p_agg_lo[i],
               result.utility_lo[i], result.utility_hi[i]]
        for k in result.dera_ids:
            row += [result.c_hi[k][i], result.c_lo[k][i]]
        w.writerow([row[0]] + [repr(_f(v)) for v in row[1:]])
    return buf.getvalue()


def write_result(path: str | Path, result: ClearingResult, certificate=None, meta=None) -> None:
    Path(path).write_text(
        json.dumps(result_to_dict(result, certificate, meta), indent=2, sort_keys=False) + "\n",
        encoding="utf-8",
    )
