"""Separable concave piecewise-linear maximization over linear constraints.

The engine is a bounded-variable revised primal simplex working on the
segment ("delta") expansion of every piecewise-linear objective term: a
variable ``x`` with breakpoints ``x0 < x1 < ... < xn`` becomes
``x = x0 + sum(delta_s)`` with ``0 <= delta_s <= x_{s+1} - x_s`` and slope
``m_s`` on ``delta_s``.  Concavity (nonincreasing slopes) makes that
relaxation exact.

Row duals follow the sensitivity convention: ``dual[r] = d(objective*)/d(rhs_r)``.
Hence ``<=`` rows carry nonnegative duals, ``>=`` rows nonpositive ones, and
equality rows are free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import blas

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-10
FEAS_TOL = 1e-9
KKT_GATE = 1e-8

_SENSES = ("<=", "=", ">=")


class InfeasibleProgramError(RuntimeError):
    """Phase 1 ended with positive infeasibility."""

    def __init__(self, message: str, rows: Sequence[int], tags: Sequence[Hashable]):
        super().__init__(message)
        self.rows = list(rows)
        self.tags = list(tags)


class CyclingGuardError(RuntimeError):
    """Iteration limit reached; indicates an internal fault rather than bad input."""


@dataclass(frozen=True)
class ConcavePwl:
    """Concave piecewise-linear function on ``[breakpoints[0], breakpoints[-1]]``.

    ``value(breakpoints[0]) == offset``.  Consecutive segments with identical
    slopes are merged on construction.
    """

    breakpoints: np.ndarray
    slopes: np.ndarray
    offset: float = 0.0

    def __post_init__(self) -> None:
        bp = np.asarray(self.breakpoints, dtype=float).ravel()
        sl = np.asarray(self.slopes, dtype=float).ravel()
        if bp.size != sl.size + 1 or sl.size == 0:
            raise ValueError("need len(breakpoints) == len(slopes) + 1 >= 2")
        if not np.all(np.isfinite(bp)) or not np.all(np.isfinite(sl)):
            raise ValueError("breakpoints and slopes must be finite")
        fixed = bp.size == 2 and bp[0] == bp[1]
        if not fixed and np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        scale = max(1.0, float(np.max(np.abs(sl))))
        if np.any(np.diff(sl) > 1e-12 * scale):
            raise ValueError("slopes must be nonincreasing (concave function)")
        keep = np.ones(sl.size, dtype=bool)
        keep[1:] = sl[1:] != sl[:-1]
        if not keep.all():
            starts = np.flatnonzero(keep)
            bp = np.append(bp[starts], bp[-1])
            sl = sl[starts]
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "slopes", sl)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def linear(cls, lb: float, ub: float, slope: float) -> "ConcavePwl":
        return cls(np.array([lb, ub]), np.array([slope]), offset=slope * lb)

    @property
    def lb(self) -> float:
        return float(self.breakpoints[0])

    @property
    def ub(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def n_segments(self) -> int:
        return int(self.slopes.size)

    def value(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        widths = np.diff(self.breakpoints)
        fill = np.clip(x[..., None] - self.breakpoints[:-1], 0.0, widths)
        out = self.offset + fill @ self.slopes
        return float(out) if out.ndim == 0 else out

    def superdifferential(self, x: float, tol: float = 1e-9) -> tuple[float, float]:
        """Interval of supergradients at ``x``, including the box normal cone."""
        bp, sl = self.breakpoints, self.slopes
        scale = tol * max(1.0, abs(bp[0]), abs(bp[-1]))
        if abs(bp[-1] - bp[0]) <= scale:
            return -np.inf, np.inf
        if x <= bp[0] + scale:
            return float(sl[0]), np.inf
        if x >= bp[-1] - scale:
            return -np.inf, float(sl[-1])
        k = int(np.searchsorted(bp, x))
        if k < bp.size and abs(bp[k] - x) <= scale:
            return float(sl[k]), float(sl[k - 1])
        if abs(bp[k - 1] - x) <= scale:
            return float(sl[k - 1]), float(sl[k - 2])
        return float(sl[k - 1]), float(sl[k - 1])


@dataclass
class KktResiduals:
    stationarity: float
    feasibility: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.feasibility, self.complementarity)

    def ok(self, gate: float = KKT_GATE) -> bool:
        return self.max() <= gate


@dataclass
class Solution:
    status: str
    x: np.ndarray
    row_duals: np.ndarray
    objective: float
    tags: list
    bound_lower: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bound_upper: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residuals: KktResiduals | None = None
    iterations: int = 0
    segment_order_ok: bool = True

    def dual(self, tag: Hashable) -> float:
        return float(self.row_duals[self._tag_index[tag]])

    @property
    def duals(self) -> dict:
        return {t: float(self.row_duals[i]) for t, i in self._tag_index.items()}

    def __post_init__(self) -> None:
        self._tag_index = {t: i for i, t in enumerate(self.tags) if t is not None}


class ConvexSeparableProgram:
    """Maximize ``sum_j f_j(x_j)`` subject to linear rows and finite boxes.

    Every ``f_j`` is concave piecewise linear; plain linear terms are the
    one-segment special case.
    """

    def __init__(self) -> None:
        self.terms: list[ConcavePwl] = []
        self.names: list[str | None] = []
        self._rows_idx: list[np.ndarray] = []
        self._rows_val: list[np.ndarray] = []
        self.senses: list[str] = []
        self.rhs: list[float] = []
        self.tags: list[Hashable] = []
        self._matrix: sp.csr_matrix | None = None

    # -- construction -------------------------------------------------
    def add_variable(
        self,
        lb: float,
        ub: float,
        objective: float | ConcavePwl = 0.0,
        name: str | None = None,
    ) -> int:
        if not (np.isfinite(lb) and np.isfinite(ub)):
            raise ValueError("variables must be bounded")
        if lb > ub:
            raise ValueError(f"empty box for variable {name!r}: [{lb}, {ub}]")
        if isinstance(objective, ConcavePwl):
            if not (np.isclose(objective.lb, lb) and np.isclose(objective.ub, ub)):
                raise ValueError("piecewise-linear term must span the variable box")
            term = objective
        else:
            term = ConcavePwl.linear(lb, ub, float(objective))
        self.terms.append(term)
        self.names.append(name)
        self._matrix = None
        return len(self.terms) - 1

    def add_row(
        self,
        idx: Iterable[int],
        coef: Iterable[float],
        sense: str,
        rhs: float,
        tag: Hashable = None,
    ) -> int:
        if sense not in _SENSES:
            raise ValueError(f"sense must be one of {_SENSES}")
        idx = np.asarray(list(idx), dtype=np.int64)
        coef = np.asarray(list(coef), dtype=float)
        if idx.shape != coef.shape:
            raise ValueError("index/coefficient length mismatch")
        if idx.size and (idx.min() < 0 or idx.max() >= len(self.terms)):
            raise ValueError("row references an unknown variable")
        if tag is not None and tag in self.tags:
            raise ValueError(f"duplicate row tag {tag!r}")
        self._rows_idx.append(idx)
        self._rows_val.append(coef)
        self.senses.append(sense)
        self.rhs.append(float(rhs))
        self.tags.append(tag)
        self._matrix = None
        return len(self.rhs) - 1

    # -- views --------------------------------------------------------
    @property
    def n_vars(self) -> int:
        return len(self.terms)

    @property
    def n_rows(self) -> int:
        return len(self.rhs)

    @property
    def lb(self) -> np.ndarray:
        return np.array([t.lb for t in self.terms])

    @property
    def ub(self) -> np.ndarray:
        return np.array([t.ub for t in self.terms])

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            if self._rows_idx:
                lens = [len(i) for i in self._rows_idx]
                rows = np.repeat(np.arange(len(lens)), lens)
                cols = np.concatenate(self._rows_idx)
                vals = np.concatenate(self._rows_val)
            else:
                rows = cols = np.zeros(0, dtype=np.int64)
                vals = np.zeros(0)
            self._matrix = sp.csr_matrix(
                (vals, (rows, cols)), shape=(self.n_rows, self.n_vars)
            )
        return self._matrix

    def objective_value(self, x: np.ndarray) -> float:
        return float(sum(t.value(v) for t, v in zip(self.terms, x)))

    def row_index(self, tag: Hashable) -> int:
        return self.tags.index(tag)

    def dump(self, path) -> None:
        """Write the program as plain text: one line per variable, then per row."""
        A = self.matrix.tocsr()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# vars {self.n_vars} rows {self.n_rows}\n")
            for j, t in enumerate(self.terms):
                bps = " ".join(f"{b:.12g}" for b in t.breakpoints)
                sls = " ".join(f"{s:.12g}" for s in t.slopes)
                fh.write(f"var\t{j}\t{self.names[j]}\t[{bps}]\t[{sls}]\n")
            for r in range(self.n_rows):
                lo, hi = A.indptr[r], A.indptr[r + 1]
                terms = " ".join(
                    f"{v:+.12g}*x{c}" for c, v in zip(A.indices[lo:hi], A.data[lo:hi])
                )
                fh.write(f"row\t{r}\t{self.tags[r]}\t{terms}\t{self.senses[r]}\t{self.rhs[r]:.12g}\n")


# ---------------------------------------------------------------------------
# simplex engine
# ---------------------------------------------------------------------------


def _rank1_update(a: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``a - outer(x, y)``, in place when ``a`` is Fortran-ordered."""
    if a.size and a.flags.f_contiguous:
        return blas.dger(-1.0, x, y, a=a, overwrite_a=1)
    return a - np.outer(x, y)


class _Simplex:
    """Bounded revised primal simplex on ``max c.z  s.t.  M z = rhs, l <= z <= u``."""

    refactor_every = 150
    degenerate_limit = 40

    def __init__(self, M: sp.csc_matrix, rhs, c, l, u, max_iter: int):
        self.M = M.tocsc()
        self.MT = self.M.T.tocsr()
        self.rhs = np.asarray(rhs, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.l = np.asarray(l, dtype=float)
        self.u = np.asarray(u, dtype=float)
        self.max_iter = max_iter
        self.m, self.n = self.M.shape
        self.iterations = 0

    # basis bookkeeping -------------------------------------------------
    def start(self, basis: np.ndarray, z: np.ndarray) -> None:
        self.basis = basis.astype(np.int64)
        self.z = z.astype(float)
        self.is_basic = np.zeros(self.n, dtype=bool)
        self.is_basic[self.basis] = True
        self.refactor()

    def refactor(self) -> None:
        B = self.M[:, self.basis].toarray()
        # Fortran order keeps columns contiguous and allows an in-place rank-1 update
        self.Binv = np.asfortranarray(np.linalg.inv(B))
        nb = ~self.is_basic
        r = self.rhs - self.M[:, nb] @ self.z[nb]
        self.z[self.basis] = self.Binv @ r
        self._since_refactor = 0

    def column(self, q: int) -> np.ndarray:
        lo, hi = self.M.indptr[q], self.M.indptr[q + 1]
        return self.Binv[:, self.M.indices[lo:hi]] @ self.M.data[lo:hi]

    def run(self, cost: np.ndarray) -> str:
        """Iterate to optimality for ``cost``; returns 'optimal'."""
        c = cost
        scale = max(1.0, float(np.max(np.abs(c)))) if c.size else 1.0
        dtol = 1e-11 * scale
        y = c[self.basis] @ self.Binv
        degenerate_run = 0
        bland = False
        fixed = self.u - self.l <= 0.0
        while True:
            if self.iterations >= self.max_iter:
                raise CyclingGuardError(f"simplex exceeded {self.max_iter} iterations")
            d = c - self.MT @ y
            with np.errstate(invalid="ignore"):
                at_upper = self.z >= self.u - 1e-12 * np.maximum(1.0, np.abs(self.u))
            up = (d > dtol) & ~at_upper
            down = (d < -dtol) & at_upper
            elig = (up | down) & ~self.is_basic & ~fixed
            if not elig.any():
                return "optimal"
            if bland:
                q = int(np.flatnonzero(elig)[0])
            else:
                score = np.where(elig, np.abs(d), -1.0)
                q = int(np.argmax(score))
            direction = 1.0 if up[q] else -1.0
            alpha = self.column(q)
            # basic values move by -theta * direction * alpha
            step = direction * alpha
            zb = self.z[self.basis]
            lb_b = self.l[self.basis]
            ub_b = self.u[self.basis]
            ratios = np.full(self.m, np.inf)
            dec = step > PIVOT_TOL
            inc = step < -PIVOT_TOL
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios[dec] = (zb[dec] - lb_b[dec]) / step[dec]
                ratios[inc] = (ub_b[inc] - zb[inc]) / (-step[inc])
            ratios = np.maximum(ratios, 0.0)
            flip = self.u[q] - self.l[q]
            theta_row = float(ratios.min()) if self.m else np.inf
            if flip <= theta_row:
                theta = flip
                leave = -1
            else:
                theta = theta_row
                ties = np.flatnonzero(ratios <= theta + 1e-12 * max(1.0, theta))
                if bland:
                    leave = int(ties[np.argmin(self.basis[ties])])
                else:
                    leave = int(ties[np.argmax(np.abs(alpha[ties]))])
            if not np.isfinite(theta):
                raise RuntimeError("unbounded direction in a bounded program")
            self.iterations += 1
            if theta <= 1e-12:
                degenerate_run += 1
                if degenerate_run > self.degenerate_limit:
                    bland = True
            else:
                degenerate_run = 0
                bland = False
            self.z[self.basis] = zb - theta * step
            self.z[q] += direction * theta
            if leave < 0:
                self.z[q] = self.u[q] if direction > 0 else self.l[q]
                continue
            out = self.basis[leave]
            # snap the leaving variable onto the bound it hit
            self.z[out] = self.l[out] if step[leave] > 0 else self.u[out]
            piv = alpha[leave]
            row = self.Binv[leave] / piv
            self.Binv = _rank1_update(self.Binv, alpha, row)
            self.Binv[leave] = row
            self.basis[leave] = q
            self.is_basic[out] = False
            self.is_basic[q] = True
            self._since_refactor += 1
            if self._since_refactor >= self.refactor_every:
                self.refactor()
                y = c[self.basis] @ self.Binv
            else:
                # the entering column's reduced cost drops to zero, others in the basis stay zero
                y = y + d[q] * row


def _expand(prog: ConvexSeparableProgram):
    """Segment expansion. Returns column data and a map back to variables."""
    A = prog.matrix.tocsc()
    owner, length, slope = [], [], []
    for j, t in enumerate(prog.terms):
        w = np.diff(t.breakpoints)
        owner.extend([j] * w.size)
        length.extend(w.tolist())
        slope.extend(t.slopes.tolist())
    owner = np.asarray(owner, dtype=np.int64)
    M = A[:, owner] if owner.size else sp.csc_matrix((prog.n_rows, 0))
    return M, owner, np.asarray(length), np.asarray(slope)


def solve(prog: ConvexSeparableProgram, max_iter: int | None = None) -> Solution:
    """Solve ``prog`` to optimality, returning primal values and row duals.

    Raises
    ------
    InfeasibleProgramError
        When no point satisfies every row; the offending rows are attached.
    """
    m = prog.n_rows
    lb = prog.lb
    M_seg, owner, length, slope = _expand(prog)
    n_seg = owner.size
    A = prog.matrix
    senses = np.array(prog.senses) if m else np.zeros(0, dtype="<U2")
    rhs = np.asarray(prog.rhs, dtype=float) - A @ lb

    # initial nonbasic segment values: put each variable at the breakpoint nearest 0
    seg_val = np.zeros(n_seg)
    for j, t in enumerate(prog.terms):
        target = t.breakpoints[np.argmin(np.abs(t.breakpoints))]
        if not np.all(np.diff(t.breakpoints) > 0):
            continue
        sel = np.flatnonzero(owner == j)
        seg_val[sel] = np.clip(target - t.breakpoints[:-1], 0.0, np.diff(t.breakpoints))

    res = rhs - M_seg @ seg_val
    slack_lo = np.where(senses == ">=", -np.inf, 0.0)
    slack_hi = np.where(senses == "<=", np.inf, 0.0)
    slack_val = np.clip(res, slack_lo, slack_hi)
    gap = res - slack_val
    need_art = np.abs(gap) > 0.0
    art_rows = np.flatnonzero(need_art)
    n_art = art_rows.size

    I = sp.identity(m, format="csc")
    art_cols = sp.csc_matrix(
        (np.sign(gap[art_rows]), (art_rows, np.arange(n_art))), shape=(m, n_art)
    )
    Mfull = sp.hstack([M_seg, I, art_cols], format="csc")
    n_tot = n_seg + m + n_art
    l = np.concatenate([np.zeros(n_seg), slack_lo, np.zeros(n_art)])
    u = np.concatenate([length, slack_hi, np.full(n_art, np.inf)])
    z = np.concatenate([seg_val, slack_val, np.abs(gap[art_rows])])
    basis = np.arange(n_seg, n_seg + m)
    basis[art_rows] = n_seg + m + np.arange(n_art)

    if max_iter is None:
        max_iter = 50 * (n_tot + m) + 1000
    eng = _Simplex(Mfull, rhs, np.zeros(n_tot), l, u, max_iter)
    eng.start(basis, z)

    if n_art:
        c1 = np.zeros(n_tot)
        c1[n_seg + m:] = -1.0
        eng.run(c1)
        eng.refactor()
        infeas = eng.z[n_seg + m:]
        scale = max(1.0, float(np.max(np.abs(rhs)))) if m else 1.0
        if infeas.sum() > FEAS_TOL * scale:
            bad = art_rows[infeas > FEAS_TOL * scale]
            raise InfeasibleProgramError(
                f"program infeasible: {bad.size} row(s) violated at phase-1 optimum, "
                f"first tag {prog.tags[bad[0]]!r}",
                bad.tolist(),
                [prog.tags[r] for r in bad],
            )
        # artificials are pinned to zero for phase 2
        eng.u[n_seg + m:] = 0.0
        eng.z[n_seg + m:] = np.where(eng.is_basic[n_seg + m:], eng.z[n_seg + m:], 0.0)

    c2 = np.zeros(n_tot)
    c2[:n_seg] = slope
    eng.run(c2)
    eng.refactor()

    zf = eng.z
    y = c2[eng.basis] @ eng.Binv if m else np.zeros(0)
    x = lb.copy()
    np.add.at(x, owner, zf[:n_seg])
    x = np.clip(x, prog.lb, prog.ub)

    order_ok = _segments_in_order(owner, zf[:n_seg], length)
    sol = Solution(
        status="optimal",
        x=x,
        row_duals=np.asarray(y, dtype=float),
        objective=prog.objective_value(x),
        tags=list(prog.tags),
        iterations=eng.iterations,
        segment_order_ok=order_ok,
    )
    res_ = kkt_residuals(prog, sol)
    sol.residuals = res_
    logger.debug(
        "solved %d vars / %d rows in %d iterations, kkt max %.2e",
        prog.n_vars, m, eng.iterations, res_.max(),
    )
    return sol


def _segments_in_order(owner, seg, length, tol: float = 1e-9) -> bool:
    """A later segment may be used only once every earlier one is saturated."""
    if owner.size < 2:
        return True
    same = owner[1:] == owner[:-1]
    later_used = seg[1:] > tol * np.maximum(1.0, length[1:])
    earlier_short = seg[:-1] < length[:-1] - tol * np.maximum(1.0, length[:-1])
    return not bool(np.any(same & later_used & earlier_short))


def kkt_residuals(prog: ConvexSeparableProgram, sol: Solution) -> KktResiduals:
    """Recompute stationarity, feasibility and complementary slackness from scratch.

    Stationarity is measured per variable as the distance from ``(A^T y)_j``
    to the supergradient set of ``f_j`` at ``x_j`` (box normal cone included).
    Also fills ``sol.bound_lower`` / ``sol.bound_upper`` with the box multipliers.
    """
    A = prog.matrix
    x = np.asarray(sol.x, dtype=float)
    y = np.asarray(sol.row_duals, dtype=float)
    n = prog.n_vars
    g = A.T @ y if prog.n_rows else np.zeros(n)
    stat = np.zeros(n)
    nu_lo = np.zeros(n)
    nu_hi = np.zeros(n)
    for j, t in enumerate(prog.terms):
        lo, hi = t.superdifferential(x[j])
        if g[j] < lo:
            stat[j] = lo - g[j]
        elif g[j] > hi:
            stat[j] = g[j] - hi
        # box multipliers: the share of the gradient mismatch held by an active bound
        if np.isinf(hi):
            nu_lo[j] = max(0.0, g[j] - t.slopes[0])
        if np.isinf(lo):
            nu_hi[j] = max(0.0, t.slopes[-1] - g[j])
    sol.bound_lower = nu_lo
    sol.bound_upper = nu_hi

    ax = A @ x if prog.n_rows else np.zeros(0)
    b = np.asarray(prog.rhs, dtype=float)
    senses = np.array(prog.senses)
    viol = np.zeros(prog.n_rows)
    sign_viol = np.zeros(prog.n_rows)
    le, ge, eq = senses == "<=", senses == ">=", senses == "="
    viol[le] = np.maximum(ax[le] - b[le], 0.0)
    viol[ge] = np.maximum(b[ge] - ax[ge], 0.0)
    viol[eq] = np.abs(ax[eq] - b[eq])
    sign_viol[le] = np.maximum(-y[le], 0.0)
    sign_viol[ge] = np.maximum(y[ge], 0.0)
    box = np.maximum(prog.lb - x, 0.0) + np.maximum(x - prog.ub, 0.0)
    comp = np.abs(y * (b - ax))
    comp[eq] = 0.0

    def _mx(v):
        return float(np.max(v)) if v.size else 0.0

    return KktResiduals(
        stationarity=_mx(stat),
        feasibility=max(_mx(viol), _mx(sign_viol), _mx(box)),
        complementarity=_mx(comp),
    )


def dual_objective(prog: ConvexSeparableProgram, y) -> float:
    """Lagrangian dual value ``b^T y + sum_j max_x (f_j(x) - (A^T y)_j x)``.

    Each inner maximum is attained at a breakpoint because ``f_j`` is
    piecewise linear, so no LP machinery is involved.
    """
    y = np.asarray(y, dtype=float)
    g = prog.matrix.T @ y if prog.n_rows else np.zeros(prog.n_vars)
    total = float(np.dot(np.asarray(prog.rhs, dtype=float), y)) if prog.n_rows else 0.0
    for j, t in enumerate(prog.terms):
        bp = t.breakpoints
        total += float(np.max(t.value(bp) - g[j] * bp))
    return total
