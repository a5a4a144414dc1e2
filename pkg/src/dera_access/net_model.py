"""LinDistFlow model of a radial distribution feeder.

Injections ``p`` (MW, one entry per non-reference bus) map to line flows and
squared-voltage deviations through one matrix::

    (f, u - u_base) = A p,   A = [ S ; 2 S^T (R + alpha X) ]

where ``S`` is the reduced shift-factor (path incidence) matrix.  ``R`` and
``X`` are stored per MW, i.e. per-unit impedance divided by the MVA base, so
``A`` can be applied to MW quantities directly.
"""

from __future__ import annotations

import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CaseFormatError(ValueError):
    """Malformed MATPOWER text."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class NetworkTopologyError(ValueError):
    """The network is not a connected tree rooted at the reference bus."""


def alpha_from_power_factor(pf: float) -> float:
    """Reactive-to-real ratio for a fixed power factor."""
    if not 0.0 < pf <= 1.0:
        raise ValueError(f"power factor must lie in (0, 1], got {pf}")
    return math.sqrt(1.0 - pf * pf) / pf


def power_factor_from_alpha(alpha: float) -> float:
    return 1.0 / math.sqrt(1.0 + alpha * alpha)


@dataclass(frozen=True)
class Bus:
    id: int
    base_voltage_sq: float = 1.0


@dataclass(frozen=True)
class Line:
    """A feeder segment oriented from the child bus toward the root."""

    from_bus: int
    to_bus: int
    resistance_pu: float
    reactance_pu: float
    flow_limit_mw: float | None = None

    def __post_init__(self) -> None:
        if self.resistance_pu < 0 or self.reactance_pu < 0:
            raise ValueError(f"negative impedance on line {self.from_bus}-{self.to_bus}")
        if self.flow_limit_mw is not None and self.flow_limit_mw <= 0:
            raise ValueError(f"flow limit must be positive on line {self.from_bus}-{self.to_bus}")

    @property
    def label(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class RadialNetwork:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_mva: float = 1.0
    power_factor_alpha: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        if self.base_mva <= 0:
            raise ValueError("base_mva must be positive")
        if self.power_factor_alpha < 0:
            raise ValueError("alpha must be nonnegative")
        ids = [b.id for b in self.buses]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise NetworkTopologyError("bus ids must be exactly 1..N")
        if len(self.lines) != len(self.buses) - 1:
            raise NetworkTopologyError(
                f"not radial: {len(self.lines)} lines for {len(self.buses)} buses"
            )
        parent: dict[int, int] = {}
        for ln in self.lines:
            if ln.from_bus not in ids or ln.to_bus not in ids:
                raise NetworkTopologyError(f"line {ln.label} references an unknown bus")
            if ln.from_bus == 1:
                raise NetworkTopologyError("the reference bus cannot be a line's child end")
            if ln.from_bus in parent:
                raise NetworkTopologyError(f"bus {ln.from_bus} has two parent lines")
            parent[ln.from_bus] = ln.to_bus
        # every bus must reach the root without revisiting a bus
        for b in ids[1:]:
            seen = {b}
            cur = b
            while cur != 1:
                cur = parent.get(cur)
                if cur is None or cur in seen:
                    raise NetworkTopologyError(f"bus {b} has no path to the reference bus")
                seen.add(cur)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def u_base(self) -> float:
        return self.bus(1).base_voltage_sq

    def bus(self, bus_id: int) -> Bus:
        return next(b for b in self.buses if b.id == bus_id)

    def parent_line(self) -> dict[int, int]:
        """Map child bus id -> index of the line connecting it to its parent."""
        return {ln.from_bus: k for k, ln in enumerate(self.lines)}

    def root_path(self, bus_id: int) -> list[int]:
        """Line indices from ``bus_id`` up to the reference bus."""
        up = self.parent_line()
        path = []
        cur = bus_id
        while cur != 1:
            k = up[cur]
            path.append(k)
            cur = self.lines[k].to_bus
        return path

    # -- native JSON ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "base_mva": self.base_mva,
            "power_factor": power_factor_from_alpha(self.power_factor_alpha),
            "alpha": self.power_factor_alpha,
            "u_base": self.u_base,
            "buses": [{"id": b.id} for b in self.buses],
            "lines": [
                {
                    "from": ln.from_bus,
                    "to": ln.to_bus,
                    "r": ln.resistance_pu,
                    "x": ln.reactance_pu,
                    "flow_limit_mw": ln.flow_limit_mw,
                }
                for ln in self.lines
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RadialNetwork":
        try:
            u_base = float(data.get("u_base", 1.0))
            buses = [Bus(int(b["id"]), u_base) for b in data["buses"]]
            lines = [
                Line(
                    int(ln["from"]),
                    int(ln["to"]),
                    float(ln["r"]),
                    float(ln["x"]),
                    None if ln.get("flow_limit_mw") is None else float(ln["flow_limit_mw"]),
                )
                for ln in data["lines"]
            ]
            if "alpha" in data:
                alpha = float(data["alpha"])
            else:
                alpha = alpha_from_power_factor(float(data.get("power_factor", 1.0)))
            base = float(data.get("base_mva", 1.0))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"bad network JSON: {exc}") from exc
        buses.sort(key=lambda b: b.id)
        return orient_lines(buses, lines, base, alpha)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RadialNetwork":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_flow_limits(self, limits) -> "RadialNetwork":
        limits = list(limits)
        if len(limits) != len(self.lines):
            raise ValueError("one flow limit per line required")
        lines = [
            Line(ln.from_bus, ln.to_bus, ln.resistance_pu, ln.reactance_pu,
                 None if lim is None or not np.isfinite(lim) else float(lim))
            for ln, lim in zip(self.lines, limits)
        ]
        return RadialNetwork(self.buses, lines, self.base_mva, self.power_factor_alpha)


def orient_lines(
    buses: list[Bus], lines: list[Line], base_mva: float, alpha: float
) -> RadialNetwork:
    """Re-orient undirected branches child -> parent by BFS from bus 1, keeping order."""
    ids = {b.id for b in buses}
    adj: dict[int, list[int]] = {b: [] for b in ids}
    pairs = set()
    for k, ln in enumerate(lines):
        key = frozenset((ln.from_bus, ln.to_bus))
        if len(key) == 1:
            raise NetworkTopologyError(f"self-loop at bus {ln.from_bus}")
        if key in pairs:
            raise NetworkTopologyError(
                f"duplicate branch between buses {ln.from_bus} and {ln.to_bus}"
            )
        pairs.add(key)
        if ln.from_bus not in ids or ln.to_bus not in ids:
            raise NetworkTopologyError(f"branch {ln.from_bus}-{ln.to_bus} references an unknown bus")
        adj[ln.from_bus].append(k)
        adj[ln.to_bus].append(k)
    if len(lines) != len(buses) - 1:
        raise NetworkTopologyError(
            f"not radial: {len(lines)} branches for {len(buses)} buses"
        )
    parent_of: dict[int, int] = {1: 0}
    queue = deque([1])
    while queue:
        b = queue.popleft()
        for k in adj[b]:
            ln = lines[k]
            other = ln.to_bus if ln.from_bus == b else ln.from_bus
            if other in parent_of:
                if parent_of[b] != other:
                    raise NetworkTopologyError("not radial: the branch set contains a cycle")
                continue
            parent_of[other] = b
            queue.append(other)
    if len(parent_of) != len(ids):
        raise NetworkTopologyError("not radial: network is disconnected")
    oriented = []
    for ln in lines:
        child, par = (ln.from_bus, ln.to_bus) if parent_of.get(ln.from_bus) == ln.to_bus else (ln.to_bus, ln.from_bus)
        oriented.append(Line(child, par, ln.resistance_pu, ln.reactance_pu, ln.flow_limit_mw))
    return RadialNetwork(tuple(buses), tuple(oriented), base_mva, alpha)


# ---------------------------------------------------------------------------
# MATPOWER subset
# ---------------------------------------------------------------------------

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_OHM_TO_PU = re.compile(
    r"mpc\.branch\(\s*:\s*,\s*\[\s*BR_R\s*,?\s*BR_X\s*\]\s*\)\s*=\s*"
    r"mpc\.branch\(\s*:\s*,\s*\[\s*BR_R\s*,?\s*BR_X\s*\]\s*\)\s*/\s*"
    r"\(\s*Vbase\s*\^\s*2\s*/\s*Sbase\s*\)"
)


def _strip_comment(line: str) -> str:
    i = line.find("%")
    return line if i < 0 else line[:i]


def _matrix_block(lines: list[str], name: str) -> tuple[np.ndarray, int]:
    """Parse ``mpc.<name> = [ ... ];`` into a 2-D float array."""
    head = re.compile(rf"^\s*mpc\.{name}\s*=\s*\[(.*)$")
    start = None
    for i, raw in enumerate(lines):
        m = head.match(_strip_comment(raw))
        if m:
            start = i
            first = m.group(1)
            break
    if start is None:
        raise CaseFormatError(f"missing 'mpc.{name}' matrix")
    rows: list[list[float]] = []
    pending: list[float] = []
    body = [(start, first)] + [(i, _strip_comment(raw)) for i, raw in enumerate(lines[start + 1:], start + 1)]
    for lineno, text in body:
        text = _strip_comment(text)
        closed = "]" in text
        if closed:
            tail = text[text.index("]") + 1:].strip()
            if tail not in ("", ";"):
                raise CaseFormatError(f"unexpected text after matrix: {tail!r}", lineno + 1)
            text = text[: text.index("]")]
        for chunk_no, chunk in enumerate(text.split(";")):
            if chunk_no > 0 and pending:
                rows.append(pending)
                pending = []
            for tok in chunk.replace(",", " ").split():
                if not re.fullmatch(_NUM, tok):
                    if tok.lower() in ("inf", "-inf", "+inf"):
                        pending.append(float(tok))
                        continue
                    raise CaseFormatError(f"non-numeric token {tok!r} in mpc.{name}", lineno + 1)
                pending.append(float(tok))
        # a newline ends a row as well
        if pending:
            rows.append(pending)
            pending = []
        if closed:
            break
    else:
        raise CaseFormatError(f"unterminated mpc.{name} matrix", start + 1)
    if not rows:
        raise CaseFormatError(f"empty mpc.{name} matrix", start + 1)
    width = len(rows[0])
    for k, r in enumerate(rows):
        if len(r) != width:
            raise CaseFormatError(f"ragged row {k + 1} in mpc.{name}", start + 1)
    return np.array(rows, dtype=float), start + 1


def parse_matpower_case(text: str, power_factor: float = 1.0, u_base: float = 1.0) -> RadialNetwork:
    """Read baseMVA, bus ids/types and branch (fbus, tbus, r, x, rateA).

    Buses are renumbered 1..N in table order with the type-3 bus moved to 1.
    A trailing Ohm-to-p.u. conversion statement of the form
    ``mpc.branch(:, [BR_R BR_X]) = ... / (Vbase^2 / Sbase)`` is honoured,
    with ``Vbase`` taken from the first bus row's BASE_KV.
    """
    lines = text.splitlines()
    base = None
    for i, raw in enumerate(lines):
        m = re.match(rf"^\s*mpc\.baseMVA\s*=\s*({_NUM})\s*;?\s*$", _strip_comment(raw))
        if m:
            base = float(m.group(1))
            break
    if base is None:
        raise CaseFormatError("missing 'mpc.baseMVA'")
    bus_tab, bus_line = _matrix_block(lines, "bus")
    br_tab, br_line = _matrix_block(lines, "branch")
    if bus_tab.shape[1] < 2:
        raise CaseFormatError("bus table needs at least (bus_i, type)", bus_line)
    if br_tab.shape[1] < 4:
        raise CaseFormatError("branch table needs at least (fbus, tbus, r, x)", br_line)

    ext_ids = bus_tab[:, 0].astype(int)
    if len(set(ext_ids.tolist())) != ext_ids.size:
        raise CaseFormatError("duplicate bus ids", bus_line)
    refs = np.flatnonzero(bus_tab[:, 1].astype(int) == 3)
    if refs.size != 1:
        raise CaseFormatError(
            "no reference (type 3) bus" if refs.size == 0 else "more than one reference bus",
            bus_line,
        )
    order = [refs[0]] + [k for k in range(ext_ids.size) if k != refs[0]]
    new_id = {int(ext_ids[k]): i + 1 for i, k in enumerate(order)}

    r = br_tab[:, 2].copy()
    x = br_tab[:, 3].copy()
    if _OHM_TO_PU.search("\n".join(_strip_comment(s) for s in lines)):
        if bus_tab.shape[1] < 10:
            raise CaseFormatError("Ohm conversion requested but BASE_KV column missing", bus_line)
        vbase = bus_tab[0, 9] * 1e3
        zbase = vbase**2 / (base * 1e6)
        r /= zbase
        x /= zbase
    rate = br_tab[:, 5] if br_tab.shape[1] > 5 else np.zeros(br_tab.shape[0])

    branches = []
    for k in range(br_tab.shape[0]):
        f, t = int(br_tab[k, 0]), int(br_tab[k, 1])
        if f not in new_id or t not in new_id:
            raise CaseFormatError(f"branch {f}-{t} references an unknown bus", br_line + k + 1)
        lim = float(rate[k]) if rate[k] > 0 else None
        branches.append(Line(new_id[f], new_id[t], float(r[k]), float(x[k]), lim))
    buses = [Bus(i + 1, u_base) for i in range(ext_ids.size)]
    return orient_lines(buses, branches, base, alpha_from_power_factor(power_factor))


def load_matpower_case(path: str | Path, power_factor: float = 1.0) -> RadialNetwork:
    return parse_matpower_case(Path(path).read_text(encoding="utf-8"), power_factor=power_factor)


# ---------------------------------------------------------------------------
# sensitivities
# ---------------------------------------------------------------------------


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SensitivityBundle:
    shift_reduced: np.ndarray
    r_matrix: np.ndarray
    x_matrix: np.ndarray
    a_matrix: np.ndarray
    a_plus: np.ndarray
    a_minus: np.ndarray
    limit_lo: np.ndarray
    limit_hi: np.ndarray
    alpha: float = 0.0
    u_base: float = 1.0
    bus_ids: tuple[int, ...] = field(default_factory=tuple)
    line_labels: tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_inj(self) -> int:
        """Number of non-reference buses (columns of A)."""
        return self.shift_reduced.shape[1]

    @property
    def n_lines(self) -> int:
        return self.shift_reduced.shape[0]

    def row_label(self, j: int) -> str:
        if j < self.n_lines:
            return f"flow[{self.line_labels[j]}]"
        return f"voltage[bus {self.bus_ids[j - self.n_lines]}]"


def build_sensitivity(
    net: RadialNetwork,
    voltage_dev: float = 0.05,
    flow_limits=None,
    bounds_on: str = "u",
    require_flow_limits: bool = False,
) -> SensitivityBundle:
    """Assemble ``S``, ``R``, ``X``, ``A = A+ - A-`` and the limit vectors.

    ``bounds_on="u"`` applies ``1 +/- voltage_dev`` to the squared voltage;
    ``"v"`` applies it to the magnitude, giving ``(1 +/- dev)^2``.  Lines with
    no limit get an infinite flow bound unless ``require_flow_limits``.
    """
    if not 0.0 < voltage_dev < 1.0:
        raise ValueError(f"voltage_dev must lie in (0, 1), got {voltage_dev}")
    if bounds_on not in ("u", "v"):
        raise ValueError("bounds_on must be 'u' or 'v'")
    n = net.n_bus
    L = len(net.lines)
    S = np.zeros((L, n - 1))
    for j in range(2, n + 1):
        S[net.root_path(j), j - 2] = 1.0
    r = np.array([ln.resistance_pu for ln in net.lines]) / net.base_mva
    x = np.array([ln.reactance_pu for ln in net.lines]) / net.base_mva
    R = r[:, None] * S
    X = x[:, None] * S
    alpha = net.power_factor_alpha
    A = np.vstack([S, 2.0 * S.T @ (R + alpha * X)])

    if flow_limits is None:
        fmax = np.array([np.inf if ln.flow_limit_mw is None else ln.flow_limit_mw for ln in net.lines])
    else:
        fmax = np.asarray(flow_limits, dtype=float)
        if fmax.shape != (L,):
            raise ValueError(f"need {L} flow limits, got shape {fmax.shape}")
    if require_flow_limits and not np.all(np.isfinite(fmax)):
        missing = [net.lines[k].label for k in np.flatnonzero(~np.isfinite(fmax))]
        raise ValueError(f"missing flow limit on line(s) {', '.join(missing[:5])}")
    if np.any(fmax <= 0):
        raise ValueError("flow limits must be positive")

    ub = net.u_base
    hi_mult = 1.0 + voltage_dev
    lo_mult = 1.0 - voltage_dev
    if bounds_on == "v":
        hi_mult, lo_mult = hi_mult**2, lo_mult**2
    # every bus path ends at the reference bus, so the reference term is u_base * 1
    ref = np.ones(n - 1) * ub
    v_hi = hi_mult * ub - ref
    v_lo = lo_mult * ub - ref
    return SensitivityBundle(
        shift_reduced=_frozen(S),
        r_matrix=_frozen(R),
        x_matrix=_frozen(X),
        a_matrix=_frozen(A),
        a_plus=_frozen(np.maximum(A, 0.0)),
        a_minus=_frozen(np.maximum(-A, 0.0)),
        limit_lo=_frozen(np.concatenate([-fmax, v_lo])),
        limit_hi=_frozen(np.concatenate([fmax, v_hi])),
        alpha=alpha,
        u_base=ub,
        bus_ids=tuple(range(2, n + 1)),
        line_labels=tuple(ln.label for ln in net.lines),
    )


def evaluate_flow(bundle: SensitivityBundle, p, p0) -> tuple[np.ndarray, np.ndarray]:
    """Line flows (MW) and squared-voltage deviations for injections ``p + p0``."""
    p = np.asarray(p, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    n = bundle.n_inj
    if p.shape != (n,) or p0.shape != (n,):
        raise ValueError(f"expected injections of length {n}, got {p.shape} and {p0.shape}")
    w = bundle.a_matrix @ (p + p0)
    return w[: bundle.n_lines], w[bundle.n_lines:]


def squared_voltage(bundle: SensitivityBundle, u_dev) -> np.ndarray:
    return np.asarray(u_dev, dtype=float) + bundle.u_base


def worst_case_bounds(bundle_or_matrix, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Exact range of ``A p`` over the box ``lo <= p <= hi``.

    Accepts a :class:`SensitivityBundle` or a bare matrix.
    """
    if isinstance(bundle_or_matrix, SensitivityBundle):
        ap, am = bundle_or_matrix.a_plus, bundle_or_matrix.a_minus
    else:
        A = np.asarray(bundle_or_matrix, dtype=float)
        ap, am = np.maximum(A, 0.0), np.maximum(-A, 0.0)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != (ap.shape[1],) or hi.shape != lo.shape:
        raise ValueError(f"box bounds must have length {ap.shape[1]}")
    if np.any(lo > hi):
        k = int(np.flatnonzero(lo > hi)[0])
        raise ValueError(f"lo > hi at position {k}")
    return ap @ lo - am @ hi, ap @ hi - am @ lo
