"""Command-line front end: parse, bids, clear, verify, sweep and scenario.

Exit codes: 0 on success, 1 when an auction is infeasible or a certificate
fails, 2 on bad input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .auction import (
    AuctionInfeasibleError,
    AuctionInstance,
    DsoCost,
    allocation_from_dict,
    check_price_identity,
    clear,
    prices_csv,
    result_to_dict,
    verify_robust,
)
from .dera import KWH_PER_MW_HOUR, DeraBid, load_portfolio, make_bid, portfolio_to_dict
from .net_model import (
    CaseFormatError,
    NetworkTopologyError,
    RadialNetwork,
    build_sensitivity,
    load_matpower_case,
)
from .scenario import SWEEP_PARAMS, ScenarioConfig, build_scenario, load_case_text, run_scenario, sweep_config
from .solver import CyclingGuardError

log = logging.getLogger("dera_access")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
SWEEP_HEADER = ["value", "social_surplus", "dera_surplus", "dera_profit", "gap_pwl", "binding_rows"]


class InputError(Exception):
    pass


def _dump(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _load_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise InputError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def _load_network(path: str) -> RadialNetwork:
    data = _load_json(path)
    try:
        return RadialNetwork.from_dict(data)
    except (ValueError, NetworkTopologyError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _dso(text: str) -> DsoCost:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise InputError(f"--dso expects 'a,b', got {text!r}") from exc
    return DsoCost(a, b)


def _utility_range(path: str | None, bus_ids) -> tuple[np.ndarray, np.ndarray]:
    lo = np.zeros(len(bus_ids))
    hi = np.zeros(len(bus_ids))
    if path is None:
        return lo, hi
    pos = {b: i for i, b in enumerate(bus_ids)}
    for rec in _load_json(path).get("per_bus", []):
        bus = int(rec["bus"])
        if bus not in pos:
            raise InputError(f"{path}: bus {bus} is not a non-reference bus of the network")
        lo[pos[bus]] = float(rec["p0_lo"])
        hi[pos[bus]] = float(rec["p0_hi"])
    return lo, hi


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_parse(args) -> int:
    try:
        net = load_matpower_case(args.case, power_factor=args.power_factor)
    except FileNotFoundError as exc:
        raise InputError(f"{args.case}: no such file") from exc
    except (CaseFormatError, NetworkTopologyError) as exc:
        raise InputError(f"{args.case}: {exc}") from exc
    if args.out:
        net.save(args.out)
    n_lim = sum(ln.flow_limit_mw is not None for ln in net.lines)
    print(f"buses: {net.n_bus}")
    print(f"lines: {len(net.lines)} ({n_lim} with flow limits)")
    print("radial: yes")
    return EXIT_OK


def cmd_bids(args) -> int:
    net = _load_network(args.network)
    valid = set(range(2, net.n_bus + 1))
    kwh = KWH_PER_MW_HOUR * args.interval_hours
    out = []
    for path in args.dera:
        try:
            port = load_portfolio(path)
        except FileNotFoundError as exc:
            raise InputError(f"{path}: no such file") from exc
        except (ValueError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: {exc}") from exc
        stray = sorted(set(port.buses) - valid)
        if stray:
            raise InputError(f"{path}: buses {stray[:5]} are not non-reference buses of the network")
        bid = make_bid(port, args.segments, kwh)
        out.append(bid.to_dict())
        print(f"{bid.dera_id}: {len(bid.curves)} curves, constant {bid.constant:.6f} $")
    _dump(args.out, {"interval_hours": args.interval_hours, "bids": out})
    return EXIT_OK


def _instance_from_args(args) -> tuple[AuctionInstance, RadialNetwork]:
    net = _load_network(args.network)
    bundle = build_sensitivity(net, args.voltage_dev, bounds_on=args.bounds_on)
    raw = _load_json(args.bids)
    try:
        bids = [DeraBid.from_dict(b) for b in raw.get("bids", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.bids}: {exc}") from exc
    lo, hi = _utility_range(args.utility_range, bundle.bus_ids)
    try:
        inst = AuctionInstance(bundle, bids, lo, hi, _dso(args.dso), args.j_segments)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return inst, net


def cmd_clear(args) -> int:
    inst, _ = _instance_from_args(args)
    try:
        result = clear(inst)
    except AuctionInfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        if exc.blocks:
            print(f"constraint blocks: {', '.join(exc.blocks)}", file=sys.stderr)
        return EXIT_FAIL
    cert = verify_robust(result, inst.bundle, n_samples=args.samples, seed=args.seed)
    ident = check_price_identity(result, inst.bundle, inst.dso_cost)
    meta = {
        "voltage_dev": args.voltage_dev,
        "bounds_on": args.bounds_on,
        "dso": [inst.dso_cost.a_coeff, inst.dso_cost.b_coeff],
        "j_segments": args.j_segments,
        "price_identity": {
            "residual_hi": ident.residual_hi,
            "residual_lo": ident.residual_lo,
            "tolerance": ident.tolerance,
        },
    }
    doc = result_to_dict(result, cert, meta)
    _dump(args.out, doc)
    csv_path = Path(args.csv) if args.csv else Path(args.out).with_suffix(".csv")
    csv_path.write_text(prices_csv(result), encoding="utf-8")
    kkt_path = csv_path.with_name(csv_path.stem + "_kkt.csv")
    kkt_path.write_text(
        "stationarity,feasibility,complementarity,duality_gap\n"
        f"{result.residuals.stationarity!r},{result.residuals.feasibility!r},"
        f"{result.residuals.complementarity!r},{result.duality_gap!r}\n",
        encoding="utf-8",
    )
    print(f"social surplus: {result.social_surplus:.6f} $ (linearization gap {result.gap_pwl:.2e})")
    print(f"kkt residual max: {result.residuals.max():.2e}")
    print(f"robust certificate: {'pass' if cert.ok else 'FAIL'} (margin {cert.exact_margin:.3e})")
    return EXIT_OK if cert.ok else EXIT_FAIL


def cmd_verify(args) -> int:
    doc = _load_json(args.result)
    meta = doc.get("meta", {})
    net = _load_network(args.network)
    dev = args.voltage_dev if args.voltage_dev is not None else float(meta.get("voltage_dev", 0.05))
    on = args.bounds_on if args.bounds_on is not None else str(meta.get("bounds_on", "u"))
    bundle = build_sensitivity(net, dev, bounds_on=on)
    try:
        alloc = allocation_from_dict(doc)
    except ValueError as exc:
        raise InputError(f"{args.result}: {exc}") from exc
    if tuple(alloc.bus_ids) != tuple(bundle.bus_ids):
        raise InputError("result buses do not match the network")
    cert = verify_robust(alloc, bundle, n_samples=args.samples, seed=args.seed)
    print(json.dumps(cert.to_dict(), indent=2))
    return EXIT_OK if cert.ok else EXIT_FAIL


def _scenario_cfg(args) -> ScenarioConfig:
    kw = {"seed": args.seed, "interval_hours": args.interval_hours}
    if getattr(args, "households", None) is not None:
        kw["households_per_group"] = args.households
    if getattr(args, "dera_ratio", None) is not None:
        kw["dera_ratio"] = args.dera_ratio
    return ScenarioConfig().replace(**kw)


def cmd_sweep(args) -> int:
    cfg = _scenario_cfg(args)
    case = load_case_text(args.case)
    rows = []
    for v in args.values:
        try:
            out = run_scenario(sweep_config(cfg, args.param, v), case)
        except AuctionInfeasibleError as exc:
            print(f"{args.param}={v}: infeasible: {exc}", file=sys.stderr)
            return EXIT_FAIL
        r = out.result
        n_bind = int((r.duals.mu_hi > 1e-9).sum() + (r.duals.mu_lo > 1e-9).sum())
        rows.append([v, r.social_surplus, out.dera_surplus, out.dera_profit, r.gap_pwl, n_bind])
        print(f"{args.param}={v}: social {r.social_surplus:.6f} $, DERA {out.dera_surplus:.6f} $")
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"# sweep/1 param={args.param}"])
        w.writerow(SWEEP_HEADER)
        for row in rows:
            w.writerow([repr(float(row[0]))] + [repr(float(x)) for x in row[1:5]] + [row[5]])
    return EXIT_OK


def cmd_scenario(args) -> int:
    """Write the 141-bus experiment inputs so the other subcommands can run on them."""
    cfg = _scenario_cfg(args)
    data = build_scenario(cfg, load_case_text(args.case))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data.network.save(out / "network.json")
    for port in data.portfolios:
        _dump(out / f"{port.id.lower()}.json", portfolio_to_dict(port))
    _dump(
        out / "utility_range.json",
        {
            "per_bus": [
                {"bus": b, "p0_lo": float(lo), "p0_hi": float(hi)}
                for b, lo, hi in zip(data.bundle.bus_ids, data.utility_lo, data.utility_hi)
            ]
        },
    )
    print(f"wrote network, {len(data.portfolios)} DERA configs and utility range to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dera-access", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("parse", help="convert a MATPOWER case to network JSON")
    sp.add_argument("--case", required=True)
    sp.add_argument("--out")
    sp.add_argument("--power-factor", type=float, default=0.98)
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("bids", help="build bid curves from DERA configs")
    sp.add_argument("--network", required=True)
    sp.add_argument("--dera", nargs="+", required=True)
    sp.add_argument("--segments", type=int, default=10)
    sp.add_argument("--interval-hours", type=float, default=1.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bids)

    sp = sub.add_parser("clear", help="clear the access auction")
    sp.add_argument("--network", required=True)
    sp.add_argument("--bids", required=True)
    sp.add_argument("--dso", default="-0.096,0.2", help="cost coefficients 'a,b'")
    sp.add_argument("--utility-range")
    sp.add_argument("--voltage-dev", type=float, default=0.05)
    sp.add_argument("--bounds-on", choices=("u", "v"), default="u")
    sp.add_argument("--j-segments", type=int, default=20)
    sp.add_argument("--samples", type=int, default=10_000)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_clear)

    sp = sub.add_parser("verify", help="re-certify a cleared result")
    sp.add_argument("--result", required=True)
    sp.add_argument("--network", required=True)
    sp.add_argument("--samples", type=int, default=10_000)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--voltage-dev", type=float)
    sp.add_argument("--bounds-on", choices=("u", "v"))
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("sweep", help="clear the 141-bus experiment over a parameter range")
    sp.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    sp.add_argument("--values", type=float, nargs="+", required=True)
    sp.add_argument("--case", help="MATPOWER case (defaults to the bundled case141)")
    sp.add_argument("--households", type=float)
    sp.add_argument("--dera-ratio", type=float)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--interval-hours", type=float, default=1.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("scenario", help="write the 141-bus experiment input files")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--case")
    sp.add_argument("--households", type=float)
    sp.add_argument("--dera-ratio", type=float)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--interval-hours", type=float, default=1.0)
    sp.set_defaults(func=cmd_scenario)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CyclingGuardError as exc:
        print(f"internal solver fault: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
