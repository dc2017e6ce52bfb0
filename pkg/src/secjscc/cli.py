"""Command-line front end.

Exit codes: 0 success, 1 malformed input or arguments, 2 infeasible
constraints, 3 solver iteration limit, 4 resource cap exceeded.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import ArgumentError, ResourceError, SecJsccError, ValidationError
from .lattice import (SourceModel, build_lattice, load_source_model, parents, parse_subset_label,
                      source_model_from_dict, subset_label)
from .rdpf import (RdpfProblem, SolverConfig, Status, curve_to_csv, rdpf_curve, solve_rdpf)
from .region import (RateAllocation, RegionConfig, SystemTuple, achievability_check,
                     allocation_inputs, converse_check, feasible_rate_allocation, LayerRates,
                     source_rate_table)
from .simulator import LayeredTestChannels, SimulationConfig, run_trials
from .wiretap import (LayeredAuxiliary, WiretapChannel, channel_capacity, load_auxiliary,
                      load_channel, secrecy_oracle_grid, secrecy_term)

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_ITERLIMIT, EXIT_RESOURCE = 0, 1, 2, 3, 4
MANIFEST_SCHEMA = 1


class _Run:
    """Collects what the manifest needs while a command runs."""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.argv = list(argv)
        self.inputs: Dict[str, str] = {}
        self.started = datetime.now(timezone.utc)
        self.t0 = time.perf_counter()

    def read(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"input file not found: {p}")
        self.inputs[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()
        return p

    def manifest_core(self) -> dict:
        cfg = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func", "quiet")}
        return {"schema": MANIFEST_SCHEMA, "tool": "secjscc", "version": __version__,
                "command": self.args.command, "argv": self.argv,
                "inputs": dict(sorted(self.inputs.items())), "config": cfg,
                "seed": getattr(self.args, "seed", None)}

    def emit(self, payload: dict, extra_files: Optional[Dict[str, str]] = None) -> None:
        """Write the JSON result (stdout or --out) plus a timing sidecar for files."""
        out = self.args.out
        core = self.manifest_core()
        if out:
            core["sidecar"] = Path(out).name + ".manifest.json"
        doc = dict(payload)
        doc["manifest"] = core
        text = json.dumps(_jsonable(doc), indent=2, sort_keys=False) + "\n"
        if out:
            _atomic_write(out, text)
            for path, content in (extra_files or {}).items():
                _atomic_write(path, content)
            side = dict(core)
            side.pop("sidecar", None)
            side["outputs"] = [str(out)] + sorted(extra_files or {})
            side["started"] = self.started.isoformat()
            side["finished"] = datetime.now(timezone.utc).isoformat()
            side["wall_time_s"] = time.perf_counter() - self.t0
            _atomic_write(str(out) + ".manifest.json", json.dumps(_jsonable(side), indent=2) + "\n")
        else:
            for path, content in (extra_files or {}).items():
                _atomic_write(path, content)
            if not self.args.quiet:
                sys.stdout.write(text)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _num(v) -> str:
    """Shortest round-trip text for a float, with -0.0 folded to 0.0."""
    return repr(float(v) + 0.0)


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_json(run: _Run, path) -> dict:
    p = run.read(path)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _per_modality(text: Optional[str], m: int) -> Dict[int, float]:
    """'0.1' applies to every modality; '1=0.1,2=0.2' sets them one by one."""
    if text is None:
        return {}
    text = text.strip()
    try:
        if "=" not in text:
            return {i: float(text) for i in range(1, m + 1)}
        out = {}
        for part in text.split(","):
            k, v = part.split("=")
            out[int(k)] = float(v)
        return out
    except ValueError as exc:
        raise ArgumentError(f"cannot parse per-modality value {text!r}") from exc


def _grid(spec: str) -> np.ndarray:
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError as exc:
        raise ArgumentError(f"grid must look like start:stop:step, got {spec!r}") from exc
    if step <= 0 or stop < start:
        raise ArgumentError(f"bad grid {spec!r}")
    count = int(round((stop - start) / step)) + 1
    return np.round(start + step * np.arange(count), 12)


def _solver_cfg(args) -> SolverConfig:
    return SolverConfig(tolerance=args.tol) if args.tol is not None else SolverConfig()


# --------------------------------------------------------------------------
# commands


def cmd_rdpf(args, run: _Run) -> int:
    model = source_model_from_dict(_load_json(run, args.source))
    m = model.source.m
    active = None
    if args.active:
        active = parse_subset_label(args.active)
    prob = RdpfProblem.from_model(model, active)
    d = _per_modality(args.D, m)
    p = _per_modality(args.P, m)
    prob = prob.with_thresholds(D=d or None, P=p or None)
    cfg = _solver_cfg(args)
    if args.curve:
        name, _, spec = args.curve.partition("=")
        if name.strip().upper() != "D" or not spec:
            raise ArgumentError("--curve expects D=start:stop:step")
        points = rdpf_curve(prob, list(_grid(spec)), cfg)
        text = curve_to_csv(points, m)
        csv_path = args.csv or (str(args.out) + ".csv" if args.out else None)
        payload = {"command": "rdpf", "curve": [vars(pt) for pt in points]}
        if csv_path:
            run.emit(payload, {csv_path: text})
        else:
            if not args.quiet:
                sys.stdout.write(text)
            if args.out:
                run.emit(payload)
        statuses = {pt.status for pt in points}
        if any(s.startswith("Error") for s in statuses):
            return EXIT_INPUT
        if Status.INFEASIBLE.value in statuses:
            return EXIT_INFEASIBLE
        if Status.ITER_LIMIT.value in statuses:
            return EXIT_ITERLIMIT
        return EXIT_OK
    sol = solve_rdpf(prob, cfg)
    run.emit({"command": "rdpf", "active": sorted(prob.active), "solution": sol.to_dict()})
    return {Status.CONVERGED: EXIT_OK, Status.INFEASIBLE: EXIT_INFEASIBLE,
            Status.ITER_LIMIT: EXIT_ITERLIMIT}[sol.status]


def _channel(run: _Run, path) -> WiretapChannel:
    return WiretapChannel.from_dict(_load_json(run, path))


def cmd_capacity(args, run: _Run) -> int:
    ch = _channel(run, args.channel)
    res = channel_capacity(ch, tol=args.tol if args.tol is not None else 1e-6)
    run.emit({"command": "capacity", "capacity": res.value, "upper_bound": res.upper_bound,
              "input_pmf": res.input_pmf, "status": res.status.value, "iterations": res.iterations})
    return EXIT_OK if res.status.value == "Converged" else EXIT_ITERLIMIT


def cmd_secrecy(args, run: _Run) -> int:
    ch = _channel(run, args.channel)
    sol = secrecy_term(ch, args.w_size, seed=args.seed, restarts=args.restarts)
    payload = {"command": "secrecy", "value": sol.value, "p_w": sol.p_w,
               "p_x_given_w": sol.p_x_given_w, "restarts_used": sol.restarts_used}
    if args.oracle:
        o = secrecy_oracle_grid(ch, 1.0 / args.oracle)
        payload["oracle"] = {"resolution": 1.0 / args.oracle, "lower": o.lower, "upper": o.upper}
        payload["oracle_gap"] = o.lower - sol.value
    run.emit(payload)
    return EXIT_OK


def cmd_region(args, run: _Run) -> int:
    model = source_model_from_dict(_load_json(run, args.source))
    ch = _channel(run, args.channel)
    tup = SystemTuple.from_dict(_load_json(run, args.tuple))
    cfg = RegionConfig(solver=_solver_cfg(args), seed=args.seed)
    sides = ["converse", "achievable"] if args.side == "both" else [args.side]
    aux = None
    if "achievable" in sides:
        if not args.aux:
            raise ArgumentError("the achievable side needs --aux")
        aux = LayeredAuxiliary.from_dict(_load_json(run, args.aux), model.source.m)
    reports = []
    for side in sides:
        if side == "converse":
            reports.append(converse_check(model, ch, tup, cfg))
        else:
            reports.append(achievability_check(model, ch, aux, tup, cfg))
    payload = {"command": "region", "tuple": tup.to_dict(),
               "reports": [r.to_dict() for r in reports],
               "overall": all(r.overall for r in reports)}
    extra = {}
    if args.sweep:
        extra_csv = _region_sweep(args.sweep, reports)
        path = args.csv or (str(args.out) + ".csv" if args.out else None)
        if path is None:
            raise ArgumentError("--sweep needs --csv or --out")
        extra[path] = extra_csv
    run.emit(payload, extra)
    if any(e.status == "Infeasible" for r in reports for e in r.entries):
        return EXIT_INFEASIBLE
    if any(e.status == "Unverified" for r in reports for e in r.entries):
        return EXIT_ITERLIMIT
    return EXIT_OK


def _region_sweep(spec: Sequence[str], reports) -> str:
    """Vary Delta_A over a grid; the bounds themselves do not depend on Delta."""
    if len(spec) != 2 or spec[0] != "delta":
        raise ArgumentError("--sweep expects: delta A=start:stop:step")
    label, _, grid = spec[1].partition("=")
    a = parse_subset_label(label)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["delta", "side", "subset", "bound_value", "slack", "satisfied"])
    for v in _grid(grid):
        for rep in reports:
            e = rep.entry(a, "equivocation")
            slack = e.bound_value - v
            w.writerow([_num(v), rep.side, subset_label(a), _num(e.bound_value), _num(slack),
                        int(slack >= -1e-9 and e.status != "Infeasible")])
    return buf.getvalue()


def _resolve(base: Path, run: _Run, value, loader):
    if isinstance(value, str):
        p = Path(value)
        if not p.is_absolute():
            p = base / p
        return loader(_load_json(run, p))
    return loader(value)


def _subset_map(d) -> Dict[frozenset, float]:
    return {parse_subset_label(k): float(v) for k, v in (d or {}).items()}


def cmd_simulate(args, run: _Run) -> int:
    cfg_path = Path(args.config)
    conf = _load_json(run, cfg_path)
    base = cfg_path.parent
    for key in ("source", "channel", "test_channels", "aux"):
        if key not in conf:
            raise ValidationError(f"missing field '{key}'")
    model: SourceModel = _resolve(base, run, conf["source"], source_model_from_dict)
    ch: WiretapChannel = _resolve(base, run, conf["channel"], WiretapChannel.from_dict)
    m = model.source.m
    aux = _resolve(base, run, conf["aux"], lambda d: LayeredAuxiliary.from_dict(d, m))
    tcd = conf["test_channels"]
    tc = LayeredTestChannels(
        model.source,
        {parse_subset_label(k): np.asarray(v) for k, v in _field(tcd, "psi").items()},
        {int(k): np.asarray(v) for k, v in _field(tcd, "recon").items()},
        aux,
        {parse_subset_label(k): int(v) for k, v in (tcd.get("t_sizes") or {}).items()})
    rates = _sim_rates(conf, model, ch, aux)
    k = args.k if args.k is not None else int(_field(conf, "k"))
    if args.n is not None:
        n = args.n
    elif "n" in conf:
        n = int(conf["n"])
    else:
        n = int(round(float(_field(conf, "r")) * k))
    sc = SimulationConfig(
        k=k, n=n,
        trials=args.trials if args.trials is not None else int(conf.get("trials", 1000)),
        seed=args.seed if args.seed is not None else int(conf.get("seed", 0)),
        eps=args.eps if args.eps is not None else float(conf.get("eps", 0.15)),
        codebook_refresh=int(conf.get("codebook_refresh", 64)))
    rep = run_trials(tc, ch, model.distortion.matrices, rates, sc, keep_per_trial=bool(args.per_trial))
    extra = {}
    if args.per_trial:
        buf = io.StringIO()
        cols = list(rep.per_trial[0].keys()) if rep.per_trial else ["trial"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rep.per_trial:
            w.writerow({c: (_num(v) if isinstance(v, float) else v) for c, v in row.items()})
        extra[args.per_trial] = buf.getvalue()
    run.args.seed = sc.seed
    run.emit({"command": "simulate", "report": rep.to_dict(),
              "rates": rates.to_dict()}, extra)
    return EXIT_OK


def _field(obj, key):
    if key not in obj:
        raise ValidationError(f"missing field '{key}'")
    return obj[key]


def _sim_rates(conf, model, ch, aux) -> RateAllocation:
    if "rates" in conf:
        layers = {}
        for label, v in conf["rates"].items():
            layers[parse_subset_label(label)] = LayerRates(
                r0=float(v.get("r0", 0)), r1=float(v.get("r1", 0)), rp0=float(v.get("rp0", 0)),
                rp1=float(v.get("rp1", 0)), r_decoy=float(v.get("r_decoy", 0)),
                r_kappa=float(v.get("r1", 0)))
        return RateAllocation(layers, True)
    alloc_conf = _field(conf, "allocation")
    per_layer, _ = allocation_inputs(aux, ch)
    src = _subset_map(alloc_conf.get("source_rates"))
    alloc = feasible_rate_allocation(src, per_layer, float(_field(alloc_conf, "r")),
                                     _subset_map(alloc_conf.get("key_rates")),
                                     eps=float(alloc_conf.get("eps", 0.0)))
    if not alloc.feasible:
        raise ArgumentError(f"rate allocation infeasible: {alloc.violated}")
    return alloc


def cmd_lattice(args, run: _Run) -> int:
    lat = build_lattice(args.m)
    layers = [{"subset": subset_label(a), "position": i,
               "parents": [subset_label(b) for b in parents(a)]} for i, a in enumerate(lat)]
    run.emit({"command": "lattice", "m": args.m, "order": layers})
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master RNG seed")
    common.add_argument("--tol", type=float, default=None, help="solver tolerance (bits)")
    common.add_argument("--out", default=None, help="write the JSON result here")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")

    p = argparse.ArgumentParser(prog="secjscc", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"secjscc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("rdpf", parents=[common], help="rate-distortion-perception function")
    s.add_argument("source")
    s.add_argument("--D", help="distortion thresholds: '0.1' or '1=0.1,2=0.2'")
    s.add_argument("--P", help="perception thresholds, same syntax")
    s.add_argument("--active", help="subset of modalities to constrain, e.g. '1,2'")
    s.add_argument("--curve", help="sweep D=start:stop:step (same D for every modality)")
    s.add_argument("--csv", help="curve CSV path")
    s.set_defaults(func=cmd_rdpf)

    s = sub.add_parser("capacity", parents=[common], help="capacity of the legitimate link")
    s.add_argument("channel")
    s.set_defaults(func=cmd_capacity)

    s = sub.add_parser("secrecy", parents=[common], help="max I(W;Y) - I(W;Z)")
    s.add_argument("channel")
    s.add_argument("--w-size", type=int, default=None)
    s.add_argument("--restarts", type=int, default=64)
    s.add_argument("--oracle", type=int, default=None, metavar="N",
                   help="also run the grid oracle at resolution 1/N")
    s.set_defaults(func=cmd_secrecy)

    s = sub.add_parser("region", parents=[common], help="check an operating tuple")
    s.add_argument("source")
    s.add_argument("channel")
    s.add_argument("tuple")
    s.add_argument("--aux", help="layered auxiliary JSON (needed for the achievable side)")
    s.add_argument("--side", choices=["converse", "achievable", "both"], default="converse")
    s.add_argument("--sweep", nargs=2, metavar=("delta", "A=start:stop:step"))
    s.add_argument("--csv", help="sweep CSV path")
    s.set_defaults(func=cmd_region)

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo run of the layered scheme")
    s.add_argument("config")
    s.add_argument("--trials", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--eps", type=float)
    s.add_argument("--per-trial", help="per-trial CSV path")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("lattice", parents=[common], help="print the subset lattice")
    s.add_argument("m", type=int)
    s.set_defaults(func=cmd_lattice)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    if args.command != "simulate" and args.seed is None:
        args.seed = 0
    run = _Run(args, argv)
    try:
        return args.func(args, run)
    except ResourceError as exc:
        extra = f" (required {exc.required}, cap {exc.cap}; raise SECJSCC_MAX_ENTRIES to allow)" \
            if exc.required is not None else ""
        sys.stderr.write(f"error: {exc}{extra}\n")
        return EXIT_RESOURCE
    except (SecJsccError, ValueError, KeyError, TypeError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
