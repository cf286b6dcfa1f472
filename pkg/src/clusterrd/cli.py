"""Command-line front end: ``analyze`` a CSV or ``simulate`` a design."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

from .core import validate_sample
from .errors import (
    AllReplicationsFailed,
    ClusterRDError,
    EmptyInput,
    InvalidConfig,
    NonFiniteValue,
    SchemaError,
)
from .report import SE_METHODS, analyze_sample, auto_bandwidth, dumps, plot_bins
from .simlab import DgpConfig, aggregate, run_replications

EXIT_SCHEMA = 2
EXIT_ESTIMATION = 3
EXIT_ALL_FAILED = 4

RUN_FIELDS = {"reps": 100, "h": 0.5, "se_methods": list(SE_METHODS), "kernel": "triangular",
              "J": 3, "R": None, "M": None}


class _UsageError(Exception):
    pass


def read_csv(path: str | Path) -> list[tuple[str, str, str]]:
    """Rows of a ``cluster,x,y`` CSV (extra columns ignored)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = [c.strip() for c in (reader.fieldnames or [])]
            missing = [c for c in ("cluster", "x", "y") if c not in header]
            if missing:
                raise SchemaError(f"missing column(s): {', '.join(missing)}")
            reader.fieldnames = header
            return [(r["cluster"], r["x"], r["y"]) for r in reader]
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc


def _parse_scalar(v: str) -> Any:
    try:
        return json.loads(v)
    except json.JSONDecodeError:
        return v.strip()


def load_config(path: str | Path) -> dict[str, Any]:
    """JSON object, or ``key = value`` lines (``#`` starts a comment)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"invalid JSON config: {exc}") from exc
        if not isinstance(cfg, dict):
            raise InvalidConfig("config must be a JSON object")
        return cfg
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg[key] = _parse_scalar(value)
    return cfg


def split_config(raw: dict[str, Any]) -> tuple[DgpConfig, dict[str, Any]]:
    run = dict(RUN_FIELDS)
    design = {}
    for k, v in raw.items():
        (run if k in RUN_FIELDS else design)[k] = v
    if isinstance(run["se_methods"], str):
        run["se_methods"] = [m.strip() for m in run["se_methods"].split(",") if m.strip()]
    try:
        cfg = DgpConfig.from_dict(design)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc
    if not isinstance(run["reps"], int) or run["reps"] < 1:
        raise InvalidConfig("reps must be a positive integer")
    return cfg, run


def _error(exc: BaseException, code: int) -> int:
    payload: dict[str, Any] = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("side", "row", "g", "i", "d"):
        if hasattr(exc, attr):
            payload[attr] = getattr(exc, attr)
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def _methods(values: list[str] | None) -> list[str]:
    if not values:
        return list(SE_METHODS)
    out = [m.strip() for v in values for m in v.split(",") if m.strip()]
    bad = sorted(set(out) - set(SE_METHODS))
    if bad:
        raise _UsageError(f"unknown --se-method value(s): {', '.join(bad)}")
    return out


def cmd_analyze(args: argparse.Namespace) -> int:
    try:
        methods = _methods(args.se_method)
        if (args.bandwidth is None) == (not args.auto_bandwidth):
            raise _UsageError("give exactly one of --bandwidth or --auto-bandwidth")
        if args.bandwidth is not None and not (math.isfinite(args.bandwidth) and args.bandwidth > 0):
            raise _UsageError("--bandwidth must be positive")
        sample = validate_sample(read_csv(args.csv), args.cutoff)
    except (_UsageError, SchemaError, EmptyInput, NonFiniteValue, InvalidConfig) as exc:
        return _error(exc, EXIT_SCHEMA)

    R = 12 * args.J if args.R is None else args.R
    try:
        selection = None
        h = args.bandwidth
        if args.auto_bandwidth:
            selection = auto_bandwidth(sample, args.kernel, args.M, args.J, R, args.seed)
            h = selection["h"]
        report, plan = analyze_sample(sample, h, args.kernel, methods, J=args.J, R=R, M=args.M,
                                      seed=args.seed, keep_plan=True)
        report.bandwidth_selection = selection
    except ClusterRDError as exc:
        return _error(exc, EXIT_ESTIMATION)

    if args.dump_plan:
        if plan is None:
            return _error(_UsageError("--dump-plan requires the cnn method"), EXIT_SCHEMA)
        Path(args.dump_plan).write_text(dumps(plan.to_dict(sample)) + "\n", encoding="utf-8")
    if args.plot_data:
        _write_rows(args.plot_data, plot_bins(sample, h, args.bins),
                    ["side", "bin_left", "bin_right", "mean_y", "count"])
    sys.stdout.write(dumps(report.to_dict()) + "\n")
    return 0


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return format(v, ".17g") if math.isfinite(v) else ""
    return "" if v is None else str(v)


def _write_rows(path: str, rows: list[dict[str, Any]], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _trace_rows(recs: list[dict[str, Any]], methods: Sequence[str]) -> list[dict[str, Any]]:
    rows = []
    for r in recs:
        row = {"replication": r["replication"], "failed": r.get("failed", "")}
        if "failed" not in r:
            row.update(h=r["h"], tau_hat=r["tau_hat"], oracle_se=math.sqrt(max(r["oracle_se2"], 0.0)),
                       bias_bound=r["bias_bound"])
            for m in methods:
                row[f"se_{m}"] = math.sqrt(max(r["se2"][m], 0.0))
        rows.append(row)
    return rows


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        cfg, run = split_config(load_config(args.config))
        if args.threads < 1:
            raise _UsageError("--threads must be at least 1")
    except (_UsageError, InvalidConfig) as exc:
        return _error(exc, EXIT_SCHEMA)
    methods = run["se_methods"]
    try:
        recs = run_replications(cfg, run["h"], methods, run["reps"], run["J"], run["R"], run["kernel"],
                                run["M"], args.threads)
        report = aggregate(recs, cfg, methods)
    except AllReplicationsFailed as exc:
        return _error(exc, EXIT_ALL_FAILED)
    except InvalidConfig as exc:
        return _error(exc, EXIT_SCHEMA)
    except ClusterRDError as exc:
        return _error(exc, EXIT_ESTIMATION)
    if args.trace:
        cols = ["replication", "failed", "h", "tau_hat", "oracle_se", "bias_bound"] + [f"se_{m}" for m in methods]
        _write_rows(args.trace, _trace_rows(recs, methods), cols)
    out = report.to_dict()
    out["run"] = {k: run[k] for k in sorted(run)}
    sys.stdout.write(dumps(out) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clusterrd", description="Sharp RD estimation with cluster-robust inference.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate the jump and its standard errors from a cluster,x,y CSV")
    a.add_argument("csv")
    a.add_argument("--cutoff", type=float, default=0.0)
    a.add_argument("--bandwidth", type=float)
    a.add_argument("--auto-bandwidth", action="store_true", help="plug-in AMSE-optimal bandwidth (needs --M > 0)")
    a.add_argument("--kernel", choices=["uniform", "triangular", "epanechnikov"], default="triangular")
    a.add_argument("--J", type=int, default=3, help="neighbours per set")
    a.add_argument("--R", type=int, default=None, help="companion reuse cap (default 12*J)")
    a.add_argument("--M", type=float, default=0.0, help="curvature bound; 0 omits the bias bound")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--se-method", action="append", help="subset of " + ",".join(SE_METHODS) + " (repeatable)")
    a.add_argument("--dump-plan", metavar="PATH")
    a.add_argument("--plot-data", metavar="PATH")
    a.add_argument("--bins", type=int, default=20)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a config file")
    s.add_argument("config")
    s.add_argument("--trace", metavar="PATH", help="per-replication CSV")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
