"""``ddsim`` command line: run scenarios and compare their summaries.

Exit codes: 0 success, 2 invalid input (scenario, overrides, missing
summary), 3 numerical failure during a run.

Log verbosity follows the ``DDSIM_LOG`` environment variable (a logging
level name such as DEBUG or WARNING; default WARNING).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import InsufficientDataError, ModelError, ParameterError, ScenarioError, SimulationError
from .model import MODES
from .scenario import (BUILTINS, builtin, load_scenario, scenario_from_dict, scenario_to_dict,
                       summarize)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

# bump when a column is added, renamed or reordered
CSV_SCHEMA_VERSION = 1

DD_KEYS = ("M", "D", "R", "K_p", "db", "dt_eval", "pf_angle", "base")
RUN_KEYS = ("dd_count", "mode", "t_end", "seed", "epsilon")
OVERRIDE_KEYS = DD_KEYS + RUN_KEYS

COMPARE_METRICS = ("freq_nadir", "freq_zenith", "zenith_dev", "nadir_dev", "max_rocof", "settle_time",
                   "max_imbalance", "switch_count")

log = logging.getLogger("discrete_inertia.cli")


class UsageError(Exception):
    """Bad command-line input; maps to exit code 2."""


def _setup_logging():
    level = os.environ.get("DDSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def parse_overrides(pairs) -> dict:
    """``key=value`` strings to a dict; values are parsed as YAML scalars."""
    out = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if key not in OVERRIDE_KEYS:
            raise UsageError(f"unknown override key {key!r}; known keys: {', '.join(OVERRIDE_KEYS)}")
        try:
            out[key] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse value for {key}: {exc}") from None
    return out


def _rescale_counts(fleet: list, total: int):
    """Spread ``total`` devices over the fleet entries in proportion to their counts."""
    if total < 0:
        raise UsageError("dd_count must be nonnegative")
    weights = np.array([float(e["count"]) for e in fleet])
    if not len(fleet):
        if total:
            raise UsageError("scenario has no fleet entries to scale")
        return
    if weights.sum() == 0:
        weights[:] = 1.0
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[k] += 1
    for e, c in zip(fleet, counts):
        e["count"] = int(c)


def build_scenario(args, overrides: dict):
    """Scenario for one run from the parsed flags and ``--set`` overrides."""
    ov = dict(overrides)
    for flag in ("dd_count", "mode", "t_end"):
        val = getattr(args, flag, None)
        if val is not None:
            if flag in ov and ov[flag] != val:
                raise UsageError(f"--{flag.replace('_', '-')} {val} conflicts with --set {flag}={ov[flag]}")
            ov[flag] = val
    if "mode" in ov and ov["mode"] not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    if args.builtin:
        kw = {}
        if "dd_count" in ov:
            kw["dd_count"] = int(ov.pop("dd_count"))
        dd = {k: ov.pop(k) for k in DD_KEYS if k in ov}
        if dd:
            kw["dd_params"] = dd
        name = args.builtin
        if "mode" in ov:
            mode = ov.pop("mode")
            name = next(n for n, m in BUILTINS.items() if m == mode)
        try:
            doc = scenario_to_dict(builtin(name, **kw))
        except (ParameterError, TypeError) as exc:
            raise UsageError(str(exc)) from None
    else:
        try:
            with open(args.scenario) as fh:
                doc = yaml.safe_load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read scenario: {exc}") from None
        except yaml.YAMLError:
            load_scenario(args.scenario)  # re-raise with line and column
        if not isinstance(doc, dict):
            raise ScenarioError(["top level must be a mapping"])
        doc = copy.deepcopy(doc)
        if "dd_count" in ov:
            _rescale_counts(doc.get("fleet") or [], int(ov.pop("dd_count")))
        if "mode" in ov:
            doc.setdefault("system", {})["mode"] = ov.pop("mode")
        for e in doc.get("fleet") or []:
            for k in DD_KEYS:
                if k in ov:
                    e.setdefault("params", {})[k] = ov[k]
        for k in DD_KEYS:
            ov.pop(k, None)
    run = doc.setdefault("run", {})
    for k in ("t_end", "seed", "epsilon"):
        if k in ov:
            run[k] = ov.pop(k)
    return scenario_from_dict(doc)


def _digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def execute(sc, out: Path, argv_meta: dict) -> int:
    """Run one scenario and write its files into ``out``; returns the exit code."""
    out.mkdir(parents=True, exist_ok=True)
    doc = scenario_to_dict(sc)
    with open(out / "scenario.yaml", "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    t0 = time.perf_counter()
    try:
        ts = sc.run()
    except (ScenarioError, ModelError, ParameterError):
        raise
    except SimulationError as exc:
        print(f"error: simulation failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    wall = time.perf_counter() - t0
    ts.to_csv(out / "timeseries.csv")
    ts.switches.to_csv(out / "switches.csv")
    try:
        summary = summarize(ts, sc)
    except InsufficientDataError:
        # run died before enough samples for the metrics; the series still gets written
        summary = None
    if summary is None:
        data = {"scenario": sc.name, "dd_count": sc.dd_count, "failure": ts.failure}
    else:
        data = summary.to_dict()
    data["scenario_digest"] = _digest(doc)
    data["seed"] = sc.seed
    with open(out / "summary.json", "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    text = summary.to_text() if summary else f"scenario        {sc.name} (no metrics: run too short)\n"
    with open(out / "summary.txt", "w") as fh:
        fh.write(text)
    manifest = {
        "tool": "ddsim", "version": __version__, "csv_schema_version": CSV_SCHEMA_VERSION,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "wall_seconds": round(wall, 3),
        "python": platform.python_version(), "numpy": np.__version__, "host": platform.node(),
        "scenario": sc.name, "scenario_digest": data["scenario_digest"], "seed": sc.seed,
        "dd_count": sc.dd_count, "t_end": sc.t_end, "invocation": argv_meta,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    sys.stdout.write(text)
    if ts.failure:
        print(f"error: numerical failure at t={ts.failure['t']:.4f} s, bus {ts.failure['bus']}, "
              f"mismatch {ts.failure['mismatch']:.3e}: {ts.failure['message']}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _job(payload):
    sc, out, meta = payload
    _setup_logging()
    return execute(sc, Path(out), meta)


def cmd_run(args) -> int:
    if bool(args.builtin) == bool(args.scenario):
        raise UsageError("give exactly one of --builtin or --scenario")
    overrides = parse_overrides(args.set)
    seeds = args.seed or [None]
    out = Path(args.out)
    jobs = []
    for s in seeds:
        ov = dict(overrides)
        if s is not None:
            ov["seed"] = s
        sc = build_scenario(args, ov)
        target = out if len(seeds) == 1 else out / f"seed_{sc.seed}"
        jobs.append((sc, str(target), {"argv": sys.argv[1:]}))
    if len(jobs) == 1 or args.jobs <= 1:
        codes = [execute(sc, Path(o), m) for sc, o, m in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_job, jobs))
    return max(codes)


def _load_summary(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.json"
    try:
        with open(p) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"no readable summary at {p}: {exc}") from None


def _metric(s: dict, key: str) -> float:
    if key == "zenith_dev":
        v = s.get("freq_zenith")
        return math.nan if v is None else abs(1.0 - v)
    if key == "nadir_dev":
        v = s.get("freq_nadir")
        return math.nan if v is None else abs(1.0 - v)
    v = s.get(key)
    if v is None:
        return math.inf if key == "settle_time" else math.nan
    return float(v)


def compare_summaries(a: dict, b: dict) -> dict:
    """Metric table with ``b - a`` deltas plus any mismatch warnings."""
    rows = {}
    for k in COMPARE_METRICS:
        va, vb = _metric(a, k), _metric(b, k)
        if math.isinf(va) and math.isinf(vb) and va == vb:
            d = 0.0
        else:
            d = vb - va
        rows[k] = {"a": va, "b": vb, "delta": d}
    warnings = []
    if a.get("scenario_digest") != b.get("scenario_digest"):
        warnings.append("runs use different scenarios")
    return {"metrics": rows, "warnings": warnings}


def format_report(report: dict, name_a: str, name_b: str) -> str:
    lines = []
    for w in report["warnings"]:
        lines.append(f"*** WARNING: {w} ***")
    lines.append(f"{'metric':<15}{'A':>16}{'B':>16}{'B - A':>16}")
    for k, r in report["metrics"].items():
        lines.append(f"{k:<15}{r['a']:>16.6g}{r['b']:>16.6g}{r['delta']:>16.6g}")
    lines.append(f"A = {name_a}")
    lines.append(f"B = {name_b}")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    a, b = _load_summary(args.run_a), _load_summary(args.run_b)
    report = compare_summaries(a, b)
    sys.stdout.write(format_report(report, args.run_a, args.run_b))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True, default=str)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddsim", description="Discrete-device synthetic inertia simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write time series and summaries")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--builtin", choices=sorted(BUILTINS), help="built-in scenario name")
    src.add_argument("--scenario", metavar="PATH", help="YAML scenario file")
    r.add_argument("--seed", type=int, nargs="+", help="RNG seed; several seeds make a sweep")
    r.add_argument("--dd-count", type=int, help="total number of discrete devices")
    r.add_argument("--mode", choices=MODES, help="SDD (devices alone) or CDD (devices assist machines)")
    r.add_argument("--t-end", type=float, help="simulated horizon in seconds")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help=f"override a parameter (repeatable); keys: {', '.join(OVERRIDE_KEYS)}")
    r.add_argument("-o", "--out", required=True, help="output directory")
    r.add_argument("--jobs", type=int, default=1, help="parallel workers for a seed sweep")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="side-by-side metrics of two finished runs")
    c.add_argument("run_a", help="run directory or summary.json")
    c.add_argument("run_b", help="run directory or summary.json")
    c.add_argument("--json", metavar="PATH", help="also write the report as JSON")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ScenarioError as exc:
        print(f"error: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ModelError, ParameterError) as exc:
        print(f"error: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
