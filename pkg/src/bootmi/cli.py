"""Command-line front end: ``simulate``, ``analyze`` and ``evidence-report``."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import re
import sys
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .benchmarks import fixed_budget_sets, matched_budget_sets
from .config import LOG_THRESHOLDS, RunConfig, parse_threshold
from .dataset import DatasetError, load_csv
from .detect import LambdaRule
from .evidence import STATUS_NAMES, CalibrationFallbackError, run_sequential
from .pooling import final_estimates
from .seeding import as_seed_sequence, child
from .simlab import DgpSpec, MissSpec, ScenarioAbortError, run_scenario

JOBS_ENV = "BOOTMI_JOBS"

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_FALLBACK = 0, 1, 2, 3

SELECTION_METRICS = ("tpr", "fpr", "dist_ideal", "model_size")
TREATMENT_METRICS = ("bias", "rmse", "coverage")
ITERATION_METRICS = ("iter_mean", "iter_sd")

DGP_KEYS = {f.name for f in fields(DgpSpec)}
MISS_KEYS = {f.name for f in fields(MissSpec)}
SCENARIO_KEYS = DGP_KEYS | MISS_KEYS

PRESETS = {
    "smoke": {
        "replications": 5,
        "grid": {"n": [200], "p": [20], "target_r2": [0.6], "mechanism": ["MCAR"], "rate": [0.2]},
        "run": {"t_pilot": 10, "t_max": 40},
    },
    "desk": {
        "replications": 100,
        "grid": {"n": [100, 500], "target_r2": [0.2, 0.6], "mechanism": ["MCAR", "MAR", "MNAR"], "rate": [0.2, 0.6]},
        "run": {},
    },
    "full": {
        "replications": 500,
        "grid": {
            "n": [100, 500, 1000],
            "heteroscedastic": [False, True],
            "target_r2": [0.2, 0.6],
            "mechanism": ["MCAR", "MAR", "MNAR"],
            "rate": [0.2, 0.4, 0.6],
        },
        "run": {},
    },
}

# "version" is written into manifests and ignored on input
TOP_KEYS = {"seed", "replications", "preset", "grid", "scenarios", "run", "version"}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message)


def _fmt(x) -> str:
    """Shortest round-trip decimal; stable across runs and platforms."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, frozenset, set)):
        items = sorted(x) if isinstance(x, (frozenset, set)) else x
        return [_jsonable(v) for v in items]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


# --------------------------------------------------------------------------
# simulate


def _blamed_key(keys, exc: Exception) -> str | None:
    """The config key named in an error message, longest match first."""
    msg = str(exc)
    for k in sorted(keys, key=len, reverse=True):
        if re.search(rf"\b{re.escape(k)}\b", msg):
            return k
    return None


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def _run_config(run: dict, seed: int, text: str) -> RunConfig:
    if not isinstance(run, dict):
        raise ConfigError("'run' must be an object", _line_of(text, "run"))
    if "seed" in run:
        raise ConfigError("set the seed at the top level, not inside 'run'", _line_of(text, "seed"))
    try:
        return RunConfig.from_dict({**run, "seed": seed})
    except (TypeError, ValueError) as exc:
        bad = _blamed_key(run, exc)
        raise ConfigError(f"run: {exc}", _line_of(text, bad) if bad else _line_of(text, "run")) from None


def _scenario(entry: dict, text: str) -> tuple[DgpSpec, MissSpec]:
    if not isinstance(entry, dict):
        raise ConfigError("each scenario must be an object", _line_of(text, "scenarios"))
    unknown = set(entry) - SCENARIO_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown scenario key {key!r}", _line_of(text, key))
    try:
        dgp = DgpSpec(**{k: v for k, v in entry.items() if k in DGP_KEYS})
        miss = MissSpec(**{k: v for k, v in entry.items() if k in MISS_KEYS})
    except (TypeError, ValueError) as exc:
        bad = _blamed_key(entry, exc)
        raise ConfigError(f"scenario {entry}: {exc}", _line_of(text, bad) if bad else None) from None
    return dgp, miss


def _expand_grid(grid: dict, text: str) -> list[dict]:
    if not isinstance(grid, dict):
        raise ConfigError("'grid' must be an object of lists or a preset name", _line_of(text, "grid"))
    keys = sorted(grid)
    for k in keys:
        if k not in SCENARIO_KEYS:
            raise ConfigError(f"unknown grid key {k!r}", _line_of(text, k))
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid entry {k!r} must be a nonempty list", _line_of(text, k))
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def resolve_simulation(text: str) -> dict:
    """Parse a simulation config into a fully explicit manifest.

    Accepted keys: ``seed``, ``replications``, ``preset`` (smoke, desk,
    full), ``grid`` (object of lists, crossed factorially), ``scenarios``
    (explicit list) and ``run`` (run-config overrides). The returned
    manifest is itself a valid config that reproduces the same outputs.
    """
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno) from None
    if not isinstance(cfg, dict):
        raise ConfigError("top level must be a JSON object", 1)
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown top-level key {key!r}", _line_of(text, key))

    base = {"replications": 100, "grid": None, "run": {}}
    if "preset" in cfg:
        name = cfg["preset"]
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", _line_of(text, "preset"))
        base = {**base, **PRESETS[name]}
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("'seed' must be a nonnegative integer", _line_of(text, "seed"))
    reps = cfg.get("replications", base["replications"])
    if not isinstance(reps, int) or isinstance(reps, bool) or reps < 1:
        raise ConfigError("'replications' must be a positive integer", _line_of(text, "replications"))
    overrides = cfg.get("run", {})
    if not isinstance(overrides, dict):
        raise ConfigError("'run' must be an object", _line_of(text, "run"))
    run = _run_config({**base["run"], **overrides}, seed, text)

    if "scenarios" in cfg and "grid" in cfg:
        raise ConfigError("give either 'scenarios' or 'grid', not both", _line_of(text, "grid"))
    if "scenarios" in cfg:
        if not isinstance(cfg["scenarios"], list) or not cfg["scenarios"]:
            raise ConfigError("'scenarios' must be a nonempty list", _line_of(text, "scenarios"))
        entries = cfg["scenarios"]
    elif "grid" in cfg:
        entries = _expand_grid(cfg["grid"], text)
    elif base["grid"] is not None:
        entries = _expand_grid(base["grid"], text)
    else:
        raise ConfigError("config needs 'preset', 'grid' or 'scenarios'", 1)

    scenarios = []
    for entry in entries:
        dgp, miss = _scenario(entry, text)
        scenarios.append({**asdict(dgp), **asdict(miss)})
    run_dict = run.to_dict()
    run_dict.pop("seed")
    return {"seed": seed, "replications": reps, "run": run_dict, "scenarios": scenarios}


def _scenario_columns(s: dict) -> list[str]:
    return [_fmt(s["n"]), _fmt(s["p"]), _fmt(s["k0"]), _fmt(s["target_r2"]), _fmt(s["heteroscedastic"]), s["mechanism"], _fmt(s["rate"])]


SCENARIO_HEADER = ["scenario", "n", "p", "k0", "target_r2", "heteroscedastic", "mechanism", "rate"]


def simulate(manifest: dict, out_dir: str, jobs: int = 1, log=sys.stderr) -> None:
    """Run every scenario of a resolved manifest and write the result tables."""
    run = RunConfig.from_dict({**manifest["run"], "seed": manifest["seed"]})
    root = as_seed_sequence(manifest["seed"])
    tables = {"selection_metrics.csv": [], "treatment_metrics.csv": [], "iterations.csv": []}
    groups = (
        ("selection_metrics.csv", SELECTION_METRICS),
        ("treatment_metrics.csv", TREATMENT_METRICS),
        ("iterations.csv", ITERATION_METRICS),
    )
    for i, s in enumerate(manifest["scenarios"]):
        dgp = DgpSpec(**{k: s[k] for k in DGP_KEYS})
        miss = MissSpec(**{k: s[k] for k in MISS_KEYS})
        print(f"scenario {i + 1}/{len(manifest['scenarios'])}: {s}", file=log, flush=True)
        res = run_scenario(dgp, miss, run, manifest["replications"], child(root, i), jobs)
        cols = [str(i)] + _scenario_columns(s)
        for method, mm in res.metrics.items():
            for table, names in groups:
                for name in names:
                    tables[table].append(cols + [method, name, _fmt(getattr(mm, name))])
        tables["iterations.csv"].append(cols + ["all", "failures", _fmt(res.failures)])
    header = SCENARIO_HEADER + ["method", "metric", "value"]
    os.makedirs(out_dir, exist_ok=True)
    for name, rows in tables.items():
        _atomic_write(os.path.join(out_dir, name), _csv_text(header, rows))
    manifest_text = json.dumps({**manifest, "version": __version__}, indent=2, sort_keys=True) + "\n"
    _atomic_write(os.path.join(out_dir, "manifest.json"), manifest_text)


def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def cmd_simulate(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    try:
        manifest = resolve_simulation(text)
    except ConfigError as exc:
        where = f"{args.config}:{exc.line}" if exc.line else args.config
        print(f"{where}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if json.loads(text).get("preset") == "full":
        print(
            "warning: the full grid runs 108 scenarios x 500 replications; expect days of compute",
            file=sys.stderr,
        )
    try:
        simulate(manifest, args.out, args.jobs or _default_jobs())
    except ScenarioAbortError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# --------------------------------------------------------------------------
# analyze


def _print_sets(title: str, sets: dict, names, out) -> None:
    print(title, file=out)
    for key, s in sets.items():
        members = ", ".join(names[j] for j in sorted(s)) or "(none)"
        print(f"  {key:<10} size {len(s):>3}: {members}", file=out)


def _analyze_config(args) -> RunConfig:
    rule = LambdaRule(kind=args.lambda_rule, value=args.lambda_value)
    return RunConfig(
        t_pilot=args.t_pilot,
        t_max=args.t_max,
        t_min=args.t_min,
        c_log_threshold=parse_threshold(args.c_threshold),
        alpha=args.alpha,
        lambda0=args.lambda0,
        pi0_min=args.pi0_min,
        qstar_min=args.qstar_min,
        m_imputations=args.m,
        seed=args.seed,
        lambda_rule=rule,
        impute_sweeps=args.impute_sweeps,
    )


def cmd_analyze(args, out=sys.stdout) -> int:
    try:
        config = _analyze_config(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        data = load_csv(args.csv, args.y, args.d, args.sentinel)
    except (OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    names = data.x_names
    root = as_seed_sequence(config.seed)
    try:
        res = run_sequential(data, config, child(root, 0), full_budget=True)
    except CalibrationFallbackError as exc:
        print(f"calibration fallback: {exc}", file=out)
        _print_sets(f"frequency-threshold results over {len(exc.pilot_unions)} pilot iterations", exc.frequency_sets(), names, out)
        return EXIT_FALLBACK

    cal = res.calibration
    print("calibration", file=out)
    print(f"  pi0_raw  {cal.pi0_raw:.4f}", file=out)
    print(f"  pi0      {cal.pi0:.4f}", file=out)
    print(f"  pi1      {cal.pi1:.4f}", file=out)
    print(f"  q_star   {cal.q_star:.4f}", file=out)
    print(f"  threshold c = {config.c_log_threshold:.4f}, t_min = {config.t_min}", file=out)
    print(f"stopped at iteration {res.stop_iteration} ({res.stop_reason})", file=out)
    print("selected variables", file=out)
    for j in sorted(res.selected):
        print(f"  {names[j]:<20} decided at iteration {int(res.decided_at[j])}", file=out)
    if not res.selected:
        print("  (none)", file=out)
    if res.undecided:
        print("undecided at stop: " + ", ".join(names[j] for j in sorted(res.undecided)), file=out)

    fixed = fixed_budget_sets(res.union_history, config.t_max)
    matched = matched_budget_sets(res.union_history, res.stop_iteration)
    _print_sets(f"benchmarks at fixed budget {config.t_max}", fixed, names, out)
    _print_sets(f"benchmarks at matched budget {res.stop_iteration}", matched, names, out)

    sets = {"proposed": res.selected, **fixed, **{f"{k}_matched": v for k, v in matched.items()}}
    pooled = final_estimates(data, sets, config.m_imputations, config.level, child(root, 1), config.impute_sweeps)
    print(f"pooled estimate of the {args.d} coefficient (m = {config.m_imputations})", file=out)
    for method, est in pooled.items():
        print(f"  {method:<15} {est.q_bar: .5f}  se {est.se:.5f}  CI [{est.ci_low: .5f}, {est.ci_high: .5f}]", file=out)

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for j, name in enumerate(names):
        for t in range(res.evidence_paths.shape[1]):
            decided = res.decided_at[j] and t + 1 >= res.decided_at[j]
            status = STATUS_NAMES[int(res.status[j])] if decided else "undecided"
            rows.append([name, str(t + 1), _fmt(res.evidence_paths[j, t]), status])
    _atomic_write(os.path.join(args.out, "evidence_paths.csv"), _csv_text(["variable", "iteration", "log_evidence", "status"], rows))

    summary = {
        "version": __version__,
        "csv": os.path.abspath(args.csv),
        "y": args.y,
        "d": args.d,
        "variables": list(names),
        "config": config.to_dict(),
        "calibration": cal.to_dict(),
        "stop_iteration": res.stop_iteration,
        "stop_reason": res.stop_reason,
        "selected": [names[j] for j in sorted(res.selected)],
        "undecided": [names[j] for j in sorted(res.undecided)],
        "status": [STATUS_NAMES[int(s)] for s in res.status],
        "decided_at": res.decided_at,
        "evidence_paths": res.evidence_paths,
        "benchmarks": {k: [names[j] for j in sorted(v)] for k, v in sets.items() if k != "proposed"},
        "estimates": {k: asdict(v) for k, v in pooled.items()},
        "flags": res.flags,
    }
    _atomic_write(os.path.join(args.out, "run_summary.json"), json.dumps(_jsonable(summary), indent=2) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# evidence-report


def path_statistics(summary: dict) -> list[dict]:
    """Per-variable statistics of the recorded log-evidence paths.

    ``crossings`` counts sign changes of the path (ignoring exact zeros).
    """
    try:
        names = summary["variables"]
        paths = np.asarray(summary["evidence_paths"], dtype=float)
        status = summary["status"]
        decided_at = summary["decided_at"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed run summary: {exc}") from None
    if paths.ndim != 2 or paths.shape[0] != len(names) or len(status) != len(names) or len(decided_at) != len(names):
        raise ValueError("malformed run summary: path, status and variable counts disagree")
    out = []
    for j, name in enumerate(names):
        path = paths[j]
        signs = np.sign(path[path != 0])
        out.append(
            {
                "variable": name,
                "final_log_evidence": float(path[-1]) if path.size else 0.0,
                "max_log_evidence": float(path.max()) if path.size else 0.0,
                "min_log_evidence": float(path.min()) if path.size else 0.0,
                "status": status[j],
                "decided_at": int(decided_at[j]),
                "crossings": int(np.count_nonzero(np.diff(signs))),
            }
        )
    return out


def cmd_evidence_report(args) -> int:
    try:
        with open(args.summary, encoding="utf-8") as fh:
            summary = json.load(fh)
        stats = path_statistics(summary)
    except OSError as exc:
        print(f"error: cannot read {args.summary}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        print(f"{args.summary}:{exc.lineno}: error: invalid JSON: {exc.msg}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"{args.summary}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    header = ["variable", "final_log_evidence", "max_log_evidence", "min_log_evidence", "status", "decided_at", "crossings"]
    rows = [[s["variable"]] + [_fmt(s[k]) if k != "status" else s[k] for k in header[1:]] for s in stats]
    text = _csv_text(header, rows)
    if args.out:
        _atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bootmi", description="Sequential evidence aggregation for variable selection under missing data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo scenario grid")
    sim.add_argument("config", help="JSON grid config or a manifest.json from an earlier run")
    sim.add_argument("--out", default="sim_out", help="output directory")
    sim.add_argument("--jobs", type=int, default=None, help=f"worker processes (default: ${JOBS_ENV} or 1)")
    sim.set_defaults(func=cmd_simulate)

    d = RunConfig()
    ana = sub.add_parser("analyze", help="run the sequential procedure on a CSV file")
    ana.add_argument("csv")
    ana.add_argument("--y", required=True, help="outcome column")
    ana.add_argument("--d", required=True, help="variable-of-interest column")
    ana.add_argument("--sentinel", default="NA", help="token marking a missing cell")
    ana.add_argument("--c-threshold", default="log10", help=f"{'|'.join(LOG_THRESHOLDS)} or a number")
    ana.add_argument("--t-min", type=int, default=d.t_min)
    ana.add_argument("--t-pilot", type=int, default=d.t_pilot)
    ana.add_argument("--t-max", type=int, default=d.t_max)
    ana.add_argument("--alpha", type=float, default=d.alpha)
    ana.add_argument("--lambda0", type=float, default=d.lambda0)
    ana.add_argument("--pi0-min", type=float, default=d.pi0_min)
    ana.add_argument("--qstar-min", type=float, default=d.qstar_min)
    ana.add_argument("--m", type=int, default=d.m_imputations, help="imputations for the pooled estimate")
    ana.add_argument("--impute-sweeps", type=int, default=d.impute_sweeps)
    ana.add_argument("--seed", type=int, default=0)
    ana.add_argument("--lambda-rule", choices=("cv_1se", "cv_min", "fixed"), default="cv_1se")
    ana.add_argument("--lambda-value", type=float, default=None, help="penalty for --lambda-rule fixed")
    ana.add_argument("--out", default=".", help="directory for evidence_paths.csv and run_summary.json")
    ana.set_defaults(func=cmd_analyze)

    rep = sub.add_parser("evidence-report", help="per-variable statistics from a run summary")
    rep.add_argument("summary", help="run_summary.json written by analyze")
    rep.add_argument("--out", default=None, help="CSV path (default: stdout)")
    rep.set_defaults(func=cmd_evidence_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
