"""Command-line interface.

Exit statuses: 0 null rejected (decision reached), 10 accepted at the horizon,
11 still running when the data ran out, 2 usage error, 3 data error,
4 numerical error.

Batch directories hold ``manifest.json`` plus delimited batch files with
header ``y,a,x1,...,xp``; the intercept column is implicit.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distributions import InvalidArgument
from .glm import Dataset, GlmFamily
from .multiple_testing import PROCEDURES, HorizonMismatchError, run_multiple_post
from .penalized import FittingError
from .penalties import PenaltyConfig, PenaltyKind
from .score_test import NumericalError
from .sequential import (
    Batch,
    CheckpointError,
    SequenceError,
    Status,
    checkpoint,
    ingest_batch,
    new_experiment,
    restore,
)
from .simulation import (
    DEFAULT_ALT_SIZES,
    SINGLE_TEST_SIZES,
    CovariateSetting,
    Method,
    SimulationConfig,
    gen_batch,
    run_multiple_study,
    run_single_study,
)

log = logging.getLogger("posttest")

EXIT_REJECT = 0
EXIT_ACCEPT = 10
EXIT_RUNNING = 11
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
OUTPUT_ENV = "POSTTEST_OUTPUT_DIR"
TRAJECTORY_COLUMNS = ("batch", "n_control", "n_treat", "lambda_stat", "p_pointwise", "running_min_p", "status", "note")
REPORT_COLUMNS = ("design", "method", "link", "setting", "b", "metric", "mean", "std", "replications", "failures")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- formatting


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


# ---------------------------------------------------------------- batch files


@dataclass(frozen=True)
class Manifest:
    family: GlmFamily
    p: int
    columns: tuple[str, ...]
    batches: tuple[str, ...] | None
    horizon: int | None


def expected_columns(p: int) -> tuple[str, ...]:
    return ("y", "a") + tuple(f"x{j}" for j in range(1, p + 1))


def read_manifest(directory: Path) -> Manifest:
    path = directory / MANIFEST
    if not path.is_file():
        raise DataError(f"{path}: manifest missing")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    allowed = {"version", "family", "dispersion", "p", "columns", "batches", "horizon"}
    unknown = set(raw) - allowed
    if unknown:
        raise DataError(f"{path}: unknown manifest keys {sorted(unknown)}")
    if raw.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise DataError(f"{path}: manifest version {raw.get('version')} unsupported")
    try:
        family = GlmFamily.from_name(raw["family"], float(raw.get("dispersion", 1.0)))
        p = int(raw["p"])
    except (KeyError, TypeError, ValueError, InvalidArgument) as exc:
        raise DataError(f"{path}: {exc}") from None
    columns = tuple(raw.get("columns") or expected_columns(p))
    if columns != expected_columns(p):
        raise DataError(f"{path}: columns must be {','.join(expected_columns(p))}")
    batches = raw.get("batches")
    horizon = raw.get("horizon")
    return Manifest(family, p, columns, None if batches is None else tuple(batches),
                    None if horizon is None else int(horizon))


def read_batch_file(path: Path, manifest: Manifest) -> Dataset:
    """Parse one batch file; errors name the file, line and column."""
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{path}:1: empty file")
    header = tuple(c.strip() for c in rows[0])
    if header != manifest.columns:
        raise DataError(f"{path}:1: header {','.join(header)} does not match {','.join(manifest.columns)}")
    k = manifest.p + 1
    X, y, a = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
        vals = []
        for col, cell in zip(header, row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}:{lineno}: column {col}: non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: column {col}: non-finite value {cell!r}")
            vals.append(v)
        if vals[1] not in (0.0, 1.0):
            raise DataError(f"{path}:{lineno}: column a: arm must be 0 or 1, got {row[1]!r}")
        y.append(vals[0])
        a.append(int(vals[1]))
        X.append([1.0] + vals[2:])
    if not y:
        raise DataError(f"{path}: no observations")
    data = Dataset(np.array(X).reshape(-1, k), np.array(y), np.array(a, dtype=np.int64))
    try:
        manifest.family.check_response(data.y)
    except InvalidArgument as exc:
        raise DataError(f"{path}: {exc}") from None
    return data


def batch_paths(directory: Path, manifest: Manifest) -> list[Path]:
    if manifest.batches is not None:
        paths = [directory / name for name in manifest.batches]
        for p in paths:
            if not p.is_file():
                raise DataError(f"{p}: listed in manifest but missing")
        return paths
    return sorted(p for p in directory.glob("*.csv") if p.is_file())


def write_batch_file(path: Path, data: Dataset) -> None:
    p = data.n_coef - 1
    rows = [[float(yv), int(av)] + [float(v) for v in x[1:]] for x, yv, av in zip(data.X, data.y, data.a)]
    _write_csv(path, expected_columns(p), rows)


# ---------------------------------------------------------------- argument plumbing


def _output_dir(arg: str | None) -> Path:
    out = Path(arg or os.environ.get(OUTPUT_ENV) or "posttest-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_beta0(text, k: int) -> np.ndarray:
    if text is None or (isinstance(text, str) and text.strip().lower() == "zero"):
        return np.zeros(k)
    vals = text if isinstance(text, list) else [v for v in str(text).split(",") if v.strip()]
    try:
        beta0 = np.array([float(v) for v in vals])
    except ValueError:
        raise UsageError(f"beta0 must be 'zero' or {k} comma-separated numbers") from None
    if beta0.shape != (k,):
        raise UsageError(f"beta0 needs {k} entries (intercept first), got {beta0.shape[0]}")
    return beta0


def _penalty(kind: str, gamma, penalize_intercept: bool, fixed_lambda) -> PenaltyConfig | None:
    if kind in ("none", "mle", "sst"):
        return None
    try:
        return PenaltyConfig(PenaltyKind(kind), gamma, None, penalize_intercept, fixed_lambda)
    except (ValueError, InvalidArgument) as exc:
        raise UsageError(str(exc)) from None


def _alpha(value: float) -> float:
    if not (0.0 < value < 1.0):
        raise UsageError("alpha must lie in (0, 1)")
    return value


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse twice: first to find --config, then with its entries as defaults."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        dests = {a.dest for a in sub._actions} - {"help", "config", "command"}
        keys = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(keys) - dests)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**keys)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------- commands


def _run_experiment(directory: Path, args, experiment_id: str, resume=None):
    if not any(directory.iterdir()):
        raise UsageError(f"{directory}: empty input directory")
    manifest = read_manifest(directory)
    paths = batch_paths(directory, manifest)
    if not paths:
        raise UsageError(f"{directory}: no batch files")
    batches = [read_batch_file(p, manifest) for p in paths]
    for p, b in zip(paths, batches):
        if b.n_coef != manifest.p + 1:
            raise DataError(f"{p}: arity does not match p={manifest.p}")
    k = manifest.p + 1
    horizon = args.horizon or manifest.horizon
    if horizon is None:
        # default horizon: all supplied data
        horizon = min(sum(int((b.a == 0).sum()) for b in batches), sum(int((b.a == 1).sum()) for b in batches))
        horizon = max(horizon, 1)
    if resume is not None:
        state = resume
    else:
        state = new_experiment(
            experiment_id=experiment_id,
            family=manifest.family,
            penalty=_penalty(args.penalty, args.gamma, not args.no_penalize_intercept, args.fixed_lambda),
            beta0=_parse_beta0(args.beta0, k),
            alpha=_alpha(args.alpha),
            max_horizon=horizon,
            batch_size_nominal=args.batch_size or max(1, batches[0].n // 2),
            rng_seed=args.seed,
            stop_on_reject=not getattr(args, "no_stop", False),
        )
    for seq, data in enumerate(batches, start=1):
        if seq <= state.last_sequence:
            continue
        if state.status.terminal:
            break
        state = ingest_batch(state, Batch(data, seq))
    return state


def _trajectory_rows(state):
    rows = []
    running = True
    for i, r in enumerate(state.stat_history, start=1):
        n_now = min(r.n_control, r.n_treat)
        if state.first_reject_at is not None and n_now >= state.first_reject_at and running:
            status = f"RejectedAt({state.first_reject_at})"
            running = not state.stop_on_reject
        elif n_now >= state.max_horizon:
            status = str(state.status)
        else:
            status = "Running"
        rows.append((i, r.n_control, r.n_treat, r.lambda_stat, r.p_pointwise, r.running_min_p, status, r.skipped))
    return rows


def _exit_for(state) -> int:
    if state.status.kind is Status.REJECTED:
        return EXIT_REJECT
    if state.status.kind is Status.ACCEPTED:
        return EXIT_ACCEPT
    return EXIT_RUNNING


def cmd_test_run(args) -> int:
    directory = Path(args.data)
    if not directory.is_dir():
        raise UsageError(f"{directory}: not a directory")
    resume = None
    if args.resume:
        try:
            resume = restore(Path(args.resume).read_bytes())
        except OSError as exc:
            raise UsageError(f"cannot read checkpoint: {exc}") from None
    state = _run_experiment(directory, args, args.experiment_id or directory.name, resume)
    out = _output_dir(args.out)
    rows = _trajectory_rows(state)
    if args.format == "json":
        _write_json(out / "trajectory.json",
                    [dict(zip(TRAJECTORY_COLUMNS, r)) for r in rows])
    else:
        _write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, rows)
    _write_json(out / "decision.json", {
        "experiment_id": state.experiment_id,
        "status": str(state.status),
        "reject": state.status.kind is Status.REJECTED,
        "p_value": state.running_min_p,
        "n_control": state.n_control,
        "n_treat": state.n_treat,
        "batches": state.last_sequence,
    })
    if args.checkpoint:
        Path(args.checkpoint).write_bytes(checkpoint(state))
    return _exit_for(state)


def cmd_test_multi(args) -> int:
    dirs = [Path(d) for d in args.data]
    for d in dirs:
        if not d.is_dir():
            raise UsageError(f"{d}: not a directory")
    args.no_stop = True
    states = [_run_experiment(d, args, d.name) for d in dirs]
    counts = {s.last_sequence for s in states}
    if len(counts) != 1:
        raise DataError(f"experiments have different batch counts: {sorted(counts)}")
    try:
        decisions = run_multiple_post(states, _alpha(args.alpha), args.procedure)
    except HorizonMismatchError as exc:
        raise DataError(str(exc)) from None
    out = _output_dir(args.out)
    rows = [(s.experiment_id, s.running_min_p, int(d)) for s, d in zip(states, decisions)]
    _write_csv(out / "decisions.csv", ("experiment", "p_value", "decision"), rows)
    if any(s.status.kind is Status.RUNNING for s in states):
        return EXIT_RUNNING
    return EXIT_REJECT if decisions.any() else EXIT_ACCEPT


_DESIGN_B = {"table2": "zero", "table3": "zero", "table4": "single", "table5": "multi"}


def cmd_simulate(args) -> int:
    family = GlmFamily.from_name(args.link)
    if args.reps < 1:
        raise UsageError("--reps must be at least 1")
    method = Method(args.method)
    setting = CovariateSetting(args.setting)
    base = dict(covariate_setting=setting, family=family, replications=args.reps, seed=args.seed,
                method=method, alpha=_alpha(args.alpha), p=args.p, batch_n=args.batch_n,
                horizon_N=args.horizon, adalasso_lambda=None if args.bic else 1.0)
    try:
        SimulationConfig(**base)
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None
    rows = []
    traj_rows = []
    kind = _DESIGN_B[args.design]
    label = (args.design, method.value, family.link_name, setting.value)
    if kind == "multi":
        sizes = DEFAULT_ALT_SIZES[family.kind] if args.b is None else tuple(args.b)
        cfg = SimulationConfig(**base)
        m = run_multiple_study(cfg, args.m, args.nulls, sizes, args.procedure, jobs=args.jobs)
        bdesc = "/".join(_fmt(float(v)) for v in sizes)
        for name in ("fdr", "tpr"):
            val = getattr(m, name)
            rows.append(label + (bdesc, name) + (val if val else (None, None)) + (m.replications, m.failures))
        for rep, (fdrs, tprs) in enumerate(zip(m.trajectories.get("fdr", []), m.trajectories.get("tpr", []))):
            for batch, (f, t) in enumerate(zip(fdrs, tprs), start=1):
                traj_rows.append((rep, batch, f, t))
    else:
        if kind == "zero":
            bs = [0.0] if args.b is None else args.b
        else:
            bs = list(SINGLE_TEST_SIZES[family.kind]) if args.b is None else args.b
        for b in bs:
            cfg = SimulationConfig(b=float(b), **base)
            m = run_single_study(cfg, jobs=args.jobs)
            metrics = ("coverage_ratio", "filter_ratio") if args.design == "table2" else ("rejection_rate",)
            for name in metrics + ("stopping_time",):
                if name == "stopping_time":
                    q = m.stopping_time_quantiles
                    vals = (q[0], q[1]) if q else (None, None)
                    rows.append(label + (float(b), "stopping_median_p90") + vals + (m.replications, m.failures))
                    continue
                val = getattr(m, name)
                rows.append(label + (float(b), name) + (val if val else (None, None)) + (m.replications, m.failures))
            for rep, traj in m.trajectories.items():
                for batch, (nc, nt, lam, p, rp) in enumerate(traj, start=1):
                    traj_rows.append((float(b), rep, batch, nc, nt, lam, p, rp))
    out = _output_dir(args.out)
    stem = f"{args.design}_{method.value}_{family.link_name}_{setting.value}"
    _write_csv(out / f"{stem}.csv", REPORT_COLUMNS, rows)
    if args.trajectories:
        if kind == "multi":
            _write_csv(out / f"{stem}_trajectory.csv", ("replication", "batch", "fdr", "tpr"), traj_rows)
        else:
            _write_csv(out / f"{stem}_trajectory.csv",
                       ("b", "replication", "batch", "n_control", "n_treat", "lambda_stat", "p_pointwise",
                        "running_min_p"), traj_rows)
    print((out / f"{stem}.csv").read_text(), end="")
    return 0


def cmd_generate(args) -> int:
    family = GlmFamily.from_name(args.link)
    cfg = SimulationConfig(covariate_setting=CovariateSetting(args.setting), family=family, b=args.b,
                           p=args.p, batch_n=args.batch_n, horizon_N=args.batch_n * args.batches,
                           seed=args.seed)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for seq in range(1, args.batches + 1):
        batch = gen_batch(cfg, rng, sequence_number=seq)
        name = f"batch_{seq:04d}.csv"
        write_batch_file(out / name, batch.observations)
        names.append(name)
    _write_json(out / MANIFEST, {
        "version": MANIFEST_VERSION,
        "family": family.kind.value,
        "dispersion": family.dispersion,
        "p": args.p,
        "columns": list(expected_columns(args.p)),
        "batches": names,
    })
    return 0


# ---------------------------------------------------------------- parser


def _add_test_options(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON file with option defaults (unknown keys are rejected)")
    sp.add_argument("--penalty", default="adalasso", choices=["adalasso", "scad", "mcp", "none"])
    sp.add_argument("--gamma", type=float, default=None, help="SCAD/MCP concavity")
    sp.add_argument("--fixed-lambda", type=float, default=None,
                    help="pin the penalty level instead of selecting it by BIC")
    sp.add_argument("--no-penalize-intercept", action="store_true")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--beta0", default="zero", help="'zero' or comma-separated p+1 values")
    sp.add_argument("--horizon", type=int, default=None, help="per-arm horizon N (default: all data)")
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./posttest-out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posttest", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    sp = subs.add_parser("test-run", help="run one sequential experiment over a batch directory")
    sp.add_argument("data", help="directory with manifest.json and batch files")
    _add_test_options(sp)
    sp.add_argument("--format", choices=["csv", "json"], default="csv")
    sp.add_argument("--experiment-id", default=None)
    sp.add_argument("--checkpoint", default=None, help="write the final state here")
    sp.add_argument("--resume", default=None, help="continue from a checkpoint file")
    sp.set_defaults(func=cmd_test_run)

    sp = subs.add_parser("test-multi", help="run several experiments and combine them")
    sp.add_argument("data", nargs="+", help="one batch directory per experiment")
    _add_test_options(sp)
    sp.add_argument("--procedure", choices=sorted(PROCEDURES), default="by")
    sp.set_defaults(func=cmd_test_multi)

    sp = subs.add_parser("simulate", help="run a simulation study")
    sp.add_argument("--config")
    sp.add_argument("--design", choices=sorted(_DESIGN_B), required=True)
    sp.add_argument("--method", choices=[m.value for m in Method], default="adalasso")
    sp.add_argument("--link", choices=["identity", "logit", "log"], default="identity")
    sp.add_argument("--setting", choices=["nu", "mvn"], default="nu")
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--b", type=float, nargs="+", default=None)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--p", type=int, default=30)
    sp.add_argument("--batch-n", type=int, default=100)
    sp.add_argument("--horizon", type=int, default=1000)
    sp.add_argument("--m", type=int, default=32)
    sp.add_argument("--nulls", type=int, default=24)
    sp.add_argument("--procedure", choices=sorted(PROCEDURES), default="by")
    sp.add_argument("--bic", action="store_true", help="tune the AdaLasso level by BIC")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--trajectories", action="store_true")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_simulate)

    sp = subs.add_parser("generate", help="write simulated batch files and a manifest")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--link", choices=["identity", "logit", "log"], default="identity")
    sp.add_argument("--setting", choices=["nu", "mvn"], default="nu")
    sp.add_argument("--b", type=float, default=0.0)
    sp.add_argument("--p", type=int, default=30)
    sp.add_argument("--batch-n", type=int, default=100)
    sp.add_argument("--batches", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        args = _apply_config(parser, sub, argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, SequenceError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidArgument as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FittingError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
