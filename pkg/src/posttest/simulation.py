"""Simulation harness: data-generating process, seeded replications, metrics.

Replication ``r`` of a study draws from ``SeedSequence(seed, spawn_key=(r,))``
(and ``(r, i)`` for experiment ``i`` of a multiple study), so results do not
depend on execution order.
"""
from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distributions import InvalidArgument
from .glm import Dataset, FamilyKind, GlmFamily, inverse_link
from .multiple_testing import PROCEDURES
from .penalized import FittingError
from .penalties import PenaltyConfig, PenaltyKind
from .sequential import Batch, ExperimentState, Status, ingest_batch, new_experiment

__all__ = [
    "CovariateSetting",
    "Method",
    "SimulationConfig",
    "StudyMetrics",
    "ReplicationRecord",
    "gen_covariates",
    "gen_response",
    "gen_batch",
    "run_replication",
    "run_single_study",
    "run_multiple_study",
    "default_theta0",
    "DEFAULT_ALT_SIZES",
    "SINGLE_TEST_SIZES",
]

log = logging.getLogger(__name__)

USEFUL = tuple(range(1, 7))

DEFAULT_ALT_SIZES = {
    FamilyKind.GAUSSIAN: (0.2, 0.4, 0.6, 0.8),
    FamilyKind.BERNOULLI: (1.0, 2.0, 3.0, 4.0),
    FamilyKind.POISSON: (0.1, 0.2, 0.3, 0.4),
}
SINGLE_TEST_SIZES = {
    FamilyKind.GAUSSIAN: (0.1, 0.15),
    FamilyKind.BERNOULLI: (0.5, 0.75),
    FamilyKind.POISSON: (0.05, 0.08),
}


class CovariateSetting(enum.Enum):
    NU = "nu"
    MVN = "mvn"


class Method(enum.Enum):
    POST_MCP = "mcp"
    POST_SCAD = "scad"
    POST_ADALASSO = "adalasso"
    SST_MLE = "sst"

    def penalty(self, penalize_intercept: bool = True,
                adalasso_lambda: float | None = 1.0) -> PenaltyConfig | None:
        if self is Method.SST_MLE:
            return None
        fixed = adalasso_lambda if self is Method.POST_ADALASSO else None
        return PenaltyConfig(PenaltyKind(self.value), penalize_intercept=penalize_intercept,
                             fixed_lambda=fixed)


def default_theta0(p: int = 30) -> np.ndarray:
    theta = np.zeros(p + 1)
    theta[1:4] = 1.0
    theta[4:7] = -1.0
    return theta


@dataclass(frozen=True)
class SimulationConfig:
    covariate_setting: CovariateSetting = CovariateSetting.NU
    family: GlmFamily = field(default_factory=GlmFamily)
    b: float = 0.0
    theta0: tuple[float, ...] | None = None
    beta_treat_pattern: tuple[tuple[int, float], ...] | None = None
    p: int = 30
    batch_n: int = 100
    horizon_N: int = 1000
    replications: int = 100
    alpha: float = 0.05
    method: Method = Method.POST_ADALASSO
    seed: int = 0
    penalize_intercept: bool = True
    # AdaLasso level; 1.0 is the untuned sum_j w_j|theta_j| form, None selects by BIC
    adalasso_lambda: float | None = 1.0

    def __post_init__(self):
        if not math.isfinite(self.b):
            raise InvalidArgument("effect size b must be finite")
        if self.p < 7:
            raise InvalidArgument("the covariate layout needs p >= 7")
        if not (0 < self.alpha < 1):
            raise InvalidArgument("alpha must lie in (0, 1)")
        if self.batch_n < 1 or self.horizon_N < self.batch_n:
            raise InvalidArgument("need 1 <= batch_n <= horizon_N")
        if self.replications < 1:
            raise InvalidArgument("need at least one replication")

    def theta(self) -> np.ndarray:
        if self.theta0 is None:
            return default_theta0(self.p)
        t = np.asarray(self.theta0, dtype=float)
        if t.shape != (self.p + 1,):
            raise InvalidArgument("theta0 must have length p + 1")
        return t

    def beta(self, b: float | None = None) -> np.ndarray:
        b = self.b if b is None else b
        beta = np.zeros(self.p + 1)
        if self.beta_treat_pattern is None:
            beta[1] = b
            beta[4] = b
        else:
            for idx, val in self.beta_treat_pattern:
                beta[idx] = val
        return beta

    @property
    def n_batches(self) -> int:
        return -(-self.horizon_N // self.batch_n)


def _mvn_block_factor() -> np.ndarray:
    from .distributions import cholesky_factor

    cov = np.full((6, 6), 0.5)
    np.fill_diagonal(cov, 1.0)
    return cholesky_factor(cov)


_MVN_L = None


def gen_covariates(setting: CovariateSetting, n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """n x (p+1) design: intercept, six structured covariates, then iid N(0,1) noise."""
    global _MVN_L
    if p < 7:
        raise InvalidArgument("the covariate layout needs p >= 7")
    setting = CovariateSetting(setting)
    X = np.empty((n, p + 1))
    X[:, 0] = 1.0
    if setting is CovariateSetting.NU:
        X[:, 1] = rng.normal(0.0, 1.0, n)
        X[:, 2] = rng.normal(1.0, 1.0, n)
        X[:, 3] = rng.normal(2.0, 1.0, n)
        X[:, 4] = rng.uniform(-1.0, 1.0, n)
        X[:, 5] = rng.uniform(0.0, 2.0, n)
        X[:, 6] = rng.uniform(1.0, 3.0, n)
    else:
        if _MVN_L is None:
            _MVN_L = _mvn_block_factor()
        X[:, 1:7] = rng.standard_normal((n, 6)) @ _MVN_L.T
    X[:, 7:] = rng.standard_normal((n, p - 6))
    return X


def gen_response(family: GlmFamily, theta0, beta, X, A, rng: np.random.Generator) -> np.ndarray:
    """Draw y from the family with eta = X theta0 + (X beta) * A."""
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=float)
    eta = X @ np.asarray(theta0, dtype=float) + (X @ np.asarray(beta, dtype=float)) * A
    mu, saturated = inverse_link(family, eta, return_flag=True)
    if saturated:
        log.warning("linear predictor clamped while simulating responses")
    mu = np.atleast_1d(mu)
    if family.kind is FamilyKind.GAUSSIAN:
        return mu + math.sqrt(family.dispersion) * rng.standard_normal(mu.shape[0])
    if family.kind is FamilyKind.BERNOULLI:
        return (rng.random(mu.shape[0]) < mu).astype(float)
    return rng.poisson(mu).astype(float)


def gen_batch(config: SimulationConfig, rng: np.random.Generator, b: float | None = None,
              sequence_number: int = 1) -> Batch:
    """One batch: ``batch_n`` control rows followed by ``batch_n`` treatment rows."""
    n = config.batch_n
    X = gen_covariates(config.covariate_setting, 2 * n, config.p, rng)
    A = np.repeat([0, 1], n)
    y = gen_response(config.family, config.theta(), config.beta(b), X, A, rng)
    return Batch(Dataset(X, y, A), sequence_number)


# ---------------------------------------------------------------- metrics


@dataclass
class ReplicationRecord:
    rejected: bool
    stopping_n: int
    coverage: float | None
    filter: float | None
    trajectory: list[tuple[int, int, float | None, float | None, float]]
    failed: bool = False
    error: str = ""


def _rate(values) -> tuple[float, float] | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    arr = np.asarray(vals, dtype=float)
    return float(arr.mean()), float(arr.std())


@dataclass
class StudyMetrics:
    rejection_rate: tuple[float, float] | None = None
    coverage_ratio: tuple[float, float] | None = None
    filter_ratio: tuple[float, float] | None = None
    fdr: tuple[float, float] | None = None
    tpr: tuple[float, float] | None = None
    stopping_time_quantiles: tuple[float, float] | None = None
    replications: int = 0
    failures: int = 0
    records: list = field(default_factory=list, repr=False)
    trajectories: dict = field(default_factory=dict, repr=False)


def selection_ratios(theta_hat: np.ndarray) -> tuple[float, float]:
    """(coverage, filter): share of X2..X7 kept, share of the noise covariates dropped."""
    nz = np.asarray(theta_hat) != 0.0
    useful = np.array(USEFUL)
    noise = np.arange(7, nz.shape[0])
    coverage = float(np.mean(nz[useful]))
    filt = float(np.mean(~nz[noise])) if noise.size else 1.0
    return coverage, filt


# ---------------------------------------------------------------- single study


def _new_state(config: SimulationConfig, name: str, seed: int, stop_on_reject: bool = True) -> ExperimentState:
    return new_experiment(
        experiment_id=name,
        family=config.family,
        penalty=config.method.penalty(config.penalize_intercept, config.adalasso_lambda),
        beta0=np.zeros(config.p + 1),
        alpha=config.alpha,
        max_horizon=config.horizon_N,
        batch_size_nominal=config.batch_n,
        rng_seed=seed,
        stop_on_reject=stop_on_reject,
    )


def run_replication(config: SimulationConfig, rep: int, b: float | None = None) -> ReplicationRecord:
    """Run one sequential experiment to its decision."""
    ss = np.random.SeedSequence(config.seed, spawn_key=(rep,))
    rng = np.random.default_rng(ss)
    state = _new_state(config, f"rep{rep}", config.seed)
    seq = 0
    try:
        while state.status.kind is Status.RUNNING:
            seq += 1
            state = ingest_batch(state, gen_batch(config, rng, b, seq))
    except (FittingError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return ReplicationRecord(False, 0, None, None, [], failed=True, error=str(exc))
    coverage = filt = None
    if state.last_model is not None:
        coverage, filt = selection_ratios(state.last_model.theta_hat)
    traj = [(h.n_control, h.n_treat, h.lambda_stat, h.p_pointwise, h.running_min_p)
            for h in state.stat_history]
    rejected = state.status.kind is Status.REJECTED
    stop = state.status.at if rejected else state.n_treat
    return ReplicationRecord(rejected, stop, coverage, filt, traj)


def _map(fn, args: Sequence, jobs: int):
    if jobs <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


def run_single_study(config: SimulationConfig, jobs: int = 1) -> StudyMetrics:
    """Replicate the single sequential test and aggregate rejection/selection metrics."""
    records = _map(run_replication, [(config, r) for r in range(config.replications)], jobs)
    ok = [r for r in records if not r.failed]
    failures = len(records) - len(ok)
    if failures:
        log.warning("%d of %d replications failed and were excluded", failures, len(records))
    metrics = StudyMetrics(replications=len(records), failures=failures, records=records)
    if ok:
        metrics.rejection_rate = _rate([float(r.rejected) for r in ok])
        metrics.coverage_ratio = _rate([r.coverage for r in ok])
        metrics.filter_ratio = _rate([r.filter for r in ok])
        stops = np.array([r.stopping_n for r in ok], dtype=float)
        metrics.stopping_time_quantiles = (float(np.median(stops)), float(np.quantile(stops, 0.9)))
        metrics.trajectories = {i: r.trajectory for i, r in enumerate(records) if not r.failed}
    return metrics


# ---------------------------------------------------------------- multiple study


def _effect_sizes(config: SimulationConfig, m: int, null_count: int, alt_sizes) -> list[float]:
    n_alt = m - null_count
    if n_alt < 0:
        raise InvalidArgument("null_count exceeds m")
    if alt_sizes is None:
        alt_sizes = DEFAULT_ALT_SIZES[config.family.kind]
    alt_sizes = list(alt_sizes)
    if n_alt and not alt_sizes:
        raise InvalidArgument("alternative effect sizes required")
    alts = [alt_sizes[i * len(alt_sizes) // n_alt] for i in range(n_alt)] if n_alt else []
    return [0.0] * null_count + alts


def _fdr_tpr(decisions: np.ndarray, is_alt: np.ndarray) -> tuple[float, float | None]:
    rejected = decisions.astype(bool)
    n_rej = int(rejected.sum())
    false_rej = int((rejected & ~is_alt).sum())
    fdr = false_rej / n_rej if n_rej else 0.0
    n_alt = int(is_alt.sum())
    tpr = int((rejected & is_alt).sum()) / n_alt if n_alt else None
    return fdr, tpr


def _run_multiple_replication(config: SimulationConfig, rep: int, sizes: list[float], procedure: str):
    from .multiple_testing import run_multiple_post

    m = len(sizes)
    is_alt = np.array([s != 0.0 for s in sizes])
    rngs = [np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(rep, i)))
            for i in range(m)]
    states = [_new_state(config, f"rep{rep}-exp{i}", config.seed, stop_on_reject=False)
              for i in range(m)]
    fdr_path, tpr_path = [], []
    decisions = np.zeros(m, dtype=int)
    try:
        for seq in range(1, config.n_batches + 1):
            states = [ingest_batch(st, gen_batch(config, rng, b, seq))
                      for st, rng, b in zip(states, rngs, sizes)]
            decisions = run_multiple_post(states, config.alpha, procedure)
            fdr, tpr = _fdr_tpr(decisions, is_alt)
            fdr_path.append(fdr)
            tpr_path.append(tpr)
    except (FittingError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return None, str(exc)
    return (fdr_path, tpr_path, decisions), ""


def run_multiple_study(config: SimulationConfig, m: int = 32, null_count: int = 24,
                       alt_effect_sizes=None, procedure: str = "by", jobs: int = 1) -> StudyMetrics:
    """m parallel sequential experiments per replication, combined by a step-up procedure.

    FDR is counted as 0 in replications without rejections; TPR is absent when
    there are no true alternatives. Per-batch FDR/TPR paths are kept in
    ``trajectories`` under keys ``"fdr"`` and ``"tpr"`` (lists over replications).
    """
    if procedure not in PROCEDURES:
        raise InvalidArgument(f"unknown procedure {procedure!r}")
    sizes = _effect_sizes(config, m, null_count, alt_effect_sizes)
    results = _map(_run_multiple_replication,
                   [(config, r, sizes, procedure) for r in range(config.replications)], jobs)
    ok = [res for res, err in results if res is not None]
    failures = len(results) - len(ok)
    if failures:
        log.warning("%d of %d replications failed and were excluded", failures, len(results))
    metrics = StudyMetrics(replications=len(results), failures=failures)
    if ok:
        metrics.fdr = _rate([r[0][-1] for r in ok])
        metrics.tpr = _rate([r[1][-1] for r in ok])
        metrics.trajectories = {"fdr": [r[0] for r in ok], "tpr": [r[1] for r in ok]}
        metrics.records = [r[2].tolist() for r in ok]
    return metrics
