"""Online layer: batch ingestion, the running-minimum p-value, stopping, checkpoints.

States are immutable; :func:`ingest_batch` returns a new state and leaves its
argument untouched, so a caller can keep old snapshots around for replay.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .distributions import InvalidArgument
from .glm import Dataset, FamilyKind, GlmFamily
from .penalized import FittedModel, FittingError
from .penalties import PenaltyConfig, PenaltyKind
from .score_test import build_components, fit_control, test_statistic

__all__ = [
    "Status",
    "ExperimentStatus",
    "StatRecord",
    "Batch",
    "ExperimentState",
    "SequenceError",
    "CheckpointError",
    "new_experiment",
    "ingest_batch",
    "current_p_value",
    "checkpoint",
    "restore",
    "CHECKPOINT_VERSION",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_FORMAT = "posttest-checkpoint"


class SequenceError(RuntimeError):
    """Batch out of order, or ingestion after a terminal decision."""


class CheckpointError(ValueError):
    pass


class Status(enum.Enum):
    RUNNING = "running"
    REJECTED = "rejected"
    ACCEPTED = "accepted_at_horizon"


@dataclass(frozen=True)
class ExperimentStatus:
    kind: Status = Status.RUNNING
    at: int | None = None  # per-arm cumulative count at rejection

    def __str__(self):
        if self.kind is Status.REJECTED:
            return f"RejectedAt({self.at})"
        return {Status.RUNNING: "Running", Status.ACCEPTED: "AcceptedAtHorizon"}[self.kind]

    @property
    def terminal(self) -> bool:
        return self.kind is not Status.RUNNING


@dataclass(frozen=True)
class StatRecord:
    """One row of the trajectory. ``lambda_stat``/``p_pointwise`` are None for skipped batches."""

    n_control: int
    n_treat: int
    lambda_stat: float | None
    p_pointwise: float | None
    running_min_p: float
    skipped: str = ""


@dataclass(frozen=True)
class Batch:
    observations: Dataset
    sequence_number: int

    def __post_init__(self):
        if not isinstance(self.observations, Dataset):
            object.__setattr__(self, "observations", Dataset.from_observations(self.observations))
        if self.observations.n == 0:
            raise InvalidArgument("a batch needs at least one observation")
        if self.sequence_number < 1:
            raise InvalidArgument("sequence numbers start at 1")


@dataclass(frozen=True)
class ExperimentState:
    experiment_id: str
    family: GlmFamily
    penalty: PenaltyConfig | None
    beta0: tuple[float, ...]
    alpha: float
    max_horizon: int
    batch_size_nominal: int
    control_data: Dataset
    treat_data: Dataset
    stat_history: tuple[StatRecord, ...] = ()
    running_min_p: float = 1.0
    status: ExperimentStatus = ExperimentStatus()
    rng_seed: int = 0
    stop_on_reject: bool = True
    last_sequence: int = 0
    first_reject_at: int | None = None
    # most recent control fit; runtime cache only, not checkpointed
    last_model: FittedModel | None = field(default=None, compare=False, repr=False)

    @property
    def n_coef(self) -> int:
        return len(self.beta0)

    @property
    def n_control(self) -> int:
        return self.control_data.n

    @property
    def n_treat(self) -> int:
        return self.treat_data.n


def new_experiment(experiment_id: str, family: GlmFamily, penalty: PenaltyConfig | None, beta0,
                   alpha: float = 0.05, max_horizon: int = 1000, batch_size_nominal: int = 100,
                   rng_seed: int = 0, stop_on_reject: bool = True) -> ExperimentState:
    beta0 = tuple(float(v) for v in np.asarray(beta0, dtype=float).reshape(-1))
    if len(beta0) < 1:
        raise InvalidArgument("beta0 must have at least the intercept entry")
    if not (0.0 < alpha <= 1.0):
        raise InvalidArgument("alpha must lie in (0, 1]")
    if max_horizon < 1 or batch_size_nominal < 1:
        raise InvalidArgument("horizon and batch size must be positive")
    k = len(beta0)
    return ExperimentState(
        experiment_id=str(experiment_id),
        family=family,
        penalty=penalty,
        beta0=beta0,
        alpha=float(alpha),
        max_horizon=int(max_horizon),
        batch_size_nominal=int(batch_size_nominal),
        control_data=Dataset.empty(k),
        treat_data=Dataset.empty(k),
        rng_seed=int(rng_seed),
        stop_on_reject=stop_on_reject,
    )


def _append(acc: Dataset, part: Dataset) -> Dataset:
    if part.n == 0:
        return acc
    return Dataset.concat([acc, part]) if acc.n else part


def ingest_batch(state: ExperimentState, batch: Batch) -> ExperimentState:
    """Append a batch, refit on everything accumulated, update p-value and status.

    Before each arm holds at least p + 2 observations the batch is stored but no
    statistic is computed. A control fit that fails (e.g. separation in the
    unpenalized fit) marks the batch as skipped; the running minimum is unchanged.
    """
    if state.status.terminal:
        raise SequenceError(f"experiment {state.experiment_id} already decided: {state.status}")
    if batch.sequence_number != state.last_sequence + 1:
        raise SequenceError(
            f"expected batch {state.last_sequence + 1}, got {batch.sequence_number}"
        )
    obs = batch.observations
    if obs.n_coef != state.n_coef:
        raise InvalidArgument(f"batch has {obs.n_coef} coefficients, experiment has {state.n_coef}")
    state.family.check_response(obs.y)

    control = _append(state.control_data, obs.control())
    treat = _append(state.treat_data, obs.treatment())
    n_c, n_t = control.n, treat.n
    gate = state.n_coef + 1
    lam = p = None
    skipped = ""
    model = state.last_model
    if n_c < gate or n_t < gate:
        skipped = "below minimum sample size"
    else:
        try:
            model = fit_control(control, state.family, state.penalty)
        except FittingError as exc:
            skipped = f"control fit failed: {exc}"
            log.info("experiment %s batch %d skipped: %s", state.experiment_id, batch.sequence_number, exc)
        else:
            beta0 = np.asarray(state.beta0)
            comp = build_components(model.theta_hat, model.sigma_hat, beta0, treat, state.family, n_c)
            res = test_statistic(comp, beta0)
            lam, p = res.lambda_stat, res.p_value_pointwise

    running = state.running_min_p if p is None else min(state.running_min_p, p)
    n_now = min(n_c, n_t)
    first = state.first_reject_at
    if first is None and running <= state.alpha:
        first = n_now
    at_horizon = n_now >= state.max_horizon
    if first is not None and (state.stop_on_reject or at_horizon):
        status = ExperimentStatus(Status.REJECTED, first)
    elif at_horizon:
        status = ExperimentStatus(Status.ACCEPTED)
    else:
        status = ExperimentStatus()
    record = StatRecord(n_c, n_t, lam, p, running, skipped)
    return replace(
        state,
        control_data=control,
        treat_data=treat,
        stat_history=state.stat_history + (record,),
        running_min_p=running,
        status=status,
        last_sequence=batch.sequence_number,
        first_reject_at=first,
        last_model=model,
    )


def current_p_value(state: ExperimentState) -> float:
    """The always-valid p-value: running minimum of the pointwise p-values so far."""
    if not state.stat_history:
        raise InvalidArgument("no batches ingested yet")
    return state.running_min_p


# ---------------------------------------------------------------- checkpoints


def _dataset_to_json(d: Dataset) -> dict:
    return {"X": d.X.tolist(), "y": d.y.tolist(), "a": d.a.tolist()}


def _dataset_from_json(obj: dict, k: int) -> Dataset:
    X = np.asarray(obj["X"], dtype=float).reshape(-1, k)
    return Dataset(X, np.asarray(obj["y"], dtype=float), np.asarray(obj["a"], dtype=np.int64))


def _penalty_to_json(p: PenaltyConfig | None):
    if p is None:
        return None
    return {"kind": p.kind.value, "gamma": p.gamma, "weights": None if p.weights is None else list(p.weights),
            "penalize_intercept": p.penalize_intercept, "fixed_lambda": p.fixed_lambda}


def _penalty_from_json(obj) -> PenaltyConfig | None:
    if obj is None:
        return None
    w = obj["weights"]
    return PenaltyConfig(PenaltyKind(obj["kind"]), obj["gamma"], None if w is None else tuple(w),
                         obj["penalize_intercept"], obj["fixed_lambda"])


def _state_payload(s: ExperimentState) -> dict:
    return {
        "experiment_id": s.experiment_id,
        "family": {"kind": s.family.kind.value, "dispersion": s.family.dispersion},
        "penalty": _penalty_to_json(s.penalty),
        "beta0": list(s.beta0),
        "alpha": s.alpha,
        "max_horizon": s.max_horizon,
        "batch_size_nominal": s.batch_size_nominal,
        "control_data": _dataset_to_json(s.control_data),
        "treat_data": _dataset_to_json(s.treat_data),
        "stat_history": [
            [r.n_control, r.n_treat, r.lambda_stat, r.p_pointwise, r.running_min_p, r.skipped]
            for r in s.stat_history
        ],
        "running_min_p": s.running_min_p,
        "status": {"kind": s.status.kind.value, "at": s.status.at},
        "rng_seed": s.rng_seed,
        "stop_on_reject": s.stop_on_reject,
        "last_sequence": s.last_sequence,
        "first_reject_at": s.first_reject_at,
    }


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def checkpoint(state: ExperimentState) -> bytes:
    """Serialize to versioned JSON with a sha256 over the canonical payload."""
    payload = _state_payload(state)
    digest = hashlib.sha256(_canonical(payload)).hexdigest()
    doc = {"format": _FORMAT, "version": CHECKPOINT_VERSION, "sha256": digest, "state": payload}
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False).encode() + b"\n"


def restore(stream: bytes) -> ExperimentState:
    """Inverse of :func:`checkpoint`; raises :class:`CheckpointError` on any defect."""
    try:
        doc = json.loads(stream.decode() if isinstance(stream, (bytes, bytearray)) else stream)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint is truncated or not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != _FORMAT:
        raise CheckpointError("not a posttest checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('version')!r} unsupported (expected {CHECKPOINT_VERSION})"
        )
    payload = doc.get("state")
    if not isinstance(payload, dict) or hashlib.sha256(_canonical(payload)).hexdigest() != doc.get("sha256"):
        raise CheckpointError("checkpoint checksum mismatch")
    try:
        k = len(payload["beta0"])
        history = tuple(
            StatRecord(int(a), int(b), c, d, float(e), str(f))
            for a, b, c, d, e, f in payload["stat_history"]
        )
        st = payload["status"]
        fam = payload["family"]
        return ExperimentState(
            experiment_id=payload["experiment_id"],
            family=GlmFamily(FamilyKind(fam["kind"]), float(fam["dispersion"])),
            penalty=_penalty_from_json(payload["penalty"]),
            beta0=tuple(float(v) for v in payload["beta0"]),
            alpha=float(payload["alpha"]),
            max_horizon=int(payload["max_horizon"]),
            batch_size_nominal=int(payload["batch_size_nominal"]),
            control_data=_dataset_from_json(payload["control_data"], k),
            treat_data=_dataset_from_json(payload["treat_data"], k),
            stat_history=history,
            running_min_p=float(payload["running_min_p"]),
            status=ExperimentStatus(Status(st["kind"]), st["at"]),
            rng_seed=int(payload["rng_seed"]),
            stop_on_reject=bool(payload["stop_on_reject"]),
            last_sequence=int(payload["last_sequence"]),
            first_reject_at=payload["first_reject_at"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
