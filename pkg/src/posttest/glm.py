"""Exponential-family semantics for the three canonical GLMs used by the test.

Data are carried around as a :class:`Dataset` (design matrix with the
intercept column, response, arm indicator). :class:`Observation` is the
row-level view, convenient for file ingestion and small hand-built examples.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln

from .distributions import InvalidArgument

__all__ = [
    "FamilyKind",
    "GlmFamily",
    "Observation",
    "Dataset",
    "inverse_link",
    "variance_function",
    "log_likelihood",
    "loglik_from_eta",
    "ETA_CLAMP",
    "VARIANCE_FLOOR",
]

ETA_CLAMP = 700.0
VARIANCE_FLOOR = 1e-10


class FamilyKind(enum.Enum):
    GAUSSIAN = "gaussian"
    BERNOULLI = "bernoulli"
    POISSON = "poisson"

    @property
    def code(self) -> int:
        return _KIND_CODES[self]


_KIND_CODES = {FamilyKind.GAUSSIAN: 0, FamilyKind.BERNOULLI: 1, FamilyKind.POISSON: 2}

_ALIASES = {
    "gaussian": FamilyKind.GAUSSIAN,
    "normal": FamilyKind.GAUSSIAN,
    "identity": FamilyKind.GAUSSIAN,
    "bernoulli": FamilyKind.BERNOULLI,
    "binomial": FamilyKind.BERNOULLI,
    "logit": FamilyKind.BERNOULLI,
    "poisson": FamilyKind.POISSON,
    "log": FamilyKind.POISSON,
}


@dataclass(frozen=True)
class GlmFamily:
    """A canonical-link family with a known, fixed dispersion a(phi)."""

    kind: FamilyKind = FamilyKind.GAUSSIAN
    dispersion: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.dispersion) and self.dispersion > 0):
            raise InvalidArgument("dispersion must be positive")
        if self.kind is not FamilyKind.GAUSSIAN and self.dispersion != 1.0:
            raise InvalidArgument(f"{self.kind.value} family has dispersion fixed at 1")

    @classmethod
    def from_name(cls, name: str, dispersion: float = 1.0) -> "GlmFamily":
        try:
            kind = _ALIASES[name.lower()]
        except KeyError:
            raise InvalidArgument(f"unknown family or link {name!r}") from None
        return cls(kind, dispersion)

    @property
    def link_name(self) -> str:
        return {"gaussian": "identity", "bernoulli": "logit", "poisson": "log"}[self.kind.value]

    def check_response(self, y) -> None:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise InvalidArgument("response contains non-finite values")
        if self.kind is FamilyKind.BERNOULLI and not np.all((y == 0) | (y == 1)):
            raise InvalidArgument("Bernoulli response must be 0 or 1")
        if self.kind is FamilyKind.POISSON and (np.any(y < 0) or np.any(y != np.round(y))):
            raise InvalidArgument("Poisson response must be a nonnegative integer")


@dataclass(frozen=True)
class Observation:
    y: float
    x: tuple[float, ...]
    a: int = 0

    def __post_init__(self):
        if len(self.x) == 0 or self.x[0] != 1.0:
            raise InvalidArgument("x[0] must be the intercept 1")
        if self.a not in (0, 1):
            raise InvalidArgument(f"arm indicator must be 0 or 1, got {self.a!r}")
        if not math.isfinite(self.y):
            raise InvalidArgument("y must be finite")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented batch of observations; X includes the intercept column."""

    X: np.ndarray
    y: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(self.X, dtype=float)))
        y = np.ascontiguousarray(np.asarray(self.y, dtype=float).reshape(-1))
        a = np.asarray(self.a, dtype=np.int64).reshape(-1)
        if X.shape[0] != y.shape[0] or y.shape[0] != a.shape[0]:
            raise InvalidArgument(
                f"row mismatch: X {X.shape}, y {y.shape}, a {a.shape}"
            )
        if X.shape[0] and not np.all(X[:, 0] == 1.0):
            raise InvalidArgument("first column of X must be the intercept 1")
        if not np.all((a == 0) | (a == 1)):
            raise InvalidArgument("arm indicator must be 0 or 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)

    @classmethod
    def empty(cls, n_coef: int) -> "Dataset":
        return cls(np.empty((0, n_coef)), np.empty(0), np.empty(0, dtype=np.int64))

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Dataset":
        if not observations:
            raise InvalidArgument("no observations")
        return cls(
            np.array([o.x for o in observations], dtype=float),
            np.array([o.y for o in observations], dtype=float),
            np.array([o.a for o in observations], dtype=np.int64),
        )

    def observations(self) -> list[Observation]:
        return [
            Observation(float(y), tuple(float(v) for v in x), int(a))
            for x, y, a in zip(self.X, self.y, self.a)
        ]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]

    def arm(self, a: int) -> "Dataset":
        mask = self.a == a
        return Dataset(self.X[mask], self.y[mask], self.a[mask])

    def control(self) -> "Dataset":
        return self.arm(0)

    def treatment(self) -> "Dataset":
        return self.arm(1)

    @staticmethod
    def concat(parts: Iterable["Dataset"]) -> "Dataset":
        parts = list(parts)
        return Dataset(
            np.vstack([d.X for d in parts]),
            np.concatenate([d.y for d in parts]),
            np.concatenate([d.a for d in parts]),
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.a, other.a)
        )


def _as_eta(eta) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise InvalidArgument("linear predictor has non-finite values")
    return eta


def inverse_link(family: GlmFamily, eta, return_flag: bool = False):
    """Mean g^{-1}(eta); with ``return_flag`` also reports whether eta was clamped."""
    eta = _as_eta(eta)
    saturated = False
    kind = family.kind
    if kind is FamilyKind.GAUSSIAN:
        mu = eta.copy() if eta.ndim else float(eta)
    elif kind is FamilyKind.BERNOULLI:
        saturated = bool(np.any(eta < -ETA_CLAMP))
        e = np.maximum(eta, -ETA_CLAMP)
        pos = e >= 0
        # branch form keeps exp() argument nonpositive
        ex = np.exp(-np.abs(e))
        mu = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    else:
        saturated = bool(np.any(eta > ETA_CLAMP))
        mu = np.exp(np.minimum(eta, ETA_CLAMP))
    if np.ndim(mu) == 0:
        mu = float(mu)
    return (mu, saturated) if return_flag else mu


def variance_function(family: GlmFamily, mu, return_flag: bool = False):
    """V(mu) = b''(gamma(mu)), floored at VARIANCE_FLOOR."""
    mu = np.asarray(mu, dtype=float)
    if not np.all(np.isfinite(mu)):
        raise InvalidArgument("mean has non-finite values")
    kind = family.kind
    if kind is FamilyKind.GAUSSIAN:
        v = np.ones_like(mu)
    elif kind is FamilyKind.BERNOULLI:
        if np.any((mu < 0) | (mu > 1)):
            raise InvalidArgument("Bernoulli mean must lie in [0, 1]")
        v = mu * (1.0 - mu)
    else:
        if np.any(mu < 0):
            raise InvalidArgument("Poisson mean must be nonnegative")
        v = mu.copy()
    floored = bool(np.any(v < VARIANCE_FLOOR))
    v = np.maximum(v, VARIANCE_FLOOR)
    if v.ndim == 0:
        v = float(v)
    return (v, floored) if return_flag else v


def loglik_from_eta(family: GlmFamily, y: np.ndarray, eta: np.ndarray) -> float:
    """Full log-likelihood (including c(y, phi)) given the linear predictor."""
    kind = family.kind
    if kind is FamilyKind.GAUSSIAN:
        phi = family.dispersion
        r = y - eta
        return float(-0.5 * np.sum(r * r) / phi - 0.5 * y.shape[0] * math.log(2.0 * math.pi * phi))
    if kind is FamilyKind.BERNOULLI:
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    e = np.minimum(eta, ETA_CLAMP)
    return float(np.sum(y * e - np.exp(e) - gammaln(y + 1.0)))


def log_likelihood(family: GlmFamily, data, theta, beta=None) -> float:
    """Log-likelihood of ``data`` under eta = X theta + (X beta) a.

    ``data`` is a :class:`Dataset` or a sequence of :class:`Observation`.
    """
    if not isinstance(data, Dataset):
        data = Dataset.from_observations(data)
    family.check_response(data.y)
    theta = np.asarray(theta, dtype=float)
    eta = data.X @ theta
    if beta is not None:
        eta = eta + (data.X @ np.asarray(beta, dtype=float)) * data.a
    return loglik_from_eta(family, data.y, _as_eta(eta))
