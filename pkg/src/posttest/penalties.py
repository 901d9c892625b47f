"""Adaptive lasso, SCAD and MCP penalties and their univariate proximal maps.

The scalar kernels are compiled with numba so the coordinate-descent loop in
:mod:`posttest.penalized` can call them directly; the Python-facing
:func:`penalty_value` and :func:`threshold_update` wrap the same kernels.
"""
from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .distributions import InvalidArgument

__all__ = [
    "PenaltyKind",
    "PenaltyConfig",
    "penalty_value",
    "threshold_update",
    "diagnostics",
    "DEFAULT_GAMMA",
]

# incremented by threshold_update whenever the golden-section fallback runs
diagnostics: Counter = Counter()


class PenaltyKind(enum.Enum):
    NONE = "none"
    ADALASSO = "adalasso"
    SCAD = "scad"
    MCP = "mcp"

    @property
    def code(self) -> int:
        return _CODES[self]


_CODES = {PenaltyKind.NONE: 0, PenaltyKind.ADALASSO: 1, PenaltyKind.SCAD: 2, PenaltyKind.MCP: 3}
DEFAULT_GAMMA = {PenaltyKind.SCAD: 3.7, PenaltyKind.MCP: 3.0}


@dataclass(frozen=True)
class PenaltyConfig:
    """Which penalty to apply, its concavity and (for AdaLasso) per-coefficient weights.

    ``fixed_lambda`` pins the penalty level; when absent the level is chosen by
    BIC along a path. AdaLasso with ``fixed_lambda=1`` is the untuned
    ``sum_j w_j |theta_j|`` form.
    """

    kind: PenaltyKind = PenaltyKind.ADALASSO
    gamma: float | None = None
    weights: tuple[float, ...] | None = field(default=None, compare=True)
    penalize_intercept: bool = True
    fixed_lambda: float | None = None

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", PenaltyKind(self.kind.lower()))
        if self.gamma is None and self.kind in DEFAULT_GAMMA:
            object.__setattr__(self, "gamma", DEFAULT_GAMMA[self.kind])
        if self.kind is PenaltyKind.SCAD and not self.gamma > 2:
            raise InvalidArgument("SCAD requires gamma > 2")
        if self.kind is PenaltyKind.MCP and not self.gamma > 1:
            raise InvalidArgument("MCP requires gamma > 1")
        if self.weights is not None:
            w = tuple(float(v) for v in self.weights)
            if not all(math.isfinite(v) and v >= 0 for v in w):
                raise InvalidArgument("penalty weights must be finite and nonnegative")
            object.__setattr__(self, "weights", w)
        if self.fixed_lambda is not None:
            lam = float(self.fixed_lambda)
            if not (math.isfinite(lam) and lam >= 0):
                raise InvalidArgument("fixed_lambda must be finite and nonnegative")
            object.__setattr__(self, "fixed_lambda", lam)

    def with_weights(self, weights) -> "PenaltyConfig":
        return replace(self, weights=tuple(np.asarray(weights, float)))

    @property
    def gamma_value(self) -> float:
        return float(self.gamma) if self.gamma is not None else 0.0

    def scales(self, n_coef: int) -> np.ndarray:
        """Per-coordinate multipliers of lambda; zero means unpenalized."""
        if self.kind is PenaltyKind.NONE:
            return np.zeros(n_coef)
        if self.kind is PenaltyKind.ADALASSO and self.weights is not None:
            if len(self.weights) != n_coef:
                raise InvalidArgument(
                    f"expected {n_coef} adaptive weights, got {len(self.weights)}"
                )
            s = np.array(self.weights, dtype=float)
        else:
            s = np.ones(n_coef)
        if not self.penalize_intercept:
            s[0] = 0.0
        return s


@njit(cache=True)
def _penalty(theta, lam, kind, gamma, scale):
    t = abs(theta)
    if kind == 0 or lam <= 0.0 or scale == 0.0:
        return 0.0
    if kind == 1:
        return lam * scale * t
    if kind == 2:
        if t <= lam:
            return lam * t
        if t < gamma * lam:
            return (2.0 * gamma * lam * t - t * t - lam * lam) / (2.0 * (gamma - 1.0))
        return lam * lam * (gamma + 1.0) / 2.0
    # MCP
    if t <= gamma * lam:
        return lam * t - t * t / (2.0 * gamma)
    return 0.5 * gamma * lam * lam


@njit(cache=True)
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _coord_objective(theta, z, v, lam, kind, gamma, scale):
    return 0.5 * v * theta * theta - z * theta + _penalty(theta, lam, kind, gamma, scale)


@njit(cache=True)
def _golden(lo, hi, z, v, lam, kind, gamma, scale):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _coord_objective(c, z, v, lam, kind, gamma, scale)
    fd = _coord_objective(d, z, v, lam, kind, gamma, scale)
    for _ in range(200):
        if b - a <= 1e-14 * max(1.0, abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _coord_objective(c, z, v, lam, kind, gamma, scale)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _coord_objective(d, z, v, lam, kind, gamma, scale)
    return 0.5 * (a + b)


@njit(cache=True)
def _polish(a, b, t, z, v, lam, kind, gamma, scale):
    # each piece is an exact quadratic, so the parabola through three points
    # recovers its vertex past the sqrt(eps) resolution of golden section
    m = 0.5 * (a + b)
    h = 0.5 * (b - a)
    if h <= 0.0:
        return t
    fa = _coord_objective(a, z, v, lam, kind, gamma, scale)
    fm = _coord_objective(m, z, v, lam, kind, gamma, scale)
    fb = _coord_objective(b, z, v, lam, kind, gamma, scale)
    curv = fa - 2.0 * fm + fb
    if curv <= 0.0:
        return t
    return min(max(m - 0.5 * h * (fb - fa) / curv, a), b)


@njit(cache=True)
def _fallback(z, v, lam, kind, gamma, scale):
    # minimize over [0, |z|/v] piecewise between the penalty's knots, then restore the sign
    az = abs(z)
    hi = az / v
    knots = np.empty(4)
    knots[0] = 0.0
    nk = 1
    if kind == 2:
        for b in (lam, gamma * lam):
            if b < hi:
                knots[nk] = b
                nk += 1
    else:
        if gamma * lam < hi:
            knots[nk] = gamma * lam
            nk += 1
    knots[nk] = hi
    nk += 1
    best = 0.0
    best_f = _coord_objective(0.0, az, v, lam, kind, gamma, scale)
    for i in range(nk - 1):
        a = knots[i]
        b = knots[i + 1]
        for cand in (b, _polish(a, b, _golden(a, b, az, v, lam, kind, gamma, scale),
                                az, v, lam, kind, gamma, scale)):
            f = _coord_objective(cand, az, v, lam, kind, gamma, scale)
            if f < best_f:
                best_f = f
                best = cand
    return best if z >= 0 else -best


@njit(cache=True)
def _threshold(z, v, lam, kind, gamma, scale):
    """argmin_t 0.5*v*t^2 - z*t + pen(t); returns (t, used_fallback)."""
    if kind == 0 or lam <= 0.0 or scale == 0.0:
        return z / v, 0
    if kind == 1:
        return _soft(z, lam * scale) / v, 0
    az = abs(z)
    if kind == 3:
        if v * gamma > 1.0:
            if az <= v * gamma * lam:
                return _soft(z, lam) / (v - 1.0 / gamma), 0
            return z / v, 0
        return _fallback(z, v, lam, kind, gamma, scale), 1
    if v * (gamma - 1.0) > 1.0:
        if az <= lam * (v + 1.0):
            return _soft(z, lam) / v, 0
        if az <= v * gamma * lam:
            return _soft(z, gamma * lam / (gamma - 1.0)) / (v - 1.0 / (gamma - 1.0)), 0
        return z / v, 0
    return _fallback(z, v, lam, kind, gamma, scale), 1


def _scale_for(cfg: PenaltyConfig, j: int) -> float:
    if cfg.kind is PenaltyKind.NONE:
        return 0.0
    if j == 0 and not cfg.penalize_intercept:
        return 0.0
    if cfg.kind is PenaltyKind.ADALASSO and cfg.weights is not None:
        return cfg.weights[j]
    return 1.0


def penalty_value(theta_j: float, lam: float, cfg: PenaltyConfig, j: int = 1) -> float:
    """J_lambda(theta_j) for coordinate ``j``; AdaLasso is lambda * w_j * |theta_j|."""
    if lam < 0:
        raise InvalidArgument("lambda must be nonnegative")
    return float(_penalty(float(theta_j), float(lam), cfg.kind.code, cfg.gamma_value, _scale_for(cfg, j)))


def threshold_update(z: float, step_curvature: float, lam: float, cfg: PenaltyConfig, j: int = 1) -> float:
    """Minimizer of 0.5*v*(t - z/v)**2 + J_lambda(t) for curvature v."""
    if not step_curvature > 0:
        raise InvalidArgument("step curvature must be positive")
    if lam < 0:
        raise InvalidArgument("lambda must be nonnegative")
    t, fb = _threshold(
        float(z), float(step_curvature), float(lam), cfg.kind.code, cfg.gamma_value, _scale_for(cfg, j)
    )
    if fb:
        diagnostics["threshold_fallback"] += 1
    return float(t)


@njit(cache=True)
def total_penalty(theta, lam, kind, gamma, scales):
    s = 0.0
    for j in range(theta.shape[0]):
        s += _penalty(theta[j], lam, kind, gamma, scales[j])
    return s
