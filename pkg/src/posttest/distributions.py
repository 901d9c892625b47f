"""Chi-squared tails, the multivariate normal log-density and a Cholesky helper.

Everything here is self-contained: the central chi-squared survival function
is evaluated through the regularized incomplete gamma function (power series
below ``a + 1``, Lentz continued fraction above), and the noncentral version
as a Poisson mixture of central terms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "InvalidArgument",
    "FactorizationError",
    "NoncentralChiSq",
    "gamma_q",
    "chi2_survival",
    "noncentral_chi2_survival",
    "noncentral_chi2_quantile",
    "mvn_log_density",
    "cholesky_factor",
]

_EPS = 1e-16
_TINY = 1e-300
LOG_2PI = math.log(2.0 * math.pi)


class InvalidArgument(ValueError):
    """Raised when an argument falls outside a function's domain."""


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky factorization failed at ``pivot`` (0-based)."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


@dataclass(frozen=True)
class NoncentralChiSq:
    """Noncentral chi-squared law with ``df`` degrees of freedom and noncentrality ``nc``."""

    df: float
    nc: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.df) and self.df > 0):
            raise InvalidArgument(f"df must be positive and finite, got {self.df!r}")
        if not (math.isfinite(self.nc) and self.nc >= 0):
            raise InvalidArgument(f"nc must be nonnegative and finite, got {self.nc!r}")

    def sf(self, x: float) -> float:
        return noncentral_chi2_survival(x, self)

    def ppf(self, p: float) -> float:
        return noncentral_chi2_quantile(p, self)


def _gamma_p_series(a: float, x: float) -> float:
    # P(a, x) by the power series; converges quickly for x < a + 1
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_cf(a: float, x: float) -> float:
    # Q(a, x) by modified Lentz continued fraction; used for x >= a + 1
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise InvalidArgument("a must be positive")
    if x < 0:
        raise InvalidArgument("x must be nonnegative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(a, x))
    return _gamma_q_cf(a, x)


def chi2_survival(x: float, df: float) -> float:
    """Central chi-squared survival function Pr(X >= x)."""
    return gamma_q(0.5 * df, 0.5 * x)


def _check_x(x) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise InvalidArgument(f"x must be finite, got {x!r}")
    if x < 0:
        raise InvalidArgument(f"x must be nonnegative, got {x!r}")
    return x


def noncentral_chi2_survival(x: float, dist: NoncentralChiSq, tail_mass: float = 1e-12) -> float:
    """Pr(X >= x) for X ~ chi2_df(nc).

    Poisson(nc/2)-weighted sum of central survival functions with df + 2j
    degrees of freedom. Summation stops once the accumulated Poisson weight
    exceeds ``1 - tail_mass`` and the latest term is below 1e-14.
    """
    x = _check_x(x)
    if x == 0.0:
        return 1.0
    half = 0.5 * dist.nc
    if half == 0.0:
        return chi2_survival(x, dist.df)
    log_half = math.log(half)
    total = 0.0
    weight_sum = 0.0
    j = 0
    while True:
        log_w = -half + j * log_half - math.lgamma(j + 1.0)
        w = math.exp(log_w)
        term = w * chi2_survival(x, dist.df + 2.0 * j)
        total += term
        weight_sum += w
        # past the Poisson mode the weights only shrink
        if j > half and weight_sum >= 1.0 - tail_mass and term < 1e-14:
            break
        if j > half + 50.0 * math.sqrt(half + 1.0) + 200:
            break
        j += 1
    return min(1.0, max(0.0, total))


def noncentral_chi2_quantile(p: float, dist: NoncentralChiSq) -> float:
    """Smallest x with Pr(X <= x) = p, by bisection."""
    p = float(p)
    if not (0.0 < p < 1.0):
        raise InvalidArgument(f"p must lie in (0, 1), got {p!r}")
    target = 1.0 - p
    lo = 0.0
    hi = dist.df + dist.nc + 40.0 * math.sqrt(2.0 * dist.df + 4.0 * dist.nc) + 40.0
    while noncentral_chi2_survival(hi, dist) > target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if noncentral_chi2_survival(mid, dist) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def cholesky_factor(cov, sym_tol: float = 1e-10, pivot_tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular L with L @ L.T == cov.

    Raises FactorizationError carrying the failing pivot index when a pivot
    drops below ``pivot_tol``, and InvalidArgument for asymmetric input.
    """
    a = np.array(cov, dtype=float, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgument(f"cov must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("cov has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > sym_tol:
        raise InvalidArgument("cov is not symmetric")
    k = a.shape[0]
    L = np.zeros_like(a)
    for j in range(k):
        piv = a[j, j] - L[j, :j] @ L[j, :j]
        if piv < pivot_tol:
            raise FactorizationError(
                f"matrix not positive definite: pivot {j} = {piv:.3e}", pivot=j
            )
        L[j, j] = math.sqrt(piv)
        if j + 1 < k:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def _forward_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty_like(b, dtype=float)
    for i in range(L.shape[0]):
        out[i] = (b[i] - L[i, :i] @ out[:i]) / L[i, i]
    return out


def mvn_log_density(x, mean, cov) -> float:
    """log of the N(mean, cov) density evaluated at x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    k = x.shape[0]
    if mean.shape != (k,) or cov.shape != (k, k):
        raise InvalidArgument(
            f"dimension mismatch: x {x.shape}, mean {mean.shape}, cov {cov.shape}"
        )
    L = cholesky_factor(cov)
    z = _forward_solve(L, x - mean)
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (k * LOG_2PI + log_det + float(z @ z))
