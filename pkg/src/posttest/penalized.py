"""Penalized and unpenalized GLM fitting on control-arm data.

The penalized objective is the sum form ``-loglik(theta) + sum_j J_lambda(theta_j)``.
Each IRLS step builds the weighted Gram matrix ``G = X'WX`` and ``c = X'Wz``
for the working response ``z`` and runs cyclic coordinate descent on the
quadratic model ``0.5 t'Gt - c't + penalty``. For the Gaussian family the
quadratic model is exact, so a single step suffices and whole lambda paths
are solved from one Gram matrix.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit

from .distributions import InvalidArgument
from .glm import (
    ETA_CLAMP,
    VARIANCE_FLOOR,
    Dataset,
    FamilyKind,
    GlmFamily,
    inverse_link,
    loglik_from_eta,
    variance_function,
)
from .penalties import PenaltyConfig, PenaltyKind, _threshold, diagnostics, total_penalty

__all__ = [
    "FittingError",
    "SeparationError",
    "RankDeficiencyError",
    "SingularInformationError",
    "FittedModel",
    "RidgeFit",
    "fit_ridge",
    "ridge_pilot_weights",
    "resolve_penalty",
    "fit_penalized",
    "lambda_max",
    "lambda_grid",
    "select_lambda",
    "fit_mle",
    "active_set_covariance",
    "bic",
]

log = logging.getLogger(__name__)

ADAPTIVE_EPS = 1e-6
RIDGE_GRID_SIZE = 10
# |eta| beyond this means fitted probabilities within e^-50 of 0/1 (or a Poisson mean of e^50)
ETA_SATURATION = 50.0


class FittingError(RuntimeError):
    """A fit diverged or could not be carried out."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = [] if trace is None else list(trace)


class SeparationError(FittingError):
    """Bernoulli MLE does not exist (complete or quasi-complete separation)."""


class RankDeficiencyError(FittingError):
    """Weighted Gram matrix is singular."""


class SingularInformationError(np.linalg.LinAlgError):
    """Active-set Fisher information is singular."""

    def __init__(self, message: str, coordinates: Sequence[int]):
        super().__init__(message)
        self.coordinates = tuple(coordinates)


@dataclass
class FittedModel:
    theta_hat: np.ndarray
    active_set: tuple[int, ...]
    lam: float
    sigma_hat: np.ndarray | None
    converged: bool
    iterations: int
    family: GlmFamily
    penalty: PenaltyConfig
    n_obs: int = 0
    loglik: float = float("nan")
    bic: float = float("nan")
    objective_trace: list[float] = field(default_factory=list, repr=False)
    path_failures: int = 0


class RidgeFit(NamedTuple):
    theta: np.ndarray
    converged: bool
    iterations: int
    effective_df: float


def _as_control(data) -> Dataset:
    if not isinstance(data, Dataset):
        data = Dataset.from_observations(data)
    if np.any(data.a != 0):
        raise InvalidArgument("fitting expects control-arm data only (a == 0)")
    return data


def bic(loglik: float, n_active: int, n: int) -> float:
    return -2.0 * loglik + n_active * math.log(n)


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _cd_gram(G, c, theta, lam, kind, gamma, scales, tol, max_sweeps):
    k = c.shape[0]
    g = G @ theta
    fallbacks = 0
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(k):
            v = G[j, j]
            if v <= 0.0:
                continue
            zj = c[j] - g[j] + v * theta[j]
            new, fb = _threshold(zj, v, lam, kind, gamma, scales[j])
            fallbacks += fb
            d = new - theta[j]
            if d != 0.0:
                for i in range(k):
                    g[i] += G[i, j] * d
                theta[j] = new
                if abs(d) > max_delta:
                    max_delta = abs(d)
        if max_delta < tol:
            return sweep + 1, fallbacks, True
    return max_sweeps, fallbacks, False


@njit(cache=True)
def _neg_loglik_kernel(y, eta, fam, disp):
    # drops terms that do not depend on eta
    s = 0.0
    for i in range(y.shape[0]):
        e = eta[i]
        if fam == 0:
            r = y[i] - e
            s += 0.5 * r * r / disp
        elif fam == 1:
            if e > 0:
                s += e + math.log1p(math.exp(-e)) - y[i] * e
            else:
                s += math.log1p(math.exp(e)) - y[i] * e
        else:
            if e > 700.0:
                e = 700.0
            s += math.exp(e) - y[i] * e
    return s


@njit(cache=True)
def _mean_var(eta, fam, disp, floor):
    n = eta.shape[0]
    mu = np.empty(n)
    w = np.empty(n)
    for i in range(n):
        e = eta[i]
        if fam == 0:
            mu[i] = e
            w[i] = 1.0
        elif fam == 1:
            if e < -700.0:
                e = -700.0
            if e >= 0:
                ex = math.exp(-e)
                mu[i] = 1.0 / (1.0 + ex)
            else:
                ex = math.exp(e)
                mu[i] = ex / (1.0 + ex)
            w[i] = max(mu[i] * (1.0 - mu[i]), floor)
        else:
            if e > 700.0:
                e = 700.0
            mu[i] = math.exp(e)
            w[i] = max(mu[i], floor)
    return mu, w


@njit(cache=True)
def _weighted_gram(X, w, z):
    n, k = X.shape
    G = np.zeros((k, k))
    c = np.zeros(k)
    for i in range(n):
        wi = w[i]
        wz = wi * z[i]
        for a in range(k):
            xa = X[i, a] * wi
            c[a] += X[i, a] * wz
            for b in range(a + 1):
                G[a, b] += xa * X[i, b]
    for a in range(k):
        for b in range(a):
            G[b, a] = G[a, b]
    return G, c


@njit(cache=True)
def _irls_cd(X, y, fam, disp, theta, lam, kind, gamma, scales, tol_outer, max_outer,
             tol_inner, max_inner, trace):
    """Returns (n_outer, converged, fallbacks, status).

    status 0 ok, 1 non-finite, 2 linear predictor saturated (the penalized
    objective has no finite minimizer, typically separation under a flat penalty).
    """
    eta = X @ theta
    obj = _neg_loglik_kernel(y, eta, fam, disp) + total_penalty(theta, lam, kind, gamma, scales)
    fallbacks = 0
    trace[0] = obj
    for it in range(max_outer):
        mu, w = _mean_var(eta, fam, disp, 1e-10)
        z = np.empty_like(eta)
        for i in range(eta.shape[0]):
            z[i] = eta[i] + (y[i] - mu[i]) / w[i]
            w[i] = w[i] / disp
        G, c = _weighted_gram(X, w, z)
        new = theta.copy()
        _, fb, _ = _cd_gram(G, c, new, lam, kind, gamma, scales, tol_inner, max_inner)
        fallbacks += fb
        new_eta = X @ new
        for i in range(new_eta.shape[0]):
            if not math.isfinite(new_eta[i]):
                return it + 1, False, fallbacks, 1
            if abs(new_eta[i]) > ETA_SATURATION:
                return it + 1, False, fallbacks, 2
        new_obj = _neg_loglik_kernel(y, new_eta, fam, disp) + total_penalty(new, lam, kind, gamma, scales)
        halvings = 0
        while new_obj > obj + 1e-12 * abs(obj) and halvings < 30:
            new = 0.5 * (theta + new)
            new_eta = X @ new
            new_obj = _neg_loglik_kernel(y, new_eta, fam, disp) + total_penalty(new, lam, kind, gamma, scales)
            halvings += 1
        delta = np.max(np.abs(new - theta))
        theta[:] = new
        eta = new_eta
        obj = new_obj
        if it + 1 < trace.shape[0]:
            trace[it + 1] = obj
        if not math.isfinite(obj):
            return it + 1, False, fallbacks, 1
        if delta < tol_outer:
            return it + 1, True, fallbacks, 0
    return max_outer, False, fallbacks, 0


# ---------------------------------------------------------------- core solver


class _Problem:
    """Caches the pieces of one control-arm problem shared along a lambda path."""

    def __init__(self, data: Dataset, family: GlmFamily):
        self.data = data
        self.family = family
        self.X = data.X
        self.y = data.y
        self.n, self.k = data.X.shape
        self.fam = family.kind.code
        self.disp = family.dispersion
        if family.kind is FamilyKind.GAUSSIAN:
            self.G = self.X.T @ self.X / self.disp
            self.c = self.X.T @ self.y / self.disp
            self.yy = float(self.y @ self.y)

    def loglik(self, theta: np.ndarray) -> float:
        if self.family.kind is FamilyKind.GAUSSIAN:
            rss = self.yy - 2.0 * self.disp * float(theta @ self.c) + self.disp * float(theta @ self.G @ theta)
            rss = max(rss, 0.0)
            return -0.5 * rss / self.disp - 0.5 * self.n * math.log(2.0 * math.pi * self.disp)
        return loglik_from_eta(self.family, self.y, self.X @ theta)

    def solve(self, lam: float, cfg: PenaltyConfig, scales: np.ndarray, theta0: np.ndarray,
              tol: float = 1e-7, max_outer: int = 1000):
        theta = np.array(theta0, dtype=float, copy=True)
        kind = cfg.kind.code
        gamma = cfg.gamma_value
        if self.family.kind is FamilyKind.GAUSSIAN:
            pen0 = total_penalty(theta, lam, kind, gamma, scales)
            obj0 = -self.loglik(theta) + pen0
            sweeps, fb, ok = _cd_gram(self.G, self.c, theta, float(lam), kind, gamma, scales,
                                      tol * 1e-3, 100_000)
            trace = [obj0, -self.loglik(theta) + total_penalty(theta, lam, kind, gamma, scales)]
            iterations = 1
            status = 0
        else:
            trace_buf = np.full(max_outer + 1, np.nan)
            iterations, ok, fb, status = _irls_cd(
                self.X, self.y, self.fam, self.disp, theta, float(lam), kind, gamma, scales,
                tol, max_outer, tol * 1e-2, 100_000, trace_buf,
            )
            trace = [float(t) for t in trace_buf[: iterations + 1] if not math.isnan(t)]
        if fb:
            diagnostics["threshold_fallback"] += int(fb)
        if status == 2:
            raise FittingError(f"fit diverged at lambda={lam:.6g} (linear predictor saturated)", trace)
        if status != 0 or not np.all(np.isfinite(theta)):
            raise FittingError(
                f"fit diverged at lambda={lam:.6g} (non-finite linear predictor)", trace
            )
        return theta, bool(ok), int(iterations), trace


def _finish(problem: _Problem, theta, lam, cfg, converged, iterations, trace,
            with_sigma=True) -> FittedModel:
    active = tuple(int(j) for j in np.flatnonzero(theta != 0.0))
    ll = problem.loglik(theta)
    model = FittedModel(
        theta_hat=theta,
        active_set=active,
        lam=float(lam),
        sigma_hat=None,
        converged=converged,
        iterations=iterations,
        family=problem.family,
        penalty=cfg,
        n_obs=problem.n,
        loglik=ll,
        bic=bic(ll, len(active), problem.n),
        objective_trace=list(trace),
    )
    if with_sigma:
        model.sigma_hat = active_set_covariance(model, problem.data)
    return model


# ---------------------------------------------------------------- ridge pilot


def fit_ridge(data, family: GlmFamily, lambda_ridge: float, *, tol: float = 1e-8,
              max_iter: int = 200) -> RidgeFit:
    """Minimize -loglik + (lambda_ridge / 2) * ||theta||^2 by ridge-regularized IRLS."""
    data = _as_control(data)
    if data.n < 2:
        raise InvalidArgument("ridge fit needs at least two observations")
    if not lambda_ridge > 0:
        raise InvalidArgument("lambda_ridge must be positive")
    X, y = data.X, data.y
    k = X.shape[1]
    fam, disp = family.kind.code, family.dispersion

    def objective(t):
        return _neg_loglik_kernel(y, X @ t, fam, disp) + 0.5 * lambda_ridge * float(t @ t)

    theta = np.zeros(k)
    ridge = lambda_ridge * np.eye(k)
    f_old = objective(theta)
    converged = False
    it = 0
    G = None
    for it in range(1, max_iter + 1):
        eta = X @ theta
        mu, w = _mean_var(eta, fam, disp, VARIANCE_FLOOR)
        z = eta + (y - mu) / w
        w = w / disp
        G = (X * w[:, None]).T @ X
        new = np.linalg.solve(G + ridge, X.T @ (w * z))
        step = new - theta
        # step-halving keeps the penalized objective monotone (needed for the log link)
        for _ in range(40):
            f_new = objective(theta + step)
            if np.isfinite(f_new) and f_new <= f_old + 1e-12 * abs(f_old):
                break
            step *= 0.5
        else:
            break
        theta = theta + step
        f_old = f_new
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    if G is None:
        G = (X.T @ X) / disp
    eta = X @ theta
    _, w = _mean_var(eta, fam, disp, VARIANCE_FLOOR)
    G = (X * (w / disp)[:, None]).T @ X
    df = float(np.trace(np.linalg.solve(G + ridge, G)))
    return RidgeFit(theta, converged, it, df)


def ridge_pilot_weights(data, family: GlmFamily, grid=None):
    """Adaptive-lasso weights 1/(|ridge coef| + 1e-6), ridge strength chosen by BIC.

    The BIC here uses the effective degrees of freedom tr((G + lambda I)^-1 G).
    Returns ``(weights, lambda_ridge)``.
    """
    data = _as_control(data)
    n = data.n
    if grid is None:
        grid = n * np.logspace(-4, -1, RIDGE_GRID_SIZE)
    best = None
    for lam in grid:
        fit = fit_ridge(data, family, float(lam))
        ll = loglik_from_eta(family, data.y, data.X @ fit.theta)
        score = -2.0 * ll + fit.effective_df * math.log(n)
        if best is None or score < best[0]:
            best = (score, float(lam), fit.theta)
    _, lam_r, theta = best
    return 1.0 / (np.abs(theta) + ADAPTIVE_EPS), lam_r


def resolve_penalty(data, family: GlmFamily, penalty: PenaltyConfig) -> PenaltyConfig:
    """Attach ridge-pilot weights to an AdaLasso config that has none."""
    if penalty.kind is PenaltyKind.ADALASSO and penalty.weights is None:
        w, _ = ridge_pilot_weights(data, family)
        return penalty.with_weights(w)
    return penalty


# ---------------------------------------------------------------- penalized fits


def fit_penalized(data, family: GlmFamily, penalty: PenaltyConfig, lam: float,
                  init=None, *, tol: float = 1e-7, max_outer: int = 1000) -> FittedModel:
    """Penalized maximum likelihood at a single lambda."""
    data = _as_control(data)
    if lam < 0:
        raise InvalidArgument("lambda must be nonnegative")
    penalty = resolve_penalty(data, family, penalty)
    problem = _Problem(data, family)
    scales = penalty.scales(problem.k)
    theta0 = np.zeros(problem.k) if init is None else np.asarray(init, dtype=float)
    theta, ok, its, trace = problem.solve(lam, penalty, scales, theta0, tol, max_outer)
    return _finish(problem, theta, lam, penalty, ok, its, trace)


def lambda_max(data, family: GlmFamily, penalty: PenaltyConfig) -> float:
    """Smallest lambda at which every penalized coefficient is zero."""
    data = _as_control(data)
    scales = penalty.scales(data.n_coef)
    theta = np.zeros(data.n_coef)
    if scales[0] == 0.0:
        ybar = float(np.mean(data.y))
        if family.kind is FamilyKind.GAUSSIAN:
            theta[0] = ybar
        elif family.kind is FamilyKind.BERNOULLI:
            ybar = min(max(ybar, 1e-10), 1 - 1e-10)
            theta[0] = math.log(ybar / (1 - ybar))
        else:
            theta[0] = math.log(max(ybar, 1e-10))
    mu = inverse_link(family, data.X @ theta)
    score = data.X.T @ (data.y - mu) / family.dispersion
    pen = scales > 0
    if not np.any(pen):
        return 0.0
    return float(np.max(np.abs(score[pen]) / scales[pen]))


def lambda_grid(lmax: float, size: int = 50, ratio: float = 1e-3) -> np.ndarray:
    return np.geomspace(lmax, lmax * ratio, size) if lmax > 0 else np.zeros(1)


def select_lambda(data, family: GlmFamily, penalty: PenaltyConfig, grid=None,
                  *, tol: float = 1e-7) -> tuple[float, FittedModel]:
    """BIC-selected fit along a warm-started path, largest lambda first.

    Ties go to the larger lambda. A path point whose fit fails is skipped and
    counted in ``path_failures`` of the returned model.
    """
    data = _as_control(data)
    penalty = resolve_penalty(data, family, penalty)
    problem = _Problem(data, family)
    scales = penalty.scales(problem.k)
    if grid is None:
        grid = lambda_grid(lambda_max(data, family, penalty))
    grid = np.sort(np.asarray(grid, dtype=float))[::-1]
    theta = np.zeros(problem.k)
    best = None
    failures = 0
    for lam in grid:
        try:
            theta_l, ok, its, trace = problem.solve(float(lam), penalty, scales, theta, tol)
        except FittingError as exc:
            failures += 1
            log.warning("lambda path point %.4g skipped: %s", lam, exc)
            continue
        theta = theta_l
        model = _finish(problem, theta_l.copy(), lam, penalty, ok, its, trace, with_sigma=False)
        if best is None or model.bic < best.bic:
            best = model
    if best is None:
        raise FittingError("every point of the lambda path failed")
    best.sigma_hat = active_set_covariance(best, data)
    best.path_failures = failures
    return best.lam, best


# ---------------------------------------------------------------- MLE


def fit_mle(data, family: GlmFamily, *, tol: float = 1e-8, max_iter: int = 200) -> FittedModel:
    """Unpenalized IRLS (Newton) fit; all coordinates active."""
    data = _as_control(data)
    X, y = data.X, data.y
    n, k = X.shape
    fam, disp = family.kind.code, family.dispersion
    theta = np.zeros(k)
    if family.kind is FamilyKind.BERNOULLI:
        ybar = float(np.mean(y))
        if ybar in (0.0, 1.0):
            raise SeparationError("all responses identical; Bernoulli MLE does not exist")
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ theta
        mu, w = _mean_var(eta, fam, disp, VARIANCE_FLOOR)
        trace.append(-loglik_from_eta(family, y, eta))
        z = eta + (y - mu) / w
        w = w / disp
        G = (X * w[:, None]).T @ X
        try:
            chol = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError("weighted Gram matrix is singular", trace) from None
        if np.min(np.diag(chol)) ** 2 < 1e-10 * np.max(np.diag(G)):
            raise RankDeficiencyError("weighted Gram matrix is numerically singular", trace)
        rhs = X.T @ (w * z)
        new = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        if not np.all(np.isfinite(new)):
            raise FittingError("MLE diverged (non-finite coefficients)", trace)
        delta = np.max(np.abs(new - theta))
        theta = new
        if family.kind is FamilyKind.BERNOULLI and np.max(np.abs(X @ theta)) > 30.0:
            raise SeparationError(
                f"Bernoulli MLE diverging at iteration {it} (separation)", trace
            )
        if delta < tol:
            converged = True
            break
    problem = _Problem(data, family)
    penalty = PenaltyConfig(PenaltyKind.NONE)
    model = _finish(problem, theta, 0.0, penalty, converged, it, trace, with_sigma=False)
    model.active_set = tuple(range(k))
    model.bic = bic(model.loglik, k, n)
    model.sigma_hat = active_set_covariance(model, data)
    return model


# ---------------------------------------------------------------- covariance


def active_set_covariance(model: FittedModel, data) -> np.ndarray:
    """Per-sqrt(n) covariance of theta_hat: inverse Fisher information on the active set.

    The block is ``[(1/n) sum_i V(mu_i) x_{A,i} x_{A,i}' / a(phi)]^{-1}`` at theta_hat;
    rows and columns outside the active set are zero, so Var(theta_hat) ~ sigma / n.
    """
    data = _as_control(data)
    k = data.n_coef
    sigma = np.zeros((k, k))
    active = np.asarray(model.active_set, dtype=int)
    if active.size == 0:
        return sigma
    fam = model.family
    mu = inverse_link(fam, data.X @ model.theta_hat)
    v = variance_function(fam, mu) / fam.dispersion
    XA = data.X[:, active]
    info = (XA * v[:, None]).T @ XA / data.n
    try:
        chol = np.linalg.cholesky(info)
        ok = np.min(np.diag(chol)) ** 2 > 1e-12 * max(np.max(np.diag(info)), 1e-300)
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        evals, evecs = np.linalg.eigh(info)
        null = evecs[:, 0]
        culprits = active[np.abs(null) > 0.1]
        raise SingularInformationError(
            f"active-set information is singular; collinear coordinates {culprits.tolist()}",
            culprits.tolist(),
        )
    inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(active.size)))
    inv = 0.5 * (inv + inv.T)
    sigma[np.ix_(active, active)] = inv
    return sigma
