"""Treatment-arm score statistic for heterogeneous treatment effects.

For the canonical links used here d(mu)/d(beta) = V(mu) x, so the score of the
treatment arm at beta0 reduces to ``sum_i x_i (y_i - mu_i) / a(phi)`` with
``mu_i = g^{-1}(x_i'(theta_hat + beta0))``. A non-canonical family would need
the general form back.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .distributions import InvalidArgument, NoncentralChiSq, noncentral_chi2_survival
from .glm import Dataset, GlmFamily, inverse_link, variance_function
from .penalized import FittedModel, fit_mle, fit_penalized, select_lambda
from .penalties import PenaltyConfig, PenaltyKind

__all__ = [
    "NumericalError",
    "ScoreComponents",
    "TestResult",
    "Decision",
    "score_vector",
    "information_matrices",
    "v_matrix",
    "build_components",
    "test_statistic",
    "noncentrality_alternative",
    "fit_control",
    "run_single_post",
]


class NumericalError(ArithmeticError):
    """The statistic could not be evaluated to a finite value."""


class Decision(enum.Enum):
    REJECT = "reject"
    CONTINUE = "continue"


@dataclass(frozen=True)
class ScoreComponents:
    s_bar: np.ndarray
    info_beta: np.ndarray
    info_theta: np.ndarray
    v_bar: np.ndarray
    n_treat: int


@dataclass(frozen=True)
class TestResult:
    lambda_stat: float
    u0: float
    dof: int
    p_value_pointwise: float
    v_condition: float
    regularized: bool
    u0_clamped: bool = False

    __test__ = False  # not a pytest class


def _treatment(data) -> Dataset:
    if not isinstance(data, Dataset):
        data = Dataset.from_observations(data)
    if data.n == 0:
        raise InvalidArgument("treatment data is empty")
    if np.any(data.a != 1):
        raise InvalidArgument("score is computed on treatment-arm data only (a == 1)")
    return data


def _treatment_mean(theta_hat, beta0, data: Dataset, family: GlmFamily) -> np.ndarray:
    family.check_response(data.y)
    coef = np.asarray(theta_hat, dtype=float) + np.asarray(beta0, dtype=float)
    if coef.shape != (data.n_coef,):
        raise InvalidArgument(f"coefficient length {coef.shape} does not match {data.n_coef}")
    return inverse_link(family, data.X @ coef)


def score_vector(theta_hat, beta0, treat_data, family: GlmFamily) -> np.ndarray:
    """S = sum_i x_i (y_i - mu_i) / a(phi) over the treatment arm."""
    data = _treatment(treat_data)
    mu = _treatment_mean(theta_hat, beta0, data, family)
    return data.X.T @ (data.y - mu) / family.dispersion


def information_matrices(theta_hat, beta0, treat_data, family: GlmFamily):
    """(info_beta, info_theta), both (1/n) sum_i V(mu_i) x_i x_i' / a(phi).

    On the treatment arm eta depends on theta + beta only, so the two
    derivatives coincide; they are returned separately to keep the variance
    formula readable.
    """
    data = _treatment(treat_data)
    mu = _treatment_mean(theta_hat, beta0, data, family)
    v = variance_function(family, mu) / family.dispersion
    info = (data.X * v[:, None]).T @ data.X / data.n
    info = 0.5 * (info + info.T)
    return info, info.copy()


def v_matrix(info_beta, info_theta, sigma_hat) -> np.ndarray:
    """V = I_theta + I_theta Sigma I_theta, symmetrized."""
    info_theta = np.atleast_2d(np.asarray(info_theta, dtype=float))
    sigma_hat = np.atleast_2d(np.asarray(sigma_hat, dtype=float))
    v = info_theta + info_theta @ sigma_hat @ info_theta
    return 0.5 * (v + v.T)


def build_components(theta_hat, sigma_hat, beta0, treat_data, family: GlmFamily,
                     n_control: int | None = None) -> ScoreComponents:
    """Assemble S_bar, the information matrices and V_bar on the treatment arm.

    ``sigma_hat`` is the per-sqrt(n_control) covariance of theta_hat. When the
    arms differ in size it is rescaled by n_treat / n_control so that V_bar / n_treat
    is the covariance of S_bar.
    """
    data = _treatment(treat_data)
    n = data.n
    s = score_vector(theta_hat, beta0, data, family)
    info_b, info_t = information_matrices(theta_hat, beta0, data, family)
    sigma = np.asarray(sigma_hat, dtype=float)
    if n_control is not None and n_control != n:
        sigma = sigma * (n / n_control)
    return ScoreComponents(s / n, info_b, info_t, v_matrix(info_b, info_t, sigma), n)


def test_statistic(comp: ScoreComponents, beta0) -> TestResult:
    """Closed-form statistic S'(V/n)^{-1}S - beta0' I (V/n)^{-1} I beta0 and its p-value."""
    s = np.atleast_1d(np.asarray(comp.s_bar, dtype=float))
    k = s.shape[0]
    beta0 = np.zeros(k) if beta0 is None else np.atleast_1d(np.asarray(beta0, dtype=float))
    m = np.atleast_2d(comp.v_bar) / comp.n_treat
    m = 0.5 * (m + m.T)
    regularized = False
    try:
        cond = float(np.linalg.cond(m))
    except np.linalg.LinAlgError:
        cond = math.inf
    try:
        if not math.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        ridge = 1e-8 * np.trace(m) / k
        m = m + ridge * np.eye(k)
        regularized = True
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise NumericalError(
                f"V_bar/n not positive definite even after ridge (cond {cond:.3g})"
            ) from None

    def quad(vec):
        z = np.linalg.solve(chol, vec)
        return float(z @ z)

    stat = quad(s)
    ib0 = np.atleast_2d(comp.info_beta) @ beta0
    shift = quad(ib0) if np.any(beta0 != 0) else 0.0
    stat -= shift
    u0_raw = -shift
    u0 = max(0.0, u0_raw)
    if not math.isfinite(stat):
        raise NumericalError(
            f"non-finite statistic; cond(V/n)={cond:.3g}, "
            f"cond(I)={np.linalg.cond(np.atleast_2d(comp.info_beta)):.3g}"
        )
    p = noncentral_chi2_survival(max(stat, 0.0), NoncentralChiSq(k, u0))
    return TestResult(stat, u0, k, p, cond, regularized, u0_clamped=u0_raw < 0)


def noncentrality_alternative(beta, beta0, info_beta, v_bar, n: int) -> float:
    """u1 = (d - beta0)' I (V/n)^{-1} I (d + beta0) with d = beta - beta0."""
    beta = np.asarray(beta, dtype=float)
    beta0 = np.asarray(beta0, dtype=float)
    d = beta - beta0
    i = np.atleast_2d(info_beta)
    m = np.atleast_2d(v_bar) / n
    return float((d - beta0) @ i @ np.linalg.solve(m, i @ (d + beta0)))


def fit_control(control, family: GlmFamily, penalty: PenaltyConfig | None) -> FittedModel:
    """Nuisance fit: the plain MLE when unpenalized, else a penalized fit at the
    pinned level or the BIC-selected one."""
    if penalty is None or penalty.kind is PenaltyKind.NONE:
        return fit_mle(control, family)
    if penalty.fixed_lambda is not None:
        return fit_penalized(control, family, penalty, penalty.fixed_lambda)
    _, model = select_lambda(control, family, penalty)
    return model


def run_single_post(control_data, treat_data, family: GlmFamily, penalty: PenaltyConfig | None,
                    beta0=None, alpha: float = 0.05) -> tuple[TestResult, Decision]:
    """One pass of the single test: fit the control arm, score the treatment arm, decide."""
    if not (0.0 < alpha <= 1.0):
        raise InvalidArgument("alpha must lie in (0, 1]")
    control = control_data if isinstance(control_data, Dataset) else Dataset.from_observations(control_data)
    treat = _treatment(treat_data)
    if control.n == 0:
        raise InvalidArgument("control data is empty")
    if beta0 is None:
        beta0 = np.zeros(treat.n_coef)
    model = fit_control(control, family, penalty)
    comp = build_components(model.theta_hat, model.sigma_hat, beta0, treat, family, control.n)
    result = test_statistic(comp, beta0)
    decision = Decision.REJECT if result.p_value_pointwise <= alpha else Decision.CONTINUE
    return result, decision
