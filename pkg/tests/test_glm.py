import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posttest.distributions import InvalidArgument
from posttest.glm import Dataset, FamilyKind, GlmFamily, Observation, inverse_link, log_likelihood, variance_function

GAUSS, BERN, POIS = GlmFamily(), GlmFamily(FamilyKind.BERNOULLI), GlmFamily(FamilyKind.POISSON)
FAMILIES = [GAUSS, BERN, POIS]


def simulate(family, n, k, rng, coef_scale=0.3):
    X = np.column_stack([np.ones(n), rng.standard_normal((n, k - 1))])
    a = rng.integers(0, 2, n)
    eta = X @ (coef_scale * rng.standard_normal(k))
    if family.kind is FamilyKind.GAUSSIAN:
        y = eta + rng.standard_normal(n)
    elif family.kind is FamilyKind.BERNOULLI:
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = rng.poisson(np.exp(eta)).astype(float)
    return Dataset(X, y, a)


class TestFamily:
    def test_dispersion_fixed_for_bernoulli(self):
        with pytest.raises(InvalidArgument):
            GlmFamily(FamilyKind.BERNOULLI, 2.0)

    @pytest.mark.parametrize("bad", [0.0, -1.0, math.inf])
    def test_dispersion_positive(self, bad):
        with pytest.raises(InvalidArgument):
            GlmFamily(FamilyKind.GAUSSIAN, bad)

    def test_aliases(self):
        assert GlmFamily.from_name("logit").kind is FamilyKind.BERNOULLI
        assert GlmFamily.from_name("identity").link_name == "identity"
        with pytest.raises(InvalidArgument):
            GlmFamily.from_name("probit")


class TestObservation:
    def test_intercept_required(self):
        with pytest.raises(InvalidArgument):
            Observation(1.0, (0.5, 1.0), 0)

    def test_arm_binary(self):
        with pytest.raises(InvalidArgument):
            Observation(1.0, (1.0,), 2)

    def test_dataset_round_trip(self):
        obs = [Observation(1.0, (1.0, 2.0), 0), Observation(0.0, (1.0, -1.0), 1)]
        d = Dataset.from_observations(obs)
        assert d.observations() == obs
        assert d.control().n == 1 and d.treatment().n == 1


class TestInverseLink:
    def test_values(self):
        assert inverse_link(BERN, 0.0) == 0.5
        assert inverse_link(POIS, 0.0) == 1.0
        assert inverse_link(GAUSS, 1.7) == 1.7

    def test_logit_saturation(self):
        mu, flag = inverse_link(BERN, np.array([-800.0]), return_flag=True)
        assert 0.0 < mu[0] <= 1e-300 and flag
        # representable region agrees with high-precision value
        assert inverse_link(BERN, -30.0) == pytest.approx(float(1 / (1 + math.exp(30))), rel=1e-14)
        grid = -np.linspace(30, 700, 200)
        vals = inverse_link(BERN, grid)
        assert np.all(np.diff(vals) < 0)

    def test_log_clamp(self):
        mu, flag = inverse_link(POIS, np.array([800.0]), return_flag=True)
        assert np.isfinite(mu[0]) and flag

    def test_non_finite(self):
        with pytest.raises(InvalidArgument):
            inverse_link(GAUSS, np.nan)

    @pytest.mark.parametrize("fam", FAMILIES)
    def test_strictly_monotone(self, fam):
        grid = np.linspace(-20, 20, 401)
        assert np.all(np.diff(inverse_link(fam, grid)) > 0)


class TestVariance:
    def test_values(self):
        assert variance_function(GAUSS, 12.3) == 1.0
        assert variance_function(BERN, 0.5) == 0.25
        assert variance_function(POIS, 3.2) == 3.2

    def test_floor(self):
        v, flag = variance_function(BERN, np.array([0.0]), return_flag=True)
        assert v[0] == 1e-10 and flag

    def test_domain(self):
        with pytest.raises(InvalidArgument):
            variance_function(BERN, 1.2)
        with pytest.raises(InvalidArgument):
            variance_function(POIS, -0.1)


class TestLogLikelihood:
    def test_gaussian_single(self):
        assert log_likelihood(GAUSS, [Observation(0.0, (1.0,), 0)], [0.0], [0.0]) == pytest.approx(
            -0.5 * math.log(2 * math.pi)
        )

    def test_bernoulli_single(self):
        assert log_likelihood(BERN, [Observation(1.0, (1.0,), 0)], [0.0]) == pytest.approx(math.log(0.5))

    def test_poisson_single(self):
        assert log_likelihood(POIS, [Observation(2.0, (1.0,), 0)], [0.0]) == pytest.approx(-1.693147, abs=1e-6)

    def test_treatment_effect_enters_only_treated(self):
        d = Dataset(np.array([[1.0, 2.0], [1.0, 2.0]]), np.array([0.0, 0.0]), np.array([0, 1]))
        ll0 = log_likelihood(GAUSS, d.control(), [0.0, 0.0], [0.0, 1.0])
        assert ll0 == pytest.approx(log_likelihood(GAUSS, d.control(), [0.0, 0.0]))
        # treated row has mean 2 under beta
        ll1 = log_likelihood(GAUSS, d.treatment(), [0.0, 0.0], [0.0, 1.0])
        assert ll1 == pytest.approx(-0.5 * math.log(2 * math.pi) - 2.0)

    def test_domain_errors(self):
        with pytest.raises(InvalidArgument):
            log_likelihood(BERN, [Observation(2.0, (1.0,), 0)], [0.0])
        with pytest.raises(InvalidArgument):
            log_likelihood(POIS, [Observation(-1.0, (1.0,), 0)], [0.0])

    @pytest.mark.parametrize("fam", FAMILIES)
    def test_gradient_in_beta_matches_finite_difference(self, fam, rng):
        from posttest.score_test import score_vector

        d = simulate(fam, 80, 4, rng).treatment()
        theta = 0.2 * rng.standard_normal(4)
        beta = 0.1 * rng.standard_normal(4)
        h = 1e-5
        fd = np.array([
            (log_likelihood(fam, d, theta, beta + h * e) - log_likelihood(fam, d, theta, beta - h * e)) / (2 * h)
            for e in np.eye(4)
        ])
        np.testing.assert_allclose(score_vector(theta, beta, d, fam), fd, rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("fam", FAMILIES)
    @given(seed=st.integers(0, 10_000))
    def test_concave(self, fam, seed):
        r = np.random.default_rng(seed)
        d = simulate(fam, 30, 3, r)
        a, b = r.standard_normal(6), r.standard_normal(6)
        ll = lambda v: log_likelihood(fam, d, v[:3], v[3:])
        assert ll(0.5 * (a + b)) >= 0.5 * (ll(a) + ll(b)) - 1e-9
