import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from posttest.distributions import (
    FactorizationError,
    InvalidArgument,
    NoncentralChiSq,
    chi2_survival,
    cholesky_factor,
    gamma_q,
    mvn_log_density,
    noncentral_chi2_quantile,
    noncentral_chi2_survival,
)


def gauss_jordan_inverse(a):
    """Independent oracle: plain Gauss-Jordan elimination with partial pivoting."""
    n = len(a)
    m = [list(map(float, row)) + [1.0 if i == j else 0.0 for j in range(n)] for i, row in enumerate(a)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        m[col], m[piv] = m[piv], m[col]
        d = m[col][col]
        m[col] = [v / d for v in m[col]]
        for r in range(n):
            if r != col:
                f = m[r][col]
                m[r] = [vr - f * vc for vr, vc in zip(m[r], m[col])]
    return np.array([row[n:] for row in m])


class TestCentral:
    def test_survival_at_origin(self):
        assert noncentral_chi2_survival(0.0, NoncentralChiSq(3, 0)) == 1.0

    def test_five_percent_point_df1(self):
        assert noncentral_chi2_survival(3.841459, NoncentralChiSq(1, 0)) == pytest.approx(0.05, abs=1e-6)

    @pytest.mark.parametrize("a,x", [(0.5, 0.1), (2.0, 1.0), (15.5, 40.0), (3.0, 2.5), (100.0, 90.0)])
    def test_gamma_q_matches_scipy(self, a, x):
        from scipy.special import gammaincc

        assert gamma_q(a, x) == pytest.approx(gammaincc(a, x), rel=1e-12, abs=1e-300)

    @given(st.floats(0.0, 200.0), st.floats(0.5, 60.0))
    def test_central_matches_scipy(self, x, df):
        assert chi2_survival(x, df) == pytest.approx(stats.chi2.sf(x, df), rel=1e-9, abs=1e-14)

    @given(st.floats(0.0, 150.0), st.integers(1, 40))
    def test_nc_zero_reduces_to_central(self, x, df):
        assert abs(noncentral_chi2_survival(x, NoncentralChiSq(df, 0.0)) - chi2_survival(x, df)) < 1e-12


class TestNoncentral:
    def test_monte_carlo(self):
        rng = np.random.default_rng(11)
        n = 1_000_000
        draws = (rng.standard_normal(n) + math.sqrt(1.5)) ** 2 + rng.standard_normal(n) ** 2
        emp = np.mean(draws >= 5.0)
        se = math.sqrt(emp * (1 - emp) / n)
        assert abs(noncentral_chi2_survival(5.0, NoncentralChiSq(2, 1.5)) - emp) < 3 * se

    @given(st.floats(0.0, 200.0), st.floats(1.0, 40.0), st.floats(0.0, 80.0))
    def test_matches_scipy(self, x, df, nc):
        ours = noncentral_chi2_survival(x, NoncentralChiSq(df, nc))
        ref = stats.ncx2.sf(x, df, nc) if nc > 0 else stats.chi2.sf(x, df)
        assert ours == pytest.approx(ref, rel=1e-7, abs=1e-12)

    def test_monotone_in_x_and_nc(self):
        xs = np.linspace(0, 80, 81)
        for nc in (0.0, 0.5, 3.0, 20.0):
            vals = [noncentral_chi2_survival(x, NoncentralChiSq(7, nc)) for x in xs]
            assert all(a >= b for a, b in zip(vals, vals[1:]))
        for x in (1.0, 10.0, 30.0):
            vals = [noncentral_chi2_survival(x, NoncentralChiSq(7, nc)) for nc in np.linspace(0, 30, 31)]
            assert all(a <= b + 1e-15 for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("x,df,nc", [(5.0, 2, 1.5), (40.0, 31, 4.0), (10.0, 6, 25.0), (0.3, 1, 0.2)])
    def test_truncation_bound(self, x, df, nc):
        d = NoncentralChiSq(df, nc)
        assert abs(noncentral_chi2_survival(x, d, 1e-12) - noncentral_chi2_survival(x, d, 1e-15)) < 1e-11

    @pytest.mark.parametrize("bad", [-1.0, math.inf, math.nan])
    def test_bad_x(self, bad):
        with pytest.raises(InvalidArgument):
            noncentral_chi2_survival(bad, NoncentralChiSq(2, 0))

    @pytest.mark.parametrize("df,nc", [(0, 0), (-1, 0), (2, -0.1), (math.nan, 0)])
    def test_bad_law(self, df, nc):
        with pytest.raises(InvalidArgument):
            NoncentralChiSq(df, nc)


class TestQuantile:
    def test_central_95(self):
        assert noncentral_chi2_quantile(0.95, NoncentralChiSq(1, 0)) == pytest.approx(3.841459, abs=1e-5)

    def test_exponential_median(self):
        assert noncentral_chi2_quantile(0.5, NoncentralChiSq(2, 0)) == pytest.approx(2 * math.log(2), abs=1e-6)

    @given(st.floats(0.001, 0.999), st.integers(1, 35), st.floats(0.0, 30.0))
    def test_survival_of_quantile(self, p, df, nc):
        d = NoncentralChiSq(df, nc)
        x = noncentral_chi2_quantile(p, d)
        assert noncentral_chi2_survival(x, d) == pytest.approx(1 - p, abs=1e-8)

    @given(st.floats(0.05, 60.0), st.integers(1, 35), st.floats(0.0, 10.0))
    def test_quantile_of_survival(self, x, df, nc):
        d = NoncentralChiSq(df, nc)
        s = noncentral_chi2_survival(x, d)
        if not (0.001 < 1 - s < 0.999):
            return
        assert noncentral_chi2_quantile(1 - s, d) == pytest.approx(x, abs=1e-8 * max(1.0, x))

    def test_strictly_increasing(self):
        d = NoncentralChiSq(5, 2.0)
        qs = [noncentral_chi2_quantile(p, d) for p in np.linspace(0.01, 0.99, 50)]
        assert all(a < b for a, b in zip(qs, qs[1:]))

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2, 1.5])
    def test_bad_p(self, p):
        with pytest.raises(InvalidArgument):
            noncentral_chi2_quantile(p, NoncentralChiSq(2, 0))


class TestCholeskyAndDensity:
    def test_identity(self):
        assert np.array_equal(cholesky_factor(np.eye(3)), np.eye(3))

    def test_two_by_two(self):
        np.testing.assert_allclose(cholesky_factor(np.array([[4.0, 2.0], [2.0, 5.0]])), [[2, 0], [1, 2]], atol=1e-15)

    def test_reconstruction(self, rng):
        a = rng.standard_normal((5, 5))
        cov = a.T @ a + np.eye(5)
        L = cholesky_factor(cov)
        assert np.allclose(np.triu(L, 1), 0)
        np.testing.assert_allclose(L @ L.T, cov, atol=1e-9)

    def test_asymmetric_rejected(self):
        with pytest.raises(InvalidArgument):
            cholesky_factor(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_not_pd_reports_pivot(self):
        cov = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 2.0], [0.0, 2.0, 1.0]])
        with pytest.raises(FactorizationError) as exc:
            cholesky_factor(cov)
        assert exc.value.pivot == 2

    def test_standard_normal_mode(self):
        assert mvn_log_density([0.0], [0.0], [[1.0]]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-9)

    def test_two_dim(self):
        expected = -0.5 * (2 * math.log(2 * math.pi) + 1)
        assert mvn_log_density([1.0, 0.0], [0.0, 0.0], np.eye(2)) == pytest.approx(expected, abs=1e-9)

    def test_against_gauss_jordan(self, rng):
        a = rng.standard_normal((4, 4))
        cov = a @ a.T + 0.5 * np.eye(4)
        x, mu = rng.standard_normal(4), rng.standard_normal(4)
        inv = gauss_jordan_inverse(cov)
        # det from the same elimination-free route: product of eigenvalues of a symmetric matrix
        logdet = float(np.sum(np.log(np.linalg.eigvalsh(cov))))
        d = x - mu
        expected = -0.5 * (4 * math.log(2 * math.pi) + logdet + d @ inv @ d)
        assert mvn_log_density(x, mu, cov) == pytest.approx(expected, abs=1e-8)

    def test_non_pd_density(self):
        with pytest.raises(FactorizationError):
            mvn_log_density([0.0, 0.0], [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
