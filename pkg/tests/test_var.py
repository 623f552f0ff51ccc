import numpy as np
import pytest
from numpy.testing import assert_allclose

from trustbalance.stochastic import RngStream
from trustbalance.var import (
    VarFitError,
    VarModel,
    aicc,
    fit_var,
    select_order,
    simulate_var,
    stationarity_check,
)

PHI1 = np.array([[0.5, 0.1], [0.0, 0.4]])
PHI2 = np.array([[-0.2, 0.0], [0.1, -0.1]])


def simulate_known(coeffs, n, gen, intercept=None, cov=None, burn=200):
    """Plain-loop VAR simulator used as the independent data generator."""
    k = coeffs[0].shape[0]
    c = np.zeros(k) if intercept is None else intercept
    L = np.eye(k) if cov is None else np.linalg.cholesky(cov)
    p = len(coeffs)
    x = np.zeros((n + burn, k))
    for t in range(p, n + burn):
        x[t] = c + sum(coeffs[i] @ x[t - i - 1] for i in range(p)) + L @ gen.standard_normal(k)
    return x[burn:].T


def make_model(coeffs, intercept, cov, trend=None):
    coeffs = np.asarray(coeffs, dtype=float)
    k = coeffs.shape[1]
    return VarModel(k=k, p=coeffs.shape[0], intercept=np.asarray(intercept, float), coeffs=coeffs,
                    innovation_cov=np.asarray(cov, float), sigma_ml=np.asarray(cov, float), n_effective=100,
                    trend=None if trend is None else np.asarray(trend, float))


def test_white_noise_fit():
    x = np.random.default_rng(0).standard_normal((2, 2000))
    m = fit_var(x, 1)
    assert np.all(np.abs(m.coeffs[0]) < 0.07)
    assert np.all(np.abs(m.intercept) < 0.07)


def test_recovers_var2_coefficients():
    x = simulate_known([PHI1, PHI2], 5000, np.random.default_rng(1))
    m = fit_var(x, 2)
    assert np.all(np.abs(m.coeffs[0] - PHI1) < 0.05)
    assert np.all(np.abs(m.coeffs[1] - PHI2) < 0.05)


def test_constant_series_rank_deficient():
    with pytest.raises(VarFitError, match="rank"):
        fit_var(np.full((2, 60), 5.0), 2)


def test_too_short():
    with pytest.raises(VarFitError, match="too short"):
        fit_var(np.random.default_rng(0).standard_normal((2, 20)), 7)


def test_residuals_orthogonal_to_regressors():
    gen = np.random.default_rng(2)
    x = simulate_known([PHI1, PHI2], 300, gen, intercept=np.array([1.0, -0.5]))
    for trend in (False, True):
        m = fit_var(x, 3, with_trend=trend)
        n = x.shape[1]
        cols = [np.ones(n - 3)] + ([np.arange(4, n + 1.0)] if trend else []) + [x[:, 3 - i:n - i].T for i in (1, 2, 3)]
        Z = np.column_stack(cols)
        lhs = Z.T @ m.residuals
        assert np.abs(lhs).max() <= 1e-8 * np.abs(Z).max() * np.abs(m.residuals).max() * Z.shape[0]


def test_df_corrected_covariance():
    x = simulate_known([PHI1], 200, np.random.default_rng(3))
    m = fit_var(x, 2)
    n_eff = 198
    assert m.n_effective == n_eff
    ssr = m.residuals.T @ m.residuals
    assert_allclose(m.innovation_cov, ssr / (n_eff - (2 * 2 + 1)), rtol=1e-12)
    assert_allclose(m.sigma_ml, ssr / n_eff, rtol=1e-12)


def test_shift_changes_only_intercept():
    gen = np.random.default_rng(4)
    x = simulate_known([PHI1, PHI2], 400, gen)
    a = np.array([3.0, -7.0])
    m0 = fit_var(x, 2)
    m1 = fit_var(x + a[:, None], 2)
    assert_allclose(m1.coeffs, m0.coeffs, atol=1e-8)
    assert_allclose(m1.innovation_cov, m0.innovation_cov, atol=1e-8)
    expected = m0.intercept + (np.eye(2) - m0.coeffs.sum(axis=0)) @ a
    assert_allclose(m1.intercept, expected, atol=1e-8)


def test_aicc_penalty_and_domain():
    m = make_model([np.zeros((2, 2))], [0, 0], np.eye(2))
    base = aicc(m, n_effective=50)
    m2 = make_model([np.zeros((2, 2))] * 2, [0, 0], np.eye(2))
    assert aicc(m2, n_effective=50) > base  # det fixed, m grows
    assert aicc(m, n_effective=50, include_cov_params=True) > base
    # m = k^2 p + k = 6 -> n_eff = 7 is the boundary
    with pytest.raises(ValueError):
        aicc(m, n_effective=7)
    # closed form with det(Sigma) = 1
    assert aicc(m, n_effective=50) == pytest.approx(2 * 6 * 50 / (50 - 6 - 1))


def test_select_order_white_noise():
    hits = 0
    for s in range(20):
        x = np.random.default_rng(100 + s).standard_normal((2, 300))
        sel = select_order(x, 1, 5)
        hits += sel.chosen == 1
        assert sel.chosen == min(p for p, v in zip(sel.orders, sel.scores) if v == min(sel.scores))
    assert hits >= 15


def test_select_order_var3_majority():
    phi3 = np.array([[0.2, 0.0], [0.0, 0.25]])
    hits = 0
    for s in range(15):
        x = simulate_known([PHI1, PHI2, phi3], 1000, np.random.default_rng(200 + s))
        hits += select_order(x, 1, 6).chosen == 3
    assert hits > 15 / 2


def test_select_order_single_order_and_support():
    x = np.random.default_rng(5).standard_normal((2, 128))
    sel = select_order(x, 7, 7)
    assert sel.chosen == 7 and sel.orders == (7,)
    assert select_order(x, 1, 5) == select_order(x, 1, 5)
    with pytest.raises(ValueError, match="cannot support"):
        select_order(x, 1, 40)


@pytest.mark.parametrize("phi, radius", [
    (0.5 * np.eye(2), 0.5),
    (np.eye(2), 1.0),
    (np.array([[0.0, 1.0], [0.0, 0.0]]), 0.0),
])
def test_stationarity_check(phi, radius):
    m = make_model([phi], [0, 0], np.eye(2))
    assert stationarity_check(m) == pytest.approx(radius, abs=1e-7)


def test_simulate_deterministic_limit():
    m = make_model([np.zeros((2, 2))], [1.0, 2.0], 1e-24 * np.eye(2))
    path = simulate_var(m, np.zeros((2, 1)), 10, RngStream(0))
    assert_allclose(path, np.tile([[1.0], [2.0]], 10), atol=1e-9)


def test_simulate_zero_noise_is_exact_recursion():
    m = make_model([PHI1, PHI2], [0.3, -0.1], np.zeros((2, 2)), trend=[0.01, 0.02])
    pre = np.array([[1.0, 2.0], [0.5, -0.5]])
    path = simulate_var(m, pre, 5, RngStream(0), t0=10)
    hist = [pre[:, 0], pre[:, 1]]
    for h in range(5):
        x = m.intercept + m.trend * (10 + h) + PHI1 @ hist[-1] + PHI2 @ hist[-2]
        hist.append(x)
    assert np.array_equal(path, np.array(hist[2:]).T)


def test_simulate_mean_matches_process_mean():
    gen = np.random.default_rng(6)
    c = np.array([1.0, 0.5])
    x = simulate_known([PHI1, PHI2], 20000, gen, intercept=c)
    m = fit_var(x, 2)
    mean = m.process_mean()
    sim = simulate_var(m, x[:, -2:], 10_000, RngStream(3))
    # Monte Carlo SE from batch means (autocorrelated path)
    batches = sim.reshape(2, 50, 200).mean(axis=2)
    se = batches.std(axis=1, ddof=1) / np.sqrt(50)
    assert np.all(np.abs(sim.mean(axis=1) - mean) < 3 * se)
    assert np.all(np.abs(mean - np.linalg.solve(np.eye(2) - PHI1 - PHI2, c)) < 0.1)


def test_simulate_repeatable_and_presample_checked():
    m = make_model([PHI1], [0, 0], np.eye(2))
    a = simulate_var(m, np.zeros((2, 1)), 20, RngStream(4, 2))
    assert np.array_equal(a, simulate_var(m, np.zeros((2, 1)), 20, RngStream(4, 2)))
    with pytest.raises(ValueError):
        simulate_var(m, np.zeros((2, 2)), 5, RngStream(0))
    mt = make_model([PHI1], [0, 0], np.eye(2), trend=[0.1, 0.1])
    with pytest.raises(ValueError, match="t0"):
        simulate_var(mt, np.zeros((2, 1)), 5, RngStream(0))


def test_trend_fit_recovers_slope():
    gen = np.random.default_rng(7)
    n = 3000
    x = np.zeros((2, n))
    slope = np.array([0.002, 0.001])
    for t in range(1, n):
        x[:, t] = 0.5 + slope * (t + 1) + 0.5 * x[:, t - 1] + gen.standard_normal(2) * 0.1
    m = fit_var(x, 1, with_trend=True)
    assert_allclose(m.trend, slope, atol=2e-4)
