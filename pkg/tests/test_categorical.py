import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from balcause import (
    Dataset,
    ExtendedLogit,
    MultinomialLogit,
    SameBasisLogLinear,
    contrasts,
    covariate_basis,
    efficiency_bound,
    estimate_theta,
    fit_balance,
    fit_categorical,
    gmm_objective,
    intercept_basis,
    moments_f,
    sandwich_variance,
)
from balcause.categorical import gmm_objective_grad, weight_matrix
from balcause.data import CategoricalFit
from balcause.errors import RankDeficientJacobian
from balcause.simulation import (
    CAT41_K,
    cat41_efficiency_bound,
    cat41_m,
    cat41_propensity,
    gen_cat41,
)

TOY_BETA = np.array([0.1, 0.4, -0.2, 0.3])
TOY_A_LIST = [0, 1, 0, 1, 1, 0]


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def _toy_lists(ds, beta):
    x_rows = ds.covariates.tolist()
    pi, dpi = oracles.ext_logit_pi(list(beta), 1, 2, x_rows)
    b_rows = [[row, row] for row in x_rows]
    return pi, dpi, b_rows


# --- moments and objective ----------------------------------------------------


def test_moments_match_loop_oracle(toy_cat, cov_basis2):
    fam = ExtendedLogit(1, 2)
    f = moments_f(toy_cat, fam, cov_basis2, TOY_BETA)
    pi, _, b_rows = _toy_lists(toy_cat, TOY_BETA)
    ref = oracles.cat_moments(TOY_A_LIST, pi, b_rows, 1, 2)
    assert _rel(f, ref) <= 1e-10


def test_objective_identity_and_inverse_vhat_match_loop(toy_cat, cov_basis2):
    fam = ExtendedLogit(1, 2)
    pi, _, b_rows = _toy_lists(toy_cat, TOY_BETA)
    f = oracles.cat_moments(TOY_A_LIST, pi, b_rows, 1, 2)
    assert _rel(gmm_objective(toy_cat, fam, cov_basis2, TOY_BETA), oracles.cat_objective(f)) <= 1e-10
    n = len(f)
    V = [[sum(f[i][r] * f[i][c] for i in range(n)) / n for c in range(4)] for r in range(4)]
    W = oracles._inv(oracles.ridge(V))
    got = gmm_objective(toy_cat, fam, cov_basis2, TOY_BETA, "inverse_vhat")
    assert _rel(got, oracles.cat_objective(f, W)) <= 1e-10


def test_theta_matches_loop_oracle(toy_cat, cov_basis2):
    fam = ExtendedLogit(1, 2)
    pi, _, _ = _toy_lists(toy_cat, TOY_BETA)
    ref = oracles.cat_theta(TOY_A_LIST, toy_cat.outcome.tolist(), pi, 1)
    assert _rel(estimate_theta(toy_cat, fam, cov_basis2, TOY_BETA), ref) <= 1e-10


def test_sandwich_matches_loop_oracle(toy_cat, cov_basis2):
    fam = ExtendedLogit(1, 2)
    pi, dpi, b_rows = _toy_lists(toy_cat, TOY_BETA)
    ref = oracles.sandwich(TOY_A_LIST, toy_cat.outcome.tolist(), pi, dpi, b_rows, 1, 2, 4)
    got = sandwich_variance(toy_cat, fam, cov_basis2, TOY_BETA)
    assert _rel(got, ref) <= 1e-10


def test_moments_with_frequency_propensity_sum_to_zero():
    rng = np.random.default_rng(3)
    a = rng.integers(0, 3, 40)
    ds = Dataset(a, rng.normal(size=40), np.ones((40, 1)))
    freq = np.bincount(a, minlength=3) / 40
    # intercept-only same-basis family: pi(k) = beta_k
    fam = SameBasisLogLinear(2, intercept_basis())
    f = moments_f(ds, fam, intercept_basis(), freq)
    assert np.allclose(f.sum(axis=0), 0.0, atol=1e-12)


def test_single_unit_moment_signs():
    ds = Dataset([1], [3.0], np.ones((1, 1)))
    fam = SameBasisLogLinear(1, intercept_basis())
    f = moments_f(ds, fam, intercept_basis(), [0.5, 0.5])
    assert np.allclose(f, [[-1.0, 1.0]])


def test_objective_is_quadratic_form():
    rng = np.random.default_rng(0)
    ds, _ = gen_cat41(300, 5)
    fam = MultinomialLogit(3, 5)
    beta = rng.normal(scale=0.05, size=fam.p)
    m = moments_f(ds, fam, covariate_basis(5), beta).sum(axis=0)
    assert gmm_objective(ds, fam, covariate_basis(5), beta) == pytest.approx(m @ m, rel=1e-12)


# --- gradients -----------------------------------------------------------------


@pytest.mark.parametrize("mode", ["identity", "inverse_vhat"])
def test_gmm_gradient_matches_central_differences(mode):
    rng = np.random.default_rng(11)
    ds, _ = gen_cat41(400, 2)
    fam = MultinomialLogit(3, 5)
    basis = covariate_basis(5)
    for _ in range(10):
        beta = rng.normal(scale=0.05, size=fam.p)
        W = None if mode == "identity" else weight_matrix(ds, fam, basis, beta)
        _, g = gmm_objective_grad(ds, fam, basis, beta, W)
        obj = lambda b: gmm_objective_grad(ds, fam, basis, b, W)[0]
        num = oracles.numeric_grad(obj, beta)
        assert np.linalg.norm(g - num) <= 1e-4 * np.linalg.norm(num)


# --- fitting --------------------------------------------------------------


def test_fit_matches_brute_force_grid(toy_cat, cov_basis2):
    fam = ExtendedLogit(1, 2)
    fit = fit_balance(toy_cat, fam, cov_basis2)
    assert fit.converged
    obj = lambda b: gmm_objective(toy_cat, fam, cov_basis2, b)
    # coarse-to-fine exhaustive grid down to resolution 1e-3
    center, step = np.zeros(4), 0.5
    while step >= 1e-3 / 2:
        axes = [c + step * np.arange(-5, 6) for c in center]
        best, best_val = center, obj(center)
        for point in itertools.product(*axes):
            v = obj(np.array(point))
            if v < best_val:
                best, best_val = np.array(point), v
        center, step = best, step / 4
    assert np.max(np.abs(fit.beta_hat - center)) <= 1e-3


def test_exact_balance_same_basis_intercept_only():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 4, 200)
    ds = Dataset(a, rng.normal(size=200), np.ones((200, 1)))
    fam = SameBasisLogLinear(3, intercept_basis())
    fit = fit_balance(ds, fam, intercept_basis())
    assert np.allclose(fit.beta_hat, np.bincount(a) / 200, atol=1e-8)
    assert fit.max_abs_moment <= 1e-6


def test_balancing_residuals_small_at_n2000():
    ds, _ = gen_cat41(2000, 7)
    fam = ExtendedLogit(3, 5)
    fit = fit_balance(ds, fam, covariate_basis(5))
    assert fit.converged
    P, _, _ = fam.prob(fit.beta_hat, ds.covariates)
    X = ds.covariates
    for k in range(4):
        w = (ds.levels() == k) / P[:, k]
        resid = (w[:, None] * X).mean(axis=0) - X.mean(axis=0)
        assert np.max(np.abs(resid)) <= 1e-4


def test_underidentified_fit_warns():
    ds, _ = gen_cat41(200, 3)
    fam = MultinomialLogit(3, 5)
    with pytest.warns(RuntimeWarning, match="under-identified"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficientJacobian)
            fit_balance(ds, fam, intercept_basis())


# --- theta and variance properties ---------------------------------------------


def test_theta_single_unit():
    ds = Dataset([1], [4.2], np.ones((1, 1)))
    fam = SameBasisLogLinear(1, intercept_basis())
    th = estimate_theta(ds, fam, intercept_basis(), [0.5, 1.0])
    # pi(1) = 1 is capped at 1 - delta
    assert th[0] == 0.0
    assert th[1] == pytest.approx(4.2 / (1 - 1e-3))


def test_theta_constant_outcome_with_frequency_propensity():
    rng = np.random.default_rng(2)
    a = rng.integers(0, 3, 30)
    ds = Dataset(a, np.full(30, 2.5), np.ones((30, 1)))
    fam = SameBasisLogLinear(2, intercept_basis())
    th = estimate_theta(ds, fam, intercept_basis(), np.bincount(a) / 30)
    assert np.allclose(th, 2.5, rtol=1e-12)


def test_theta_permutation_invariant():
    ds, _ = gen_cat41(300, 4)
    fam = MultinomialLogit(3, 5)
    beta = np.random.default_rng(0).normal(scale=0.05, size=fam.p)
    perm = np.random.default_rng(1).permutation(300)
    a = estimate_theta(ds, fam, covariate_basis(5), beta)
    b = estimate_theta(ds.take(perm), fam, covariate_basis(5), beta)
    assert np.allclose(a, b, rtol=1e-13, atol=0)


def test_sandwich_symmetric_nonnegative_and_scale_equivariant():
    ds, _ = gen_cat41(500, 9)
    fam = ExtendedLogit(3, 5)
    basis = covariate_basis(5)
    fit = fit_categorical(ds, fam, basis)
    S = fit.sigma_hat
    assert np.max(np.abs(S - S.T)) <= 1e-10 * np.max(np.abs(S))
    assert np.all(np.diag(S) >= -1e-12)
    scaled = Dataset(ds.treatment, 3.0 * ds.outcome, ds.covariates)
    th = estimate_theta(scaled, fam, basis, fit.beta_hat)
    S3 = sandwich_variance(scaled, fam, basis, fit.beta_hat, th)
    assert np.allclose(th, 3.0 * fit.theta_hat, rtol=1e-12)
    assert np.allclose(S3, 9.0 * S, rtol=1e-9)


def test_sandwich_zero_when_outcome_constant_and_balanced():
    rng = np.random.default_rng(5)
    a = rng.integers(0, 2, 100)
    ds = Dataset(a, np.full(100, 1.0), np.ones((100, 1)))
    fam = SameBasisLogLinear(1, intercept_basis())
    beta = np.bincount(a) / 100
    S = sandwich_variance(ds, fam, intercept_basis(), beta)
    # exact zero up to the 1e-8 ridge on the moment covariance
    assert np.max(np.abs(S)) <= 1e-9


# --- contrasts -------------------------------------------------------------


def test_contrast_reference_row_and_diagonal_sigma():
    fit = CategoricalFit(beta_hat=np.zeros(1), theta_hat=np.array([1.0, 3.0, 2.0]),
                         sigma_hat=np.diag([0.04, 0.09, 0.16]))
    cs = contrasts(fit, ref=0)
    assert cs[0].estimate == 0.0 and cs[0].ci_lo <= 0.0 <= cs[0].ci_hi
    assert cs[1].estimate == pytest.approx(2.0)
    assert cs[1].sd == pytest.approx(np.sqrt(0.13))
    assert cs[2].ci_hi - cs[2].estimate == pytest.approx(1.959964 * np.sqrt(0.2))
    with pytest.raises(ValueError):
        contrasts(fit, ref=3)


# --- efficiency bound ---------------------------------------------------------


def test_efficiency_bound_constant_m():
    X = np.random.default_rng(0).normal(size=(1000, 2))
    S = efficiency_bound(lambda k, Z: np.full(len(Z), 5.0), lambda k, Z: 2.0,
                         lambda k, Z: np.full(len(Z), 1 / 3), X, 2)
    assert np.allclose(S, 6.0 * np.eye(3))


def test_efficiency_bound_linear_m_closed_form():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(400_000, 2))
    slopes = np.array([[1.0, 0.0], [0.5, -1.0]])
    S = efficiency_bound(lambda k, Z: Z @ slopes[k], lambda k, Z: 1.0,
                         lambda k, Z: np.full(len(Z), 0.5), X, 1)
    expect = 2.0 * np.eye(2) + slopes @ slopes.T
    assert np.allclose(S, expect, atol=0.02)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=5, max_size=5),
       st.lists(st.floats(-1, 1), min_size=15, max_size=15))
def test_mnl_probabilities_property(x_tail, beta):
    x = np.array([1.0] + x_tail[:4])
    fam = MultinomialLogit(3, 5)
    P, _, _ = fam.prob(np.array(beta), x[None, :])
    raw = fam.raw_prob(np.array(beta), x[None, :])
    assert raw.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all((P >= 1e-3) & (P <= 1 - 1e-3))
    ref = oracles.mnl_pi(beta, 3, 5, [x.tolist()])[0]
    assert np.allclose(raw[0], ref, rtol=1e-12)


def test_cat41_bound_matches_direct_formula():
    S = cat41_efficiency_bound(mc_draws=20_000, seed=3)
    from balcause.simulation import cat41_covariates, replicate_rng
    X = cat41_covariates(20_000, replicate_rng(3))
    P = cat41_propensity(X)
    M = np.column_stack([cat41_m(k, X) for k in range(CAT41_K + 1)])
    first = np.diag(np.mean(1.0 / P, axis=0))
    assert np.allclose(S, first + np.cov(M.T, bias=True), rtol=1e-10)

