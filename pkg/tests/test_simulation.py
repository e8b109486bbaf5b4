import math

import numpy as np
import pytest

from balcause.simulation import (
    CAT41_ALPHA,
    CAT41_XMEAN,
    ContOracles,
    MetricTable,
    Scenario,
    SimulationFailed,
    cont42_oracles,
    gen_cat41,
    gen_cont42,
    integrated_metrics,
    misspecify_cat,
    misspecify_cont,
    replicate_rng,
    run_replicates,
    theoretical_bias_var_cont,
    true_curve,
)


# --- generators -----------------------------------------------------------


def test_cat41_truth_contrast():
    _, truth = gen_cat41(10, 0)
    for k in (1, 2, 3):
        assert truth.contrast(k) == pytest.approx(82.2, abs=1e-12)


def test_cat41_deterministic_and_replicates_differ():
    a, _ = gen_cat41(50, 5, 2)
    b, _ = gen_cat41(50, 5, 2)
    c, _ = gen_cat41(50, 5, 3)
    assert np.array_equal(a.covariates, b.covariates) and np.array_equal(a.outcome, b.outcome)
    assert not np.array_equal(a.outcome, c.outcome)


def test_cat41_covariate_moments():
    ds, _ = gen_cat41(100_000, 1)
    assert np.all(ds.covariates[:, 0] == 1)
    assert abs(ds.covariates[:, 1].mean() - 3) < 0.05
    assert ds.covariates[:, 2].var() == pytest.approx(4.0, rel=0.03)
    assert set(np.unique(ds.treatment)) == {0.0, 1.0, 2.0, 3.0}


def test_replicate_rng_uses_seed_xor_r():
    a = replicate_rng(6, 3).random(4)
    b = replicate_rng(5, 0).random(4)
    assert np.array_equal(a, b)


def test_misspecify_cat_substitutions():
    X = np.array([[1.0, 2.0, 0.5, 3.0, 0.7], [1.0, -1.0, 2.0, 4.0, -0.2]])
    pi = misspecify_cat(X, "pi")
    assert np.allclose(pi[:, 0], math.e)
    assert np.allclose(pi[:, 1], X[:, 1]) and np.allclose(pi[:, 2], X[:, 2])
    assert np.allclose(pi[:, 3], 1 + X[:, 3])
    assert np.allclose(pi[:, 4], X[:, 4] * np.sin(X[:, 4]) ** 2)
    m = misspecify_cat(X, "m")
    assert m[0, 3] == 3.0 and np.allclose(m[:, 4], X[:, 4])
    assert np.allclose(m[:, 2], X[:, 1] * X[:, 2] ** 2)
    assert np.array_equal(misspecify_cat(X[::-1], "pi"), pi[::-1])
    with pytest.raises(ValueError):
        misspecify_cat(X, "both")


def test_cont42_supports_and_outcomes():
    ds, _ = gen_cont42(2000, 3, "nonlinear")
    assert np.all((ds.treatment > 0) & (ds.treatment < 20))
    assert set(np.unique(ds.outcome)) <= {0.0, 1.0}
    lin, _ = gen_cont42(2000, 3, "linear")
    assert np.array_equal(lin.treatment, ds.treatment)
    assert len(np.unique(lin.outcome)) == 2000


def test_true_curve_is_nonconstant_and_linear_closed_form():
    grid = np.array([3.0, 12.0])
    nl = true_curve(grid, "nonlinear", mc_draws=200_000)
    assert abs(nl[0] - nl[1]) > 0.1
    lin = true_curve(grid, "linear")
    assert lin == pytest.approx((16 + 0.1 * grid - 0.13 ** 3 * grid ** 3) / 20)


def test_true_curve_linear_matches_monte_carlo():
    from balcause.simulation import cont42_covariates, cont42_m
    X = cont42_covariates(400_000, replicate_rng(1))
    for a in (4.0, 9.0):
        assert np.mean(cont42_m(a, X, "linear")) == pytest.approx(
            true_curve([a], "linear")[0], abs=2e-3)


def test_true_curve_disk_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("BALCAUSE_CACHE_DIR", str(tmp_path))
    a = true_curve([5.0, 6.0], "nonlinear", mc_draws=10_000)
    assert len(list(tmp_path.glob("theta_nonlinear_*.npy"))) == 1
    b = true_curve([5.0, 6.0], "nonlinear", mc_draws=10_000)
    assert np.array_equal(a, b)


def test_misspecify_cont_substitutions():
    out = misspecify_cont(np.array([1.0, 0.0, 0.8, 0.0, 0.0]))
    assert out[1] == 1.0
    assert out[2] == pytest.approx(0.8 / 2 + 10)
    assert out[3] == pytest.approx(0.216)
    assert misspecify_cont(np.array([1.0, 0.3, 0.0, 1.1, 0.0]))[4] == pytest.approx(400.0)
    X = np.random.default_rng(0).normal(size=(4, 5))
    assert np.allclose(misspecify_cont(X)[2], misspecify_cont(X[2]))


# --- metrics ---------------------------------------------------------------


def test_integrated_metrics_invariants():
    rng = np.random.default_rng(0)
    grid = np.linspace(0, 1, 21)
    truth = np.sin(grid)
    est = truth + rng.normal(scale=0.1, size=(30, 21)) + 0.02
    w = np.exp(-grid)
    bias, rmse = integrated_metrics(est, truth, w, grid)
    assert 0 <= bias <= rmse
    pointwise_bias = np.abs(est.mean(0) - truth)
    pointwise_rmse = np.sqrt(((est - truth) ** 2).mean(0))
    assert np.all(pointwise_rmse >= pointwise_bias)
    # a constant error integrates to itself under any weight
    b2, r2 = integrated_metrics(np.tile(truth + 0.3, (4, 1)), truth, w, grid)
    assert b2 == pytest.approx(0.3) and r2 == pytest.approx(0.3)


def test_single_replicate_table_has_absent_sd(tmp_path):
    table = run_replicates(Scenario("cat41", 300, 1, methods=("mle",)))
    row = table.row(method="mle", contrast="theta1-theta0")
    assert math.isnan(row["sd"])
    assert row["mse"] == pytest.approx(row["bias"] ** 2)
    table.to_csv(tmp_path / "t.csv")
    text = (tmp_path / "t.csv").read_text()
    assert ",NA," in text and text.rstrip().splitlines()[-1].startswith("# config-hash: ")
    table.to_json(tmp_path / "t.json")
    assert '"sd": null' in (tmp_path / "t.json").read_text()


def test_run_replicates_identical_across_worker_counts(tmp_path):
    sc = Scenario("cat41", 400, 4, seed=11, methods=("balancing", "mle"))
    run_replicates(sc, workers=1).to_csv(tmp_path / "a.csv")
    run_replicates(sc, workers=2).to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_continuous_scenario_small_run():
    sc = Scenario("cont_linear", 200, 2, seed=3, methods=("balancing", "mle"), h=2.0,
                  grid_size=11)
    table = run_replicates(sc)
    for method in ("balancing", "mle"):
        row = table.row(method=method)
        assert 0 <= row["bias_x100"] <= row["rmse_x100"]
        assert row["n_ok"] == 2
    assert len(table.extra["grid"]) == 11


def test_failure_threshold_raises_with_table(monkeypatch):
    import balcause.simulation as sim

    def broken(sc, r):
        return {"mle": "NonConvergence"} if r == 0 else {"mle": np.zeros((3, 2))}

    monkeypatch.setattr(sim, "_cat_replicate", broken)
    with pytest.raises(SimulationFailed) as err:
        run_replicates(Scenario("cat41", 50, 3, methods=("mle",)))
    assert err.value.table.failures == {"mle": 1}
    ok = run_replicates(Scenario("cat41", 50, 30, methods=("mle",)), max_failure_rate=0.05)
    assert ok.failures == {"mle": 1}


def test_scenario_validation_and_hash():
    with pytest.raises(ValueError):
        Scenario("cat42", 100, 1)
    with pytest.raises(ValueError):
        Scenario("cat41", 100, 0)
    with pytest.raises(ValueError):
        Scenario("cat41", 100, 1, methods=("dr",))
    with pytest.raises(ValueError):
        Scenario("cont_linear", 100, 1, h="gcv")
    a = Scenario("cat41", 100, 2)
    assert a.config_hash() == Scenario("cat41", 100, 2).config_hash()
    assert a.config_hash() != Scenario("cat41", 100, 2, seed=1).config_hash()


# --- theoretical bias and variance -------------------------------------------------


def _flat_oracles():
    return ContOracles(
        pi0=lambda a, X: np.full(X.shape[0], 0.05),
        m=lambda a, X: X[:, 1] + 2.0,
        sigma2=lambda a, X: np.ones(X.shape[0]),
        covariates=lambda m, rng: np.column_stack([np.ones(m), rng.normal(size=m)]),
    )


def test_bias_zero_when_nothing_depends_on_dose():
    bias, var = theoretical_bias_var_cont(_flat_oracles(), 5.0, 1.0, 100, mc_draws=20_000)
    assert bias == pytest.approx(0.0, abs=1e-8)
    assert var > 0


def test_variance_scales_as_inverse_n_h():
    orc = _flat_oracles()
    _, v1 = theoretical_bias_var_cont(orc, 5.0, 1.0, 100, mc_draws=20_000)
    _, v2 = theoretical_bias_var_cont(orc, 5.0, 2.0, 300, mc_draws=20_000)
    assert v1 / v2 == pytest.approx(6.0, rel=1e-12)
    # E[(m^2 + 1) / 0.05] with m = Z + 2: (4 + 1 + 1) / 0.05 = 120
    assert v1 == pytest.approx(0.6 / 100 * 120, rel=0.05)


def test_thm3_needs_pi_star_and_reduces_to_thm2():
    orc = cont42_oracles("linear")
    with pytest.raises(ValueError):
        theoretical_bias_var_cont(orc, 8.0, 1.0, 500, "thm3", mc_draws=1000)
    same = ContOracles(orc.pi0, orc.m, orc.sigma2, orc.covariates, pi_star=orc.pi0)
    b2 = theoretical_bias_var_cont(orc, 8.0, 1.0, 500, "thm2", mc_draws=20_000)
    b3 = theoretical_bias_var_cont(same, 8.0, 1.0, 500, "thm3", mc_draws=20_000)
    assert np.allclose(b2, b3, rtol=1e-12)
