import numpy as np
import pytest

from survcate.data import Cohort, CovariateSchema, complete_case_view
from survcate.exceptions import ConfigError, DataError
from survcate.forest import PropensityForest
from survcate.metalearners import (CateConfig, LearnerKind, PseudoOutcomeSet,
                                   SurvivalMetaLearner, WeightedRidge, build_pseudo_outcomes,
                                   cross_fit_cate, fit_cate, fold_assignment,
                                   pseudo_outcome_arrays)
from survcate.nuisance import NuisanceBundle
from survcate.simbench import simulate_cohort


def _sim(scenario, design, n, seed, rate):
    sim = simulate_cohort(scenario, design, n, seed, rate)
    return sim.with_target(float(np.median(sim.cohort.time)))


def _one(learner, a, surv, e, S0=0.5, S1=0.5, S=0.5):
    y, w = pseudo_outcome_arrays(learner, [a], [surv], np.array([e]), np.array([S0]),
                                 np.array([S1]), np.array([S]))
    return float(y[0]), float(w[0])


def test_table_examples():
    assert _one("M", 1, 1, 0.5) == pytest.approx((2.0, 1.0))
    assert _one("D", 0, 1, 0.25) == pytest.approx((-2.0, 1 / 3))
    assert _one("R", 1, 1, 0.25, S=0.4) == pytest.approx((0.8, 0.5625))
    assert _one("X", 1, 1, 0.3, S0=0.6) == pytest.approx((0.4, 1.0))
    assert _one("X", 0, 0, 0.3, S1=0.7) == pytest.approx((0.7, 1.0))
    y, w = _one("DR", 1, 1, 0.5, S0=0.2, S1=0.6)
    assert (y, w) == pytest.approx((2 * 0.4 + 0.4, 1.0))


def test_dr_equals_dea_at_half(rng):
    n = 200
    a = rng.integers(0, 2, n)
    surv = rng.integers(0, 2, n)
    e = np.full(n, 0.5)
    S0, S1 = rng.random(n), rng.random(n)
    S = 0.5 * (S0 + S1)
    y_dea, w_dea = pseudo_outcome_arrays("DEA", a, surv, e, S0, S1, S)
    np.testing.assert_allclose(w_dea, 0.5)  # a constant weight leaves the fit unchanged
    # at e = 1/2 the DEA target (I - S) 2(2A-1) equals DR minus an augmentation
    # term whose weighted average matches; with S0 = S1 they coincide exactly
    y_dr, _ = pseudo_outcome_arrays("DR", a, surv, e, S, S, S)
    np.testing.assert_allclose(y_dea, y_dr, atol=1e-15)


@pytest.mark.parametrize("learner", ["D", "DEA", "R"])
def test_learner_weights_positive(learner, rng):
    n = 500
    a = rng.integers(0, 2, n)
    e = rng.uniform(0.01, 0.99, n)
    _, w = pseudo_outcome_arrays(learner, a, rng.integers(0, 2, n), e, e, e, e)
    assert np.all(w > 0)


def _oracle_bundle(sim, t_star):
    c = sim.cohort
    view = complete_case_view(c, t_star)
    e = sim.propensity
    S0, S1 = sim.S0, sim.S1
    S = e * S1 + (1 - e) * S0
    complete = np.zeros(c.n, bool)
    complete[view.indices] = True
    w = np.where(complete, 1.0, np.nan)
    return NuisanceBundle(t_star, e, S0, S1, S, np.ones(c.n), w, complete, {}, {})


@pytest.fixture(scope="module")
def oracle_draws():
    draws = []
    for seed in range(11, 16):
        sim = _sim("S1", "RCT", 5000, seed, 0.0)
        b = _oracle_bundle(sim, sim.t_star)
        b.models["propensity"] = PropensityForest(n_estimators=20, random_state=seed).fit(
            sim.X, sim.cohort.treatment)
        draws.append((sim, b))
    return draws


@pytest.mark.parametrize("learner", ["X", "M", "DR", "D", "DEA", "R"])
def test_oracle_nuisance_recovery(learner, oracle_draws):
    # Y* for M and D is +-2 I(T >= t*), so one n=5000 draw has a mean-error SD
    # near 0.02; the signed error is averaged over five independent draws.
    errs = []
    for sim, b in oracle_draws:
        c = sim.cohort
        est = SurvivalMetaLearner(learner, sim.t_star, cate=CateConfig(n_trees=100),
                                  random_state=0)
        est.fit(sim.X, c.time, c.event, c.treatment, bundle=b)
        errs.append(np.mean(est.predict(sim.X) - sim.tau))
    assert abs(np.mean(errs)) < 0.03


def test_bundle_with_wrong_t_star_rejected():
    sim = _sim("S1", "RCT", 200, 1, 0.0)
    b = _oracle_bundle(sim, sim.t_star)
    with pytest.raises(DataError):
        SurvivalMetaLearner("M", sim.t_star + 1).fit(
            sim.X, sim.cohort.time, sim.cohort.event, sim.cohort.treatment, bundle=b)


def _pseudo(y, w, rows=None):
    n = len(y)
    rows = np.arange(n) if rows is None else rows
    return PseudoOutcomeSet(LearnerKind.M, rows, np.asarray(y, float), np.asarray(w, float),
                            np.ones(n), np.zeros(n, np.int8))


@pytest.mark.parametrize("backend", ["forest", "ridge"])
def test_constant_pseudo_outcome_gives_constant(backend, rng):
    X = rng.standard_normal((100, 3))
    m = fit_cate(X, "M", _pseudo(np.full(100, 0.37), rng.uniform(0.1, 3, 100)), 1.0,
                 CateConfig(backend=backend, n_trees=20))
    np.testing.assert_allclose(m.predict(rng.standard_normal((10, 3))), 0.37, atol=1e-9)


@pytest.mark.parametrize("backend", ["forest", "ridge"])
def test_zero_weight_rows_ignored(backend, rng):
    X = rng.standard_normal((60, 2))
    y = 0.3 * X[:, 0]
    w = rng.uniform(0.5, 1.5, 60)
    X2 = np.vstack([X, rng.standard_normal((15, 2))])
    y2 = np.concatenate([y, rng.normal(0, 5, 15)])
    w2 = np.concatenate([w, np.zeros(15)])
    cfg = CateConfig(backend=backend, n_trees=15)
    a = fit_cate(X, "M", _pseudo(y, w), 1.0, cfg, seed=2)
    b = fit_cate(X2, "M", _pseudo(y2, w2), 1.0, cfg, seed=2)
    probe = rng.standard_normal((20, 2))
    if backend == "forest":
        np.testing.assert_array_equal(a.predict(probe), b.predict(probe))
    else:
        np.testing.assert_allclose(a.predict(probe), b.predict(probe), atol=1e-10)


def test_predictions_are_clamped(rng):
    X = rng.standard_normal((50, 2))
    m = fit_cate(X, "M", _pseudo(np.full(50, 1.2), np.ones(50)), 1.0, CateConfig(n_trees=5))
    np.testing.assert_array_equal(m.predict(X), 1.0)
    m = fit_cate(X, "M", _pseudo(np.full(50, -7.0), np.ones(50)), 1.0,
                 CateConfig(backend="ridge"))
    np.testing.assert_array_equal(m.predict(X), -1.0)


def test_constant_column_does_not_change_fit(rng):
    X = rng.standard_normal((120, 2))
    y = np.tanh(X[:, 0]) + rng.normal(0, 0.1, 120)
    w = np.ones(120)
    a = fit_cate(X, "M", _pseudo(y, w), 1.0, CateConfig(n_trees=20), seed=3,
                 feature_names=["a", "b"])
    Xc = np.column_stack([X, np.full(120, 4.2)])
    b = fit_cate(Xc, "M", _pseudo(y, w), 1.0, CateConfig(n_trees=20), seed=3,
                 feature_names=["a", "b", "const"])
    probe = rng.standard_normal((25, 2))
    np.testing.assert_array_equal(a.predict(probe),
                                  b.predict(np.column_stack([probe, np.full(25, 4.2)])))


def test_x_learner_blend_between_arm_models():
    sim = _sim("S1", "balanced-obs", 600, 5, 0.02)
    c = sim.cohort
    from survcate.nuisance import NuisanceConfig
    est = SurvivalMetaLearner("X", sim.t_star, NuisanceConfig(rsf_trees=40, propensity_trees=40),
                              CateConfig(n_trees=40), random_state=1)
    est.fit(c.design_matrix(), c.time, c.event, c.treatment)
    m = est.model_
    X = c.design_matrix()[:200]
    t0, t1 = m.regressor0.predict(X), m.regressor.predict(X)
    tau = m.predict_raw(X)
    assert np.all(tau >= np.minimum(t0, t1) - 1e-12)
    assert np.all(tau <= np.maximum(t0, t1) + 1e-12)
    assert est.pseudo_.arm.min() == 0 and est.pseudo_.arm.max() == 1


def test_r_learner_drops_small_residuals():
    n = 6
    b = NuisanceBundle(1.0, np.array([0.995, 0.5, 0.5, 0.5, 0.005, 0.5]), *(np.full(n, 0.5),) * 3,
                       np.ones(n), np.ones(n), np.ones(n, bool), {}, {})
    schema = CovariateSchema.continuous(["x"])
    c = Cohort(schema, np.full(n, 2.0), np.zeros(n, bool), np.array([1, 1, 0, 1, 0, 0]),
               np.zeros((n, 1)))
    p = build_pseudo_outcomes(b, complete_case_view(c, 1.0), "R", c.treatment)
    assert p.n_dropped == 2
    assert list(p.rows) == [1, 2, 3, 5]


def test_missing_nuisance_is_reported():
    n = 4
    nan = np.full(n, np.nan)
    b = NuisanceBundle(1.0, np.full(n, 0.5), nan, nan, nan, np.ones(n), np.ones(n),
                       np.ones(n, bool), {}, {})
    c = Cohort(CovariateSchema.continuous(["x"]), np.full(n, 2.0), np.zeros(n, bool),
               np.array([0, 1, 0, 1]), np.zeros((n, 1)))
    build_pseudo_outcomes(b, complete_case_view(c, 1.0), "M", c.treatment)
    with pytest.raises(DataError, match="S"):
        build_pseudo_outcomes(b, complete_case_view(c, 1.0), "R", c.treatment)


def test_fold_partition(rng):
    a = rng.integers(0, 2, 103)
    d = rng.random(103) < 0.6
    folds = fold_assignment(a, d, 5, seed=1)
    assert set(np.unique(folds)) == set(range(5))
    sizes = np.bincount(folds)
    assert sizes.max() - sizes.min() <= 4
    np.testing.assert_array_equal(folds, fold_assignment(a, d, 5, seed=1))
    with pytest.raises(ConfigError):
        fold_assignment(a, d, 1, 0)


def test_leave_one_out_cross_fit(small_nuisance):
    n = 6
    X = np.arange(n, dtype=float)[:, None]
    c = Cohort(CovariateSchema.continuous(["x"]), np.array([1., 2, 3, 4, 5, 6]),
               np.array([1, 1, 0, 1, 1, 0], bool), np.array([0, 1, 0, 1, 0, 1]), X)
    from survcate.nuisance import NuisanceConfig
    res = cross_fit_cate(c, 3.5, "M", k_folds=n, seed=0,
                         nuisance=NuisanceConfig(rsf_trees=5, propensity_trees=5),
                         cate=CateConfig(backend="ridge"))
    assert np.all(np.isfinite(res.tau))
    assert sorted(res.folds.tolist()) == list(range(n))
    assert len(res.models) == n


def test_cross_fit_mean_close_to_truth(small_nuisance, small_cate):
    sim = _sim("S1", "RCT", 800, 21, 0.02)
    res = cross_fit_cate(sim.cohort, sim.t_star, "DR", k_folds=3, seed=0,
                         nuisance=small_nuisance, cate=small_cate)
    assert abs(res.tau.mean() - sim.tau.mean()) < 0.1


def test_estimator_api(rng, small_nuisance, small_cate):
    est = SurvivalMetaLearner("DEA", "median", small_nuisance, small_cate, random_state=3)
    assert est.get_params()["learner"] == "DEA"
    X = rng.standard_normal((200, 2))
    T = rng.exponential(5, 200)
    est.fit(X, T, rng.random(200) < 0.8, rng.integers(0, 2, 200))
    assert est.t_star_ == pytest.approx(np.median(T))
    assert est.predict(X).shape == (200,)
    with pytest.raises(ConfigError):
        SurvivalMetaLearner("Q").fit(X, T, np.ones(200, bool), rng.integers(0, 2, 200))


def test_weighted_ridge_matches_lstsq(rng):
    X = rng.standard_normal((50, 3))
    y = X @ [1, -2, 0.5] + 3 + rng.normal(0, 0.1, 50)
    w = rng.uniform(0.2, 2, 50)
    r = WeightedRidge(alpha=0.0).fit(X, y, w)
    A = np.column_stack([np.ones(50), X]) * np.sqrt(w)[:, None]
    beta = np.linalg.lstsq(A, y * np.sqrt(w), rcond=None)[0]
    np.testing.assert_allclose(r.coef_, beta[1:], atol=1e-10)
    assert r.intercept_ == pytest.approx(beta[0])
