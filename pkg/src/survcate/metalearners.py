"""Pseudo-outcome meta-learners for survival-probability CATE.

Each learner turns Step-1 nuisances into a pseudo individual treatment effect
``Y*`` and a learner weight ``w_M`` on the complete cases; the CATE model then
minimises ``sum(w_C * w_M * (Y* - tau(x))**2)``.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import Cohort, CovariateSchema, TargetTime, complete_case_view
from .exceptions import ConfigError, DataError
from .forest import WeightedRegressionForest
from .nuisance import NuisanceBundle, NuisanceConfig, build_nuisance_bundle
from .validation import check_covariates, check_survival_data


class LearnerKind(str, enum.Enum):
    X = "X"
    M = "M"
    DR = "DR"
    D = "D"
    DEA = "DEA"
    R = "R"

    @classmethod
    def parse(cls, value):
        try:
            return cls(str(value.value if isinstance(value, cls) else value).upper())
        except ValueError:
            raise ConfigError(f"unknown learner {value!r}; expected one of "
                              f"{[k.value for k in cls]}") from None


REQUIRED_NUISANCES = {
    LearnerKind.X: ("S0", "S1", "e"),
    LearnerKind.M: ("e",),
    LearnerKind.DR: ("e", "S0", "S1"),
    LearnerKind.D: ("e",),
    LearnerKind.DEA: ("e", "S"),
    LearnerKind.R: ("e", "S"),
}

R_EPSILON = 0.01


@dataclass
class PseudoOutcomeSet:
    """Complete-case pseudo outcomes for one learner.

    ``rows`` index the cohort. For the X-learner ``arm`` tells which of the
    two arm-specific regressions a row feeds.
    """

    learner: LearnerKind
    rows: np.ndarray
    y: np.ndarray
    w_learner: np.ndarray
    w_censor: np.ndarray
    arm: np.ndarray
    n_dropped: int = 0

    @property
    def weight(self):
        return self.w_censor * self.w_learner

    def __len__(self):
        return self.rows.shape[0]


def pseudo_outcome_arrays(learner, a, surv, e, S0, S1, S):
    """Vectorised ``(Y*, w_M)`` for one learner.

    ``a`` is the 0/1 treatment and ``surv`` the indicator ``I(T > t*)``.
    """
    learner = LearnerKind.parse(learner)
    a = np.asarray(a, dtype=np.float64)
    surv = np.asarray(surv, dtype=np.float64)
    sign = 2.0 * a - 1.0
    if learner is LearnerKind.X:
        y = np.where(a == 1, surv - S0, S1 - surv)
        return y, np.ones_like(y)
    if learner is LearnerKind.M:
        y = (a - e) / (e * (1.0 - e)) * surv
        return y, np.ones_like(y)
    if learner is LearnerKind.DR:
        S_a = np.where(a == 1, S1, S0)
        y = (a - e) / (e * (1.0 - e)) * (surv - S_a) + S1 - S0
        return y, np.ones_like(y)
    if learner in (LearnerKind.D, LearnerKind.DEA):
        w = sign * (a - e) / (4.0 * e * (1.0 - e))
        resid = surv if learner is LearnerKind.D else surv - S
        return 2.0 * sign * resid, w
    resid = a - e
    return (surv - S) / resid, resid ** 2


def build_pseudo_outcomes(bundle, view, learner, treatment, r_epsilon=R_EPSILON):
    """Pseudo outcomes on the complete-case ``view`` from a :class:`NuisanceBundle`."""
    learner = LearnerKind.parse(learner)
    if view.n_complete == 0:
        raise DataError("complete-case view is empty")
    rows = np.asarray(view.indices)
    for name in REQUIRED_NUISANCES[learner]:
        vals = getattr(bundle, name)[rows]
        if np.any(np.isnan(vals)):
            raise DataError(f"{learner.value}-learner needs nuisance {name!r}, not in bundle")
    a = np.asarray(treatment)[rows]
    e, S0, S1, S = bundle.e[rows], bundle.S0[rows], bundle.S1[rows], bundle.S[rows]
    surv = np.asarray(view.survival_indicator, dtype=np.float64)
    n_dropped = 0
    if learner is LearnerKind.R:
        keep = np.abs(a - e) >= r_epsilon
        n_dropped = int((~keep).sum())
        rows, a, e, S0, S1, S, surv = (v[keep] for v in (rows, a, e, S0, S1, S, surv))
    y, w = pseudo_outcome_arrays(learner, a, surv, e, S0, S1, S)
    return PseudoOutcomeSet(learner, rows, y, w, bundle.w_censor[rows],
                            a.astype(np.int8), n_dropped)


class WeightedRidge(BaseEstimator, RegressorMixin):
    """Weighted ridge regression with an unpenalised intercept."""

    def __init__(self, alpha=1e-6):
        self.alpha = alpha

    def fit(self, X, y, sample_weight=None, feature_names=None):
        X = check_covariates(X)
        y = np.asarray(y, dtype=np.float64)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, float)
        sw = w.sum()
        if sw <= 0:
            raise DataError("all sample weights are zero")
        xm = w @ X / sw
        ym = w @ y / sw
        Xc = X - xm
        A = Xc.T @ (Xc * w[:, None]) + self.alpha * np.eye(X.shape[1])
        self.coef_ = np.linalg.solve(A, Xc.T @ (w * (y - ym)))
        self.intercept_ = ym - xm @ self.coef_
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_covariates(X, self.n_features_in_) @ self.coef_ + self.intercept_


@dataclass
class CateConfig:
    """Step-2 regressor settings."""

    backend: str = "forest"
    n_trees: int = 500
    mtry: object = "third"
    min_leaf_weight_factor: float = 10.0
    max_depth: object = None
    ridge_alpha: float = 1e-6
    threads: int = 1

    def __post_init__(self):
        if self.backend not in ("forest", "ridge"):
            raise ConfigError(f"unknown CATE backend {self.backend!r}")

    def make(self, seed):
        if self.backend == "ridge":
            return WeightedRidge(alpha=self.ridge_alpha)
        return WeightedRegressionForest(
            n_estimators=self.n_trees, mtry=self.mtry,
            min_leaf_weight_factor=self.min_leaf_weight_factor, max_depth=self.max_depth,
            random_state=int(seed), n_jobs=self.threads)


@dataclass
class CateModel:
    """Fitted pseudo-outcome regression(s) mapping covariates to ``tau(x; t*)``."""

    learner: LearnerKind
    t_star: float
    regressor: object
    regressor0: object = None
    propensity: object = None
    feature_names: list = field(default_factory=list)
    seed: int = 0

    @property
    def n_features(self):
        return len(self.feature_names)

    def predict_raw(self, X):
        if self.learner is LearnerKind.X:
            e = self.propensity.predict_propensity(X)
            return e * self.regressor0.predict(X) + (1.0 - e) * self.regressor.predict(X)
        return self.regressor.predict(X)

    def predict(self, X):
        X = check_covariates(X, self.n_features or None)
        return np.clip(self.predict_raw(X), -1.0, 1.0)


def fit_cate(X, learner, pseudo, t_star, config=None, seed=0, propensity=None,
             feature_names=None):
    """Step 2: weighted regression of ``Y*`` on the complete-case covariates.

    The X-learner fits one regression per arm and blends them with the
    propensity model: ``e(x) * tau0(x) + (1 - e(x)) * tau1(x)``.
    """
    learner = LearnerKind.parse(learner)
    config = config or CateConfig()
    X = check_covariates(X)
    if feature_names is None:
        feature_names = [f"x{j}" for j in range(X.shape[1])]
    if len(pseudo) < 2:
        raise DataError("pseudo-outcome set needs at least two rows")
    w = pseudo.weight
    if not np.any(w > 0):
        raise DataError("all pseudo-outcome weights are zero")
    s = np.random.SeedSequence(seed).generate_state(2)
    Xc = X[pseudo.rows]
    if learner is LearnerKind.X:
        if propensity is None:
            raise DataError("X-learner needs a fitted propensity model")
        regs = {}
        for arm, si in ((0, s[0]), (1, s[1])):
            m = pseudo.arm == arm
            if m.sum() < 1 or not np.any(w[m] > 0):
                raise DataError(f"X-learner arm {arm} has no usable complete cases")
            regs[arm] = config.make(si).fit(Xc[m], pseudo.y[m], sample_weight=w[m],
                                            feature_names=feature_names)
        return CateModel(learner, t_star, regs[1], regs[0], propensity,
                         list(feature_names), seed)
    reg = config.make(s[0]).fit(Xc, pseudo.y, sample_weight=w, feature_names=feature_names)
    return CateModel(learner, t_star, reg, feature_names=list(feature_names), seed=seed)


def predict_cate(model, X):
    return model.predict(X)


def _resolve_t_star(t_star, time):
    if isinstance(t_star, str):
        if t_star == "median":
            return float(np.median(time))
        if t_star == "p75":
            return float(np.percentile(time, 75))
        raise ConfigError(f"unknown t* rule {t_star!r}")
    return TargetTime(t_star).t_star


class SurvivalMetaLearner(BaseEstimator, RegressorMixin):
    """Two-step pseudo-outcome meta-learner for ``tau(x; t*) = S1(t*|x) - S0(t*|x)``.

    Parameters
    ----------
    learner : {"X", "M", "DR", "D", "DEA", "R"}
    t_star : float or {"median", "p75"}
        Target time; rules are evaluated on the training observed times.
    nuisance : NuisanceConfig, optional
    cate : CateConfig, optional
    random_state : int

    Examples
    --------
    >>> est = SurvivalMetaLearner("R", t_star=12.0).fit(X, time, event, treatment)
    >>> tau = est.predict(X_new)
    """

    def __init__(self, learner="R", t_star="median", nuisance=None, cate=None,
                 random_state=0):
        self.learner = learner
        self.t_star = t_star
        self.nuisance = nuisance
        self.cate = cate
        self.random_state = random_state

    def fit(self, X, time, event, treatment, feature_names=None, bundle=None):
        X, time, event, treatment = check_survival_data(X, time, event, treatment)
        learner = LearnerKind.parse(self.learner)
        t_star = _resolve_t_star(self.t_star, time)
        names = feature_names or [f"x{j}" for j in range(X.shape[1])]
        cohort = _matrix_cohort(X, time, event, treatment, names)
        if bundle is None:
            bundle = build_nuisance_bundle(
                cohort, t_star, self.nuisance or NuisanceConfig(),
                seed=self.random_state, need=REQUIRED_NUISANCES[learner])
        elif bundle.t_star != t_star:
            raise DataError("supplied nuisance bundle was built for a different t*")
        view = complete_case_view(cohort, t_star)
        pseudo = build_pseudo_outcomes(bundle, view, learner, treatment)
        self.model_ = fit_cate(X, learner, pseudo, t_star, self.cate or CateConfig(),
                               seed=self.random_state,
                               propensity=bundle.models.get("propensity"),
                               feature_names=names)
        self.t_star_ = t_star
        self.bundle_ = bundle
        self.pseudo_ = pseudo
        self.n_features_in_ = X.shape[1]
        self.diagnostics_ = dict(bundle.diagnostics, learner=learner.value,
                                 n_pseudo=len(pseudo), r_dropped=pseudo.n_dropped)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(X)


def _matrix_cohort(X, time, event, treatment, names):
    return Cohort(CovariateSchema.continuous(names), time, event, treatment, X)


def fold_assignment(treatment, event, k_folds, seed):
    """Stratified (by arm x event) round-robin fold labels."""
    treatment = np.asarray(treatment)
    event = np.asarray(event)
    n = treatment.shape[0]
    if k_folds < 2 or k_folds > n:
        raise ConfigError(f"k_folds must lie in [2, n={n}]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF01D]))
    strata = 2 * treatment.astype(np.int64) + event.astype(np.int64)
    order = np.concatenate([rng.permutation(np.flatnonzero(strata == s)) for s in range(4)])
    folds = np.empty(n, dtype=np.int64)
    folds[order] = np.arange(n) % k_folds
    return folds


def _fold_ok(folds, treatment, event, k):
    for f in range(k):
        tr = folds != f
        if np.unique(treatment[tr]).size < 2 or not event[tr].any():
            return False
    return True


@dataclass
class CrossFitResult:
    tau: np.ndarray
    folds: np.ndarray
    models: list


def cross_fit_cate(cohort, t_star, learner, k_folds=5, seed=0, nuisance=None, cate=None):
    """Out-of-fold CATE: Steps 1-2 on k-1 folds, predictions on the held-out fold."""
    if not isinstance(cohort, Cohort):
        raise DataError("cross_fit_cate expects a Cohort")
    X = cohort.design_matrix()
    names = cohort.schema.encoded_names()
    t_star = _resolve_t_star(t_star, cohort.time)
    folds = fold_assignment(cohort.treatment, cohort.event, k_folds, seed)
    if not _fold_ok(folds, cohort.treatment, cohort.event, k_folds):
        folds = fold_assignment(cohort.treatment, cohort.event, k_folds, seed + 1)
        if not _fold_ok(folds, cohort.treatment, cohort.event, k_folds):
            raise DataError("a training fold lacks a treatment arm or events")
    tau = np.full(cohort.n, np.nan)
    models = []
    for f in range(k_folds):
        tr = folds != f
        fold_seed = int(np.random.SeedSequence([int(seed), f]).generate_state(1)[0])
        est = SurvivalMetaLearner(learner, t_star, nuisance, cate, random_state=fold_seed)
        est.fit(X[tr], cohort.time[tr], cohort.event[tr], cohort.treatment[tr],
                feature_names=names)
        tau[~tr] = est.predict(X[~tr])
        models.append(est)
    return CrossFitResult(tau, folds, models)
