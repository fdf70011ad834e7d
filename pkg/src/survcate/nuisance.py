"""Step-1 nuisance estimators: survival curves, propensity, censoring weights."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Cohort, TargetTime, complete_case_view
from .exceptions import ConfigError, ConvergenceError, DataError
from .forest import PropensityForest, RandomSurvivalForest
from .validation import check_covariates, check_survival


class KaplanMeier(BaseEstimator):
    """Product-limit survival estimator.

    After ``fit`` the step function is available as ``event_times_``,
    ``survival_``, ``n_at_risk_`` and ``n_events_``. :meth:`predict` is
    right-continuous (value at the largest event time ``<= t``);
    :meth:`predict_left` returns ``S(t-)``.
    """

    def fit(self, time, event):
        time, event = check_survival(time, event)
        uniq, inv = np.unique(time, return_inverse=True)
        deaths = np.bincount(inv, weights=event.astype(np.float64), minlength=uniq.size)
        counts = np.bincount(inv, minlength=uniq.size)
        at_risk = counts[::-1].cumsum()[::-1]
        keep = deaths > 0
        t, d, r = uniq[keep], deaths[keep], at_risk[keep].astype(np.float64)
        self.event_times_ = t
        self.n_events_ = d.astype(np.int64)
        self.n_at_risk_ = r.astype(np.int64)
        self.survival_ = np.cumprod(1.0 - d / r)
        self.max_time_ = float(time.max())
        return self

    def _step(self, times, side):
        check_is_fitted(self, "survival_")
        times = np.asarray(times, dtype=np.float64)
        pos = np.searchsorted(self.event_times_, times, side=side)
        # leading 1.0 covers times before the first event (and event-free fits)
        return np.concatenate(([1.0], self.survival_))[pos]

    def predict(self, times):
        return self._step(times, "right")

    def predict_left(self, times):
        return self._step(times, "left")

    def predict_survival(self, X, times):
        """Covariate-free prediction broadcast to ``len(X)`` rows."""
        s = self.predict(times)
        n = np.asarray(X).shape[0]
        return np.broadcast_to(s, (n,) + np.shape(s)).copy()


class CensoringModel(BaseEstimator):
    """Kaplan-Meier fit of the censoring distribution, optionally per arm.

    Censoring is treated as the event (``1 - delta``). :meth:`survival_before`
    evaluates ``G(t-) = P(C >= t)``, the probability of remaining uncensored
    up to (not including) ``t``.
    """

    def __init__(self, stratify_by_arm=True):
        self.stratify_by_arm = stratify_by_arm

    def fit(self, time, event, treatment=None):
        time, event = check_survival(time, event)
        self.curves_ = {}
        if self.stratify_by_arm:
            if treatment is None:
                raise DataError("stratified censoring model needs treatment")
            treatment = np.asarray(treatment).ravel()
            for arm in (0, 1):
                m = treatment == arm
                if not m.any():
                    raise DataError(f"treatment arm {arm} has no rows")
                self.curves_[arm] = KaplanMeier().fit(time[m], ~event[m])
        else:
            self.curves_[None] = KaplanMeier().fit(time, ~event)
        return self

    def _curve(self, arm):
        check_is_fitted(self, "curves_")
        return self.curves_[arm if self.stratify_by_arm else None]

    def survival(self, times, treatment=None):
        return self._eval(times, treatment, left=False)

    def survival_before(self, times, treatment=None):
        return self._eval(times, treatment, left=True)

    def _eval(self, times, treatment, left):
        times = np.asarray(times, dtype=np.float64)
        if not self.stratify_by_arm:
            c = self._curve(None)
            return c.predict_left(times) if left else c.predict(times)
        if treatment is None:
            raise DataError("stratified censoring model needs treatment")
        treatment = np.broadcast_to(np.asarray(treatment), times.shape)
        out = np.empty(times.shape)
        for arm in (0, 1):
            m = treatment == arm
            c = self._curve(arm)
            out[m] = c.predict_left(times[m]) if left else c.predict(times[m])
        return out


class WeibullAFT(BaseEstimator):
    """Weibull regression ``S(t|x) = exp(-(t/scale)^shape * exp(x @ coef))``.

    Fitted by maximising the right-censored log-likelihood over
    ``(log shape, log scale, coef)`` with BFGS and the analytic score.
    """

    def __init__(self, max_iter=500, gtol=1e-8):
        self.max_iter = max_iter
        self.gtol = gtol

    @staticmethod
    def _unpack(theta):
        return math.exp(theta[0]), math.exp(theta[1]), np.asarray(theta[2:])

    @staticmethod
    def loglik(theta, X, time, event):
        """Log-likelihood and its gradient at ``theta = (log shape, log scale, coef)``."""
        eta = math.exp(theta[0])
        b = theta[1]
        beta = np.asarray(theta[2:])
        lp = X @ beta if beta.size else np.zeros(time.shape[0])
        z = eta * (np.log(time) - b)
        H = np.exp(z + lp)
        d = event.astype(np.float64)
        ll = np.sum(d * (theta[0] + (eta - 1.0) * np.log(time) - eta * b + lp)) - H.sum()
        grad = np.empty(len(theta))
        grad[0] = np.sum(d * (1.0 + z)) - np.sum(H * z)
        grad[1] = eta * np.sum(H - d)
        if beta.size:
            grad[2:] = X.T @ (d - H)
        return ll, grad

    def fit(self, X, time, event):
        if np.ndim(X) == 2 and np.shape(X)[1] == 0:
            X = np.zeros((len(time), 0))
        else:
            X = check_covariates(X)
        time, event = check_survival(time, event)
        if np.any(time <= 0):
            raise DataError("Weibull likelihood needs strictly positive times")
        p = X.shape[1]
        if event.sum() < p + 2:
            raise DataError(f"Weibull fit needs at least {p + 2} events, got {int(event.sum())}")
        logt = np.log(time)
        sd = logt.std()
        eta0 = math.pi / (sd * math.sqrt(6.0)) if sd > 0 else 1.0
        theta0 = np.zeros(p + 2)
        theta0[0] = math.log(eta0)
        theta0[1] = logt.mean() + np.euler_gamma / eta0
        trace = []

        def neg(theta):
            ll, g = self.loglik(theta, X, time, event)
            return -ll, -g

        res = optimize.minimize(neg, theta0, jac=True, method="BFGS",
                                options={"maxiter": self.max_iter, "gtol": self.gtol},
                                callback=lambda th: trace.append(-neg(th)[0]))
        gnorm = float(np.linalg.norm(res.jac))
        # BFGS may stop on precision loss at the optimum; accept a tiny score
        if not res.success and gnorm > 1e-4 * time.shape[0]:
            raise ConvergenceError(
                f"Weibull MLE did not converge ({res.message}); gradient norm {gnorm:.3g}",
                grad_norm=gnorm)
        self.theta_ = res.x
        self.shape_, self.scale_, self.coef_ = self._unpack(res.x)
        self.loglik_ = -float(res.fun)
        self.loglik_trace_ = np.array(trace)
        self.grad_norm_ = gnorm
        self.n_features_in_ = p
        return self

    def predict_survival(self, X, times):
        check_is_fitted(self, "theta_")
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.n_features_in_)
        times = np.asarray(times, dtype=np.float64)
        lp = X @ self.coef_ if self.n_features_in_ else np.zeros(X.shape[0])
        scalar = times.ndim == 0
        t = np.atleast_1d(times)
        if np.any(t < 0):
            raise DataError("prediction times must be nonnegative")
        S = np.exp(-((t[None, :] / self.scale_) ** self.shape_) * np.exp(lp)[:, None])
        return S[:, 0] if scalar else S


def fit_kaplan_meier(times, events):
    return KaplanMeier().fit(times, events)


def fit_censoring_model(cohort, stratify_by_arm=True):
    return CensoringModel(stratify_by_arm).fit(cohort.time, cohort.event, cohort.treatment)


def fit_survival_forest(cohort, seed=0, **hyperparameters):
    X = cohort.design_matrix()
    return RandomSurvivalForest(random_state=seed, **hyperparameters).fit(
        X, cohort.time, cohort.event, feature_names=cohort.schema.encoded_names())


def fit_propensity_forest(cohort, seed=0, **hyperparameters):
    X = cohort.design_matrix()
    return PropensityForest(random_state=seed, **hyperparameters).fit(
        X, cohort.treatment, feature_names=cohort.schema.encoded_names())


def fit_weibull_aft(cohort, **kwargs):
    return WeibullAFT(**kwargs).fit(cohort.design_matrix(), cohort.time, cohort.event)


def predict_survival(model, x, t):
    """Survival probability ``S(t | x)`` from any fitted survival model."""
    if isinstance(model, KaplanMeier):
        x = np.atleast_2d(x)
        return model.predict_survival(x, t)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return model.predict_survival(x, t)


@dataclass
class NuisanceConfig:
    """Hyperparameters for Step-1 estimation."""

    rsf_trees: int = 500
    rsf_mtry: object = "sqrt"
    rsf_min_leaf_events: int = 5
    rsf_max_depth: object = None
    propensity_trees: int = 500
    propensity_mtry: object = "sqrt"
    propensity_min_leaf: int = 1
    clip: float = 0.01
    w_max: float = 20.0
    stratify_censoring: bool = True
    oob: bool = True
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.clip < 0.5:
            raise ConfigError("clip must lie in (0, 0.5)")
        if self.w_max < 1:
            raise ConfigError("w_max must be >= 1")


@dataclass
class NuisanceBundle:
    """Per-subject Step-1 estimates for one cohort at one target time.

    ``w_censor`` is defined on complete-case rows only (NaN elsewhere).
    """

    t_star: float
    e: np.ndarray
    S0: np.ndarray
    S1: np.ndarray
    S: np.ndarray
    G: np.ndarray
    w_censor: np.ndarray
    complete: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return self.e.shape[0]


def censoring_weights(censoring, cohort, t_star, w_max):
    """IPCW ``1 / G(min(U, t*)-)`` on complete cases, capped at ``w_max``.

    Returns ``(G, w, complete_mask, n_capped)``.
    """
    view = complete_case_view(cohort, t_star)
    complete = np.zeros(cohort.n, dtype=bool)
    complete[view.indices] = True
    tmin = np.minimum(cohort.time, t_star)
    G = censoring.survival_before(tmin, cohort.treatment)
    w = np.full(cohort.n, np.nan)
    with np.errstate(divide="ignore"):
        raw = np.where(G > 0, 1.0 / np.where(G > 0, G, 1.0), np.inf)
    capped = complete & (raw > w_max)
    w[complete] = np.minimum(raw[complete], w_max)
    return G, w, complete, int(capped.sum())


def build_nuisance_bundle(cohort, t_star, config=None, seed=0, need=("e", "S0", "S1", "S")):
    """Fit Step-1 models on ``cohort`` and evaluate them at ``t_star`` per subject.

    Arm-specific forests give ``S0``/``S1`` (own-arm rows use out-of-bag
    predictions when ``config.oob``); a pooled forest gives ``S``. Requested
    quantities not in ``need`` are left as NaN.
    """
    config = config or NuisanceConfig()
    if not isinstance(cohort, Cohort):
        raise DataError("build_nuisance_bundle expects a Cohort")
    t = TargetTime(t_star).check_against(cohort).t_star
    X = cohort.design_matrix()
    names = cohort.schema.encoded_names()
    n = cohort.n
    a = cohort.treatment
    nan = np.full(n, np.nan)
    models, diag = {}, {}
    seeds = np.random.SeedSequence(seed).generate_state(4)

    e = nan.copy()
    if "e" in need:
        prop = PropensityForest(
            n_estimators=config.propensity_trees, mtry=config.propensity_mtry,
            min_samples_leaf=config.propensity_min_leaf, clip=config.clip,
            random_state=int(seeds[0]), n_jobs=config.threads,
        ).fit(X, a, feature_names=names)
        e = prop.predict_propensity_oob(X) if config.oob else prop.predict_propensity(X)
        diag["propensity_clipped"] = prop.n_clipped_
        models["propensity"] = prop

    def rsf(rows, s):
        if not cohort.event[rows].any():
            raise DataError("survival forest subset has no events")
        return RandomSurvivalForest(
            n_estimators=config.rsf_trees, mtry=config.rsf_mtry,
            min_leaf_events=config.rsf_min_leaf_events, max_depth=config.rsf_max_depth,
            random_state=int(s), n_jobs=config.threads,
        ).fit(X[rows], cohort.time[rows], cohort.event[rows], feature_names=names)

    arm_S = {0: nan.copy(), 1: nan.copy()}
    if "S0" in need or "S1" in need:
        for arm, s in ((0, seeds[1]), (1, seeds[2])):
            rows = np.flatnonzero(a == arm)
            if rows.size == 0:
                raise DataError(f"treatment arm {arm} has no rows")
            forest = rsf(rows, s)
            pred = forest.predict_survival(X, t)
            if config.oob:
                pred[rows] = forest.predict_survival_oob(X[rows], t)
            arm_S[arm] = pred
            models[f"rsf{arm}"] = forest

    S = nan.copy()
    if "S" in need:
        forest = rsf(np.arange(n), seeds[3])
        S = forest.predict_survival_oob(X, t) if config.oob else forest.predict_survival(X, t)
        models["rsf"] = forest

    censoring = CensoringModel(config.stratify_censoring).fit(cohort.time, cohort.event, a)
    models["censoring"] = censoring
    G, w, complete, n_capped = censoring_weights(censoring, cohort, t, config.w_max)
    diag.update(
        n=n,
        n_complete=int(complete.sum()),
        w_censor_capped=n_capped,
        w_censor_max=float(np.nanmax(w)) if complete.any() else float("nan"),
        t_star=t,
    )
    return NuisanceBundle(t, e, arm_S[0], arm_S[1], S, G, w, complete, diag, models)
