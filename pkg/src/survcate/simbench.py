"""Simulation designs, oracle truth, evaluation metrics and the benchmark harness.

Covariates: ``X1..X5 ~ N(0, 1)`` and ``X6..X10 = sign(N(0, 1))``. Potential
survival times follow a Weibull model ``T(a) = lambda_a * (-log U / exp(f_a))^(1/eta)``
with ``f_a = b(X) + h(X) * a``, ``eta = 2``, ``lambda_0 = 18`` and
``lambda_1 = 20``. Censoring is exponential and independent of everything else.
"""

import csv
import json
import math
import time as _time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import optimize
from scipy.special import expit

from .data import Covariate, Cohort, CovariateSchema
from .exceptions import ConfigError, DataError, SurvCateError
from .interpret import ShapConfig, attribution_score, kernel_shap, select_background
from .metalearners import (REQUIRED_NUISANCES, CateConfig, LearnerKind,
                           SurvivalMetaLearner, _resolve_t_star)
from .nuisance import NuisanceConfig, WeibullAFT, build_nuisance_bundle

SCENARIOS = ("S1", "S2", "S3")
DESIGNS = ("RCT", "balanced-obs", "unbalanced-obs")
_DESIGN_ALIASES = {"rct": "RCT", "balanced": "balanced-obs", "balanced-obs": "balanced-obs",
                   "unbalanced": "unbalanced-obs", "unbalanced-obs": "unbalanced-obs"}
ETA = 2.0
LAMBDA = (18.0, 20.0)
COVARIATE_NAMES = tuple(f"X{j}" for j in range(1, 11))
# zero-based columns entering h(X), i.e. the directly predictive covariates
PREDICTIVE_SETS = {"S1": (1, 4, 7), "S2": (1, 4, 7), "S3": (0, 1, 2, 4, 6, 7)}
COMPARATORS = ("Weib", "oracle")
METRICS = ("bias", "rmse", "acc", "ppv", "npv", "sensitivity", "specificity", "f_score",
           "attribution_score")


def _design(design):
    try:
        return _DESIGN_ALIASES[str(design).lower()]
    except KeyError:
        raise ConfigError(f"unknown design {design!r}; expected one of {DESIGNS}") from None


def _scenario(scenario):
    s = str(scenario).upper()
    if s not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    return s


@dataclass
class ScenarioSpec:
    scenario: str = "S1"
    design: str = "balanced-obs"
    n_train: int = 1000
    n_test: int = 10000
    target_time: str = "median"
    censor_rate: float = 0.30
    seed: int = 0
    binary_coding: str = "sign"

    def __post_init__(self):
        self.scenario = _scenario(self.scenario)
        self.design = _design(self.design)
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        if not 0 < self.censor_rate < 1:
            raise ConfigError("censor_rate must lie in (0, 1)")
        if self.target_time not in ("median", "p75"):
            raise ConfigError("target_time must be 'median' or 'p75'")
        if self.binary_coding not in ("sign", "01"):
            raise ConfigError("binary_coding must be 'sign' or '01'")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


def schema(binary_coding="sign"):
    levels = (-1.0, 1.0) if binary_coding == "sign" else (0.0, 1.0)
    return CovariateSchema(tuple(
        Covariate(n) if j < 5 else Covariate(n, "binary", levels)
        for j, n in enumerate(COVARIATE_NAMES)))


def _rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def generate_covariates(n, seed, binary_coding="sign"):
    """``(n, 10)`` covariate matrix; binaries in ``{-1, +1}`` (or ``{0, 1}``)."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = _rng(seed, 0)
    cont = rng.standard_normal((n, 5))
    latent = rng.standard_normal((n, 5))
    low = -1.0 if binary_coding == "sign" else 0.0
    return np.hstack([cont, np.where(latent > 0, 1.0, low)])


def propensity(X, design):
    design = _design(design)
    X = np.asarray(X, dtype=np.float64)
    if design == "RCT":
        return np.full(X.shape[0], 0.5)
    lin = (-0.8 * X[:, 0] + 0.5 * X[:, 1] - 0.9 * X[:, 2] - 0.9 * X[:, 3]
           + 0.6 * X[:, 5] + 0.7 * X[:, 6] - 0.8 * X[:, 7] - 0.9 * X[:, 8])
    if design == "balanced-obs":
        return expit(0.15 + lin)
    return expit(1.2 * (-1.2 + lin))


def assign_treatment(X, design, seed):
    """Bernoulli treatment draws; returns ``(A, e)``."""
    e = propensity(X, design)
    A = (_rng(seed, 1).random(e.shape[0]) < e).astype(np.int8)
    return A, e


def baseline(X, scenario):
    X = np.asarray(X, dtype=np.float64)
    x = [X[:, j] for j in range(10)]
    if _scenario(scenario) == "S1":
        return 0.25 * x[0] + 0.7 * x[2] + 0.5 * x[5] + 0.4 * x[6] + 0.3 * x[9]
    return (0.35 * np.exp(x[0]) + 0.4 * x[1] ** 2 + 0.7 * np.sin(x[2]) - 0.2 * x[4]
            + 0.6 * np.sin(x[5]) + 0.5 * x[6] + 0.45 * x[0] * x[7] - 0.15 * x[9])


def effect_modifier(X, scenario):
    X = np.asarray(X, dtype=np.float64)
    x = [X[:, j] for j in range(10)]
    if _scenario(scenario) in ("S1", "S2"):
        return -0.1 * x[1] + 0.95 * x[4] - 0.6 * x[7]
    return (-0.2 * x[0] ** 2 - 0.25 * x[1] * x[2] + 0.2 * np.exp(x[4]) - 0.3 * x[6]
            - 0.4 * x[2] * x[7])


def linear_predictor(X, a, scenario):
    return baseline(X, scenario) + effect_modifier(X, scenario) * np.asarray(a, dtype=np.float64)


def weibull_time(u, f, a):
    """Inverse-transform generator ``lambda_a * (-log u / exp(f))^(1/eta)``."""
    lam = np.where(np.asarray(a) == 1, LAMBDA[1], LAMBDA[0])
    return lam * (-np.log(u) / np.exp(f)) ** (1.0 / ETA)


def true_survival(X, a, t, scenario):
    """Closed form ``S_a(t | x) = exp(-(t / lambda_a)^eta * exp(f_a(x)))``."""
    a_arr = np.broadcast_to(np.asarray(a), (np.asarray(X).shape[0],))
    f = linear_predictor(X, a_arr, scenario)
    lam = np.where(a_arr == 1, LAMBDA[1], LAMBDA[0])
    return np.exp(-((float(t) / lam) ** ETA) * np.exp(f))


def true_survival_numeric(X, a, t, scenario):
    """Oracle by inverting the generator numerically.

    ``T(u)`` decreases in ``u``, so ``P(T > t) = u*`` where ``T(u*) = t``.
    """
    a_arr = np.broadcast_to(np.asarray(a), (np.asarray(X).shape[0],))
    f = linear_predictor(X, a_arr, scenario)
    out = np.empty(f.shape[0])
    for i in range(f.shape[0]):
        # search over v = log(u) so that tiny survival probabilities stay well scaled
        g = lambda v, i=i: float(weibull_time(np.exp(v), f[i], a_arr[i])) - float(t)
        lo, hi = -745.0, math.log1p(-1e-16)
        if g(lo) <= 0:
            out[i] = 0.0
        elif g(hi) >= 0:
            out[i] = 1.0
        else:
            out[i] = math.exp(optimize.brentq(g, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500))
    return out


def true_cate(X, t, scenario):
    return true_survival(X, 1, t, scenario) - true_survival(X, 0, t, scenario)


@dataclass
class Outcomes:
    T0: np.ndarray
    T1: np.ndarray
    T: np.ndarray
    C: np.ndarray
    time: np.ndarray
    event: np.ndarray


def generate_outcomes(X, A, scenario, seed, censor_rate_param=0.0):
    """Potential and observed outcomes; ``censor_rate_param`` is the exponential rate.

    Both potential times share one uniform draw, so they are comonotone.
    A rate of 0 means no censoring.
    """
    A = np.asarray(A)
    rng = _rng(seed, 2)
    u = rng.random(A.shape[0])
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    T0 = weibull_time(u, linear_predictor(X, 0, scenario), 0)
    T1 = weibull_time(u, linear_predictor(X, 1, scenario), 1)
    T = np.where(A == 1, T1, T0)
    if censor_rate_param > 0:
        C = _rng(seed, 3).exponential(1.0 / censor_rate_param, A.shape[0])
    else:
        C = np.full(A.shape[0], np.inf)
    event = T < C
    return Outcomes(T0, T1, T, C, np.minimum(T, C), event)


def calibrate_censoring(scenario, design, target_rate=0.30, seed=0, n_probe=100_000,
                        binary_coding="sign"):
    """Exponential censoring rate giving ``target_rate`` censoring.

    The censoring fraction over an ``n_probe`` draw of ``(X, A, T)`` is
    ``mean(1 - exp(-rate * T))``; its root in ``rate`` is found with Brent's
    method.
    """
    if not 0.01 <= target_rate < 1:
        raise ConfigError("target censoring rate must lie in [0.01, 1)")
    X = generate_covariates(n_probe, seed, binary_coding)
    A, _ = assign_treatment(X, design, seed)
    T = generate_outcomes(X, A, scenario, seed).T

    def gap(r):
        return float(np.mean(-np.expm1(-r * T))) - target_rate

    lo, hi = 1e-12, 1.0 / float(np.median(T))
    for _ in range(200):
        if gap(hi) > 0:
            break
        hi *= 2.0
    else:
        raise DataError("could not bracket the censoring rate")
    return float(optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=1e-12))


@dataclass
class SimulatedCohort:
    """A simulated cohort with its oracle columns at ``t_star``."""

    cohort: Cohort
    propensity: np.ndarray
    T0: np.ndarray
    T1: np.ndarray
    C: np.ndarray
    scenario: str
    design: str
    t_star: float = math.nan
    S0: np.ndarray = None
    S1: np.ndarray = None
    tau: np.ndarray = None

    @property
    def X(self):
        return self.cohort.design_matrix()

    def with_target(self, t_star):
        X = self.cohort.covariates
        self.t_star = float(t_star)
        self.S0 = true_survival(X, 0, t_star, self.scenario)
        self.S1 = true_survival(X, 1, t_star, self.scenario)
        self.tau = self.S1 - self.S0
        return self

    def oracle_columns(self):
        return {"true_e": self.propensity, "true_S0": self.S0, "true_S1": self.S1,
                "true_tau": self.tau, "T0": self.T0, "T1": self.T1, "C": self.C}


def simulate_cohort(scenario, design, n, seed, rate, binary_coding="sign", t_star=None):
    """One simulated cohort; ``t_star=None`` leaves the oracle columns unset."""
    X = generate_covariates(n, seed, binary_coding)
    A, e = assign_treatment(X, design, seed)
    out = generate_outcomes(X, A, scenario, seed, rate)
    if not (np.array_equal(out.time, np.minimum(np.where(A == 1, out.T1, out.T0), out.C))
            and np.array_equal(out.event, np.where(A == 1, out.T1, out.T0) < out.C)):
        raise DataError("generator consistency violated")
    cohort = Cohort(schema(binary_coding), out.time, out.event, A, X)
    sim = SimulatedCohort(cohort, e, out.T0, out.T1, out.C, _scenario(scenario), _design(design))
    return sim if t_star is None else sim.with_target(t_star)


def target_time(time, rule="median"):
    return _resolve_t_star(rule, np.asarray(time))


def simulate_pair(spec, rate=None, seed=None):
    """Train and test cohorts for ``spec`` with ``t*`` set from the training times."""
    seed = spec.seed if seed is None else seed
    if rate is None:
        rate = calibrate_censoring(spec.scenario, spec.design, spec.censor_rate, seed,
                                   binary_coding=spec.binary_coding)
    s_train, s_test = np.random.SeedSequence([int(seed), 0x5117]).generate_state(2)
    train = simulate_cohort(spec.scenario, spec.design, spec.n_train, int(s_train), rate,
                            spec.binary_coding)
    t_star = target_time(train.cohort.time, spec.target_time)
    train.with_target(t_star)
    test = simulate_cohort(spec.scenario, spec.design, spec.n_test, int(s_test), rate,
                           spec.binary_coding, t_star)
    return train, test, rate


def evaluate_predictions(tau_hat, tau_true, Q=50):
    """Bias and binned RMSE over ``Q`` bins of the true-CATE ordering.

    Bins are contiguous slices of the stable sort of ``tau_true``; when ``n``
    is not a multiple of ``Q`` the leading bins get one extra subject.
    """
    tau_hat = np.asarray(tau_hat, dtype=np.float64).ravel()
    tau_true = np.asarray(tau_true, dtype=np.float64).ravel()
    if tau_hat.shape != tau_true.shape:
        raise DataError("tau_hat and tau_true lengths differ")
    if Q < 1 or Q > tau_true.shape[0]:
        raise ConfigError(f"Q must lie in [1, n={tau_true.shape[0]}]")
    diff = tau_hat - tau_true
    order = np.argsort(tau_true, kind="stable")
    rmse = np.mean([np.sqrt(np.mean(diff[b] ** 2)) for b in np.array_split(order, Q)])
    return {"bias": float(diff.mean()), "rmse": float(rmse)}


def _ratio(a, b):
    return a / b if b > 0 else math.nan


def classification_metrics(tau_hat, tau_true):
    """Sign-agreement rates; a true CATE ``<= 0`` counts as negative.

    Ratios with a zero denominator are NaN.
    """
    tau_hat = np.asarray(tau_hat, dtype=np.float64).ravel()
    tau_true = np.asarray(tau_true, dtype=np.float64).ravel()
    if tau_hat.shape != tau_true.shape:
        raise DataError("tau_hat and tau_true lengths differ")
    pos, pred = tau_true > 0, tau_hat > 0
    tp = int(np.sum(pos & pred))
    fp = int(np.sum(~pos & pred))
    tn = int(np.sum(~pos & ~pred))
    fn = int(np.sum(pos & ~pred))
    ppv, sens = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    if math.isnan(ppv) or math.isnan(sens):
        f = math.nan
    else:
        f = 0.0 if ppv == 0 or sens == 0 else 2.0 / (1.0 / ppv + 1.0 / sens)
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn,
            "acc": _ratio(tp + tn, tp + fp + tn + fn), "ppv": ppv,
            "npv": _ratio(tn, tn + fn), "sensitivity": sens,
            "specificity": _ratio(tn, tn + fp), "f_score": f}


class WeibullCate:
    """Per-arm Weibull regression comparator: ``S1(t*|x) - S0(t*|x)``."""

    def __init__(self, t_star):
        self.t_star = t_star

    def fit(self, X, time, event, treatment):
        self.models_ = {a: WeibullAFT().fit(X[treatment == a], time[treatment == a],
                                            event[treatment == a]) for a in (0, 1)}
        return self

    def predict(self, X):
        return (self.models_[1].predict_survival(X, self.t_star)
                - self.models_[0].predict_survival(X, self.t_star))


class OracleCate:
    def __init__(self, t_star, scenario):
        self.t_star, self.scenario = t_star, scenario

    def predict(self, X):
        return true_cate(X, self.t_star, self.scenario)


@dataclass
class BenchConfig:
    """Benchmark settings; ``attribution`` is a bool or the learners to explain."""

    learners: tuple = ("X", "M", "DR", "D", "DEA", "R")
    reps: int = 10
    Q: int = 50
    attribution: object = True
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    cate: CateConfig = field(default_factory=CateConfig)
    shap: ShapConfig = field(default_factory=ShapConfig)
    n_jobs: int = 1

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        names = []
        for l in self.learners:
            names.append(l if l in COMPARATORS else LearnerKind.parse(l).value)
        if not names or len(set(names)) != len(names):
            raise ConfigError("learners must be a nonempty set")
        self.learners = tuple(names)
        if isinstance(self.attribution, (list, tuple)):
            self.attribution = tuple(
                l if l in COMPARATORS else LearnerKind.parse(l).value for l in self.attribution)

    def wants_attribution(self, learner):
        if isinstance(self.attribution, tuple):
            return learner in self.attribution
        return bool(self.attribution)


@dataclass
class MetricReport:
    """Per-replicate metrics plus their mean/sd aggregation per learner."""

    spec: ScenarioSpec
    rows: list
    censor_rate_param: float

    @property
    def learners(self):
        seen = []
        for r in self.rows:
            if r["learner"] not in seen:
                seen.append(r["learner"])
        return seen

    def failures(self):
        return [r for r in self.rows if r["error"]]

    def values(self, learner, metric):
        return np.array([r[metric] for r in self.rows if r["learner"] == learner], float)

    def aggregate(self):
        out = {}
        for learner in self.learners:
            block = {}
            for m in METRICS:
                v = self.values(learner, m)
                ok = v[np.isfinite(v)]
                block[m] = {
                    "mean": float(ok.mean()) if ok.size else None,
                    "sd": float(ok.std(ddof=1)) if ok.size > 1 else None,
                    "n": int(ok.size),
                    "n_undefined": int(v.size - ok.size),
                }
            block["n_failed"] = sum(1 for r in self.rows if r["learner"] == learner and r["error"])
            out[learner] = block
        return out

    def to_dict(self):
        return {"spec": asdict(self.spec), "censor_rate_param": self.censor_rate_param,
                "learners": self.learners, "aggregate": self.aggregate()}

    _columns = ("rep", "learner", "t_star", *METRICS, "tp", "fp", "tn", "fn", "error")

    def write_per_replicate(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "design", *self._columns])
            for r in self.rows:
                w.writerow([self.spec.scenario, self.spec.design,
                            *(_cell(r.get(c)) for c in self._columns)])

    def write_long(self, path):
        """Plot-ready long table (bias, RMSE, attribution score by learner)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "design", "learner", "rep", "metric", "value"])
            for r in self.rows:
                for m in ("bias", "rmse", "attribution_score"):
                    w.writerow([self.spec.scenario, self.spec.design, r["learner"], r["rep"],
                                m, _cell(r[m])])

    def write_aggregate(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_json_safe(self.to_dict()), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "NA"
    return str(v)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _empty_row(rep, learner, t_star):
    row = {"rep": rep, "learner": learner, "t_star": t_star, "error": "", "runtime": 0.0}
    row.update({m: math.nan for m in METRICS})
    row.update(tp=None, fp=None, tn=None, fn=None)
    return row


def run_replicate(spec, config, rep, seed, rate):
    """Fit and score every learner on one simulated train/test pair."""
    s_data, s_fit, s_shap = np.random.SeedSequence([int(seed), int(rep)]).generate_state(3)
    train, test, _ = simulate_pair(spec, rate, int(s_data))
    t_star = train.t_star
    Xtr, Xte = train.X, test.X
    c = train.cohort
    names = c.schema.encoded_names()
    meta = [l for l in config.learners if l not in COMPARATORS]
    need = sorted({q for l in meta for q in REQUIRED_NUISANCES[LearnerKind(l)]})
    bundle, bundle_error, t_bundle = None, "", 0.0
    if meta:
        t0 = _time.perf_counter()
        try:
            bundle = build_nuisance_bundle(c, t_star, config.nuisance, int(s_fit), need)
        except (SurvCateError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            bundle_error = f"{type(exc).__name__}: {exc}"
        t_bundle = _time.perf_counter() - t0
    subjects = Xte[: config.shap.subject_cap]
    background = select_background(Xtr, config.shap.background_size, int(s_shap))
    shap_cfg = ShapConfig(**{**asdict(config.shap), "seed": int(s_shap)})
    rows = []
    for learner in config.learners:
        row = _empty_row(rep, learner, t_star)
        t0 = _time.perf_counter()
        try:
            if learner == "oracle":
                model = OracleCate(t_star, spec.scenario)
            elif learner == "Weib":
                model = WeibullCate(t_star).fit(Xtr, c.time, c.event, c.treatment)
            else:
                if bundle is None:
                    raise DataError(f"nuisance estimation failed ({bundle_error})")
                model = SurvivalMetaLearner(learner, t_star, config.nuisance, config.cate,
                                            random_state=int(s_fit))
                model.fit(Xtr, c.time, c.event, c.treatment, feature_names=names,
                          bundle=bundle)
            tau_hat = model.predict(Xte)
            if not np.all(np.isfinite(tau_hat)):
                raise DataError("non-finite CATE predictions")
            row.update(evaluate_predictions(tau_hat, test.tau, config.Q))
            row.update(classification_metrics(tau_hat, test.tau))
            if config.wants_attribution(learner):
                shap = kernel_shap(model, subjects, background, shap_cfg, names=names)
                try:
                    row["attribution_score"] = attribution_score(
                        shap, PREDICTIVE_SETS[spec.scenario]).score
                except DataError:
                    row["attribution_score"] = math.nan
        except (SurvCateError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        row["runtime"] = _time.perf_counter() - t0 + (t_bundle if learner in meta else 0.0)
        rows.append(row)
    return rows


def run_benchmark(spec, config=None, seed=None, rate=None):
    """Multi-replicate comparison of learners on one scenario and design.

    Replicate ``r`` draws its data and model seeds from ``(seed, r)``, so the
    report does not depend on ``n_jobs``. Learner failures are recorded in
    the ``error`` column and the run continues.
    """
    config = config or BenchConfig()
    seed = spec.seed if seed is None else int(seed)
    if rate is None:
        rate = calibrate_censoring(spec.scenario, spec.design, spec.censor_rate, seed,
                                   binary_coding=spec.binary_coding)
    reps = range(config.reps)
    if config.n_jobs == 1:
        per_rep = [run_replicate(spec, config, r, seed, rate) for r in reps]
    else:
        from joblib import Parallel, delayed
        per_rep = Parallel(n_jobs=config.n_jobs)(
            delayed(run_replicate)(spec, config, r, seed, rate) for r in reps)
    order = {l: k for k, l in enumerate(config.learners)}
    rows = sorted((r for block in per_rep for r in block),
                  key=lambda r: (r["rep"], order[r["learner"]]))
    return MetricReport(spec, rows, rate)
