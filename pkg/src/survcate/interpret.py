"""KernelSHAP attributions for fitted CATE models.

Masked covariates are filled from background rows and the prediction is
averaged over the background (marginal, interventional masking). Shapley
values then solve the Shapley-kernel weighted least-squares problem, with the
efficiency constraint ``phi_0 + sum(phi) = f(x)`` eliminated by substitution.
Covariates whose subject value equals every background value cannot change
any composite and receive exactly zero.
"""

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DataError, NumericalError
from .validation import check_covariates


@dataclass
class ShapConfig:
    """KernelSHAP tuning.

    ``coalition_budget`` bounds the non-trivial coalitions evaluated per
    subject in sampled mode; ``None`` means ``2 * p + 2048``.
    """

    background_size: int = 100
    coalition_budget: object = None
    exact_threshold: int = 10
    seed: int = 0
    subject_cap: int = 100
    batch_rows: int = 200_000

    def __post_init__(self):
        if self.background_size < 1:
            raise ConfigError("background_size must be >= 1")
        if not 0 <= self.exact_threshold <= 15:
            raise ConfigError("exact_threshold must lie in [0, 15]")
        if self.subject_cap < 1:
            raise ConfigError("subject_cap must be >= 1")


@dataclass
class ShapMatrix:
    values: np.ndarray
    base_value: float
    subjects: np.ndarray
    names: list
    predictions: np.ndarray = None
    mode: str = "exact"

    @property
    def shape(self):
        return self.values.shape

    def additivity_error(self):
        """Largest ``|phi_0 + sum_j v_ij - f(x_i)|`` over rows."""
        return float(np.max(np.abs(self.base_value + self.values.sum(axis=1) - self.predictions)))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject", *self.names])
            for s, row in zip(self.subjects, self.values):
                w.writerow([int(s), *(repr(float(v)) for v in row)])

    def summary(self, groups=None):
        return {
            "base_value": float(self.base_value),
            "mode": self.mode,
            "n_subjects": int(self.values.shape[0]),
            "ranking": vip_summary(self, groups),
        }


@dataclass
class AttributionScore:
    score: float
    predictive_set: tuple
    n_excluded: int = 0
    per_subject: np.ndarray = field(default=None, repr=False)


def _predictor(model):
    if callable(model) and not hasattr(model, "predict"):
        return model
    return model.predict


def select_background(X, size, seed):
    """Seeded subsample of ``size`` rows (all rows when fewer are available)."""
    X = check_covariates(X)
    if X.shape[0] <= size:
        return X.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBA5E]))
    return X[np.sort(rng.choice(X.shape[0], size, replace=False))]


def _shapley_kernel(m, s):
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def _all_coalitions(m):
    """Every non-trivial coalition of ``m`` players with its Shapley-kernel weight."""
    codes = np.arange(1, 2 ** m - 1, dtype=np.int64)
    Z = ((codes[:, None] >> np.arange(m)[None, :]) & 1).astype(np.float64)
    sizes = Z.sum(axis=1).astype(int)
    w = np.array([_shapley_kernel(m, s) for s in sizes])
    return Z, w


def _sampled_coalitions(m, budget, rng):
    """Shapley-kernel coalition design within ``budget`` evaluations.

    Size classes (paired with their complements) are enumerated completely
    while the budget covers their expected share; the remaining kernel mass
    is spread over coalitions drawn in complementary pairs.
    """
    n_sizes = math.ceil((m - 1) / 2)
    n_paired = (m - 1) // 2
    kw = np.array([(m - 1) / (s * (m - s)) for s in range(1, n_sizes + 1)])
    kw[:n_paired] *= 2
    kw /= kw.sum()
    rows, weights = [], []
    remaining = budget
    mass_left = 1.0
    full_sizes = 0
    for i, s in enumerate(range(1, n_sizes + 1)):
        n_subsets = math.comb(m, s) * (2 if i < n_paired else 1)
        share = kw[i:].sum()
        if remaining * kw[i] / share < n_subsets - 1e-8:
            break
        full_sizes += 1
        w_each = kw[i] / math.comb(m, s) / (2 if i < n_paired else 1)
        for combo in itertools.combinations(range(m), s):
            z = np.zeros(m)
            z[list(combo)] = 1.0
            rows.append(z)
            weights.append(w_each)
            if i < n_paired:
                rows.append(1.0 - z)
                weights.append(w_each)
        remaining -= n_subsets
        mass_left -= kw[i]
    if full_sizes < n_sizes and remaining > 0:
        rest = kw[full_sizes:] / kw[full_sizes:].sum()
        sizes = np.arange(full_sizes + 1, n_sizes + 1)
        seen = {}
        draws = 0
        while remaining > 0 and draws < 50 * budget:
            draws += 1
            s = int(rng.choice(sizes, p=rest))
            z = np.zeros(m)
            z[rng.choice(m, s, replace=False)] = 1.0
            for zz in (z, 1.0 - z) if (2 * s != m) else (z,):
                key = zz.tobytes()
                if key in seen:
                    weights[seen[key]] += 1.0
                elif remaining > 0:
                    seen[key] = len(rows)
                    rows.append(zz)
                    weights.append(1.0)
                    remaining -= 1
        sampled = np.array(list(seen.values()), dtype=np.int64)
        if sampled.size:
            w = np.asarray(weights)
            w[sampled] *= mass_left / w[sampled].sum()
            weights = list(w)
    return np.array(rows).reshape(-1, m), np.array(weights)


def _solve(Z, w, y, delta):
    """Constrained Shapley-kernel WLS with ``sum(phi) = delta``.

    The last player is eliminated by substitution: ``phi_m = delta - sum(others)``.
    """
    m = Z.shape[1]
    if m == 1:
        return np.array([delta])
    last = Z[:, -1]
    A = Z[:, :-1] - last[:, None]
    b = y - last * delta
    Aw = A * w[:, None]
    phi = np.linalg.lstsq(Aw.T @ A, Aw.T @ b, rcond=None)[0]
    return np.append(phi, delta - phi.sum())


def kernel_shap(model, subjects, background, config=None, subject_index=None, names=None):
    """Shapley attributions of ``model`` predictions for each row of ``subjects``.

    ``model`` is anything with ``predict`` or a plain callable on 2-d arrays.
    Exact enumeration is used when the number of varying covariates is at
    most ``config.exact_threshold``; otherwise coalitions are sampled within
    ``config.coalition_budget``.
    """
    config = config or ShapConfig()
    f = _predictor(model)
    X = check_covariates(subjects)
    if np.shape(background)[0] == 0:
        raise DataError("background set is empty")
    bg = check_covariates(background, X.shape[1])
    n, p = X.shape
    budget = config.coalition_budget
    budget = 2 * p + 2048 if budget is None else int(budget)
    if p > config.exact_threshold and budget < p + 2:
        raise ConfigError(f"coalition_budget {budget} is below p + 2 = {p + 2}")
    try:
        fx = np.asarray(f(X), dtype=np.float64)
        fbg = np.asarray(f(bg), dtype=np.float64)
    except (ValueError, ArithmeticError) as exc:
        raise NumericalError(f"model prediction failed: {exc}") from exc
    # a flat background keeps its exact value (the float mean may drift by an ulp)
    base = float(fbg[0]) if np.all(fbg == fbg[0]) else float(np.mean(fbg))
    values = np.zeros((n, p))
    mode = "exact" if p <= config.exact_threshold else "sampled"
    cache = {}
    for i in range(n):
        x = X[i]
        varying = np.flatnonzero(np.any(bg != x[None, :], axis=0))
        m = varying.size
        delta = fx[i] - base
        if m == 0:
            continue
        if m == 1:
            values[i, varying[0]] = delta
            continue
        if m <= config.exact_threshold or 2 ** m - 2 <= budget:
            if m not in cache:
                cache[m] = _all_coalitions(m)
            Z, w = cache[m]
        else:
            rng = np.random.default_rng(np.random.SeedSequence(
                [int(config.seed), i if subject_index is None else int(subject_index[i])]))
            Z, w = _sampled_coalitions(m, budget, rng)
        try:
            y = _coalition_values(f, x, bg, varying, Z, config.batch_rows)
        except (ValueError, ArithmeticError) as exc:
            raise NumericalError(f"prediction failed on a masked composite: {exc}") from exc
        values[i, varying] = _solve(Z, w, y - base, delta)
    subj = np.arange(n) if subject_index is None else np.asarray(subject_index)
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    out = ShapMatrix(values, base, subj, names, fx, mode)
    tol = 1e-6 if mode == "exact" else 1e-3
    err = out.additivity_error() if n else 0.0
    if not err <= tol * max(1.0, float(np.max(np.abs(fx))) if n else 1.0):
        raise NumericalError(f"SHAP local accuracy violated (max error {err:.3g})")
    return out


def _coalition_values(f, x, bg, varying, Z, batch_rows):
    """Mean prediction over the background for each coalition in ``Z``."""
    B, p = bg.shape
    out = np.empty(Z.shape[0])
    per = max(1, batch_rows // B)
    for s in range(0, Z.shape[0], per):
        keep = np.zeros((min(per, Z.shape[0] - s), p), dtype=bool)
        keep[:, varying] = Z[s:s + per] > 0
        comp = np.where(keep[:, None, :], x[None, None, :], bg[None, :, :])
        pred = np.asarray(f(comp.reshape(-1, p)), dtype=np.float64)
        out[s:s + per] = pred.reshape(keep.shape[0], B).mean(axis=1)
    return out


def _resolve_set(predictive_set, names):
    idx = []
    for v in predictive_set:
        if isinstance(v, str):
            if v not in names:
                raise DataError(f"unknown covariate {v!r}")
            idx.append(names.index(v))
        else:
            idx.append(int(v))
    if not idx:
        raise DataError("predictive set must be nonempty")
    return tuple(sorted(set(idx)))


def attribution_score(shap, predictive_set):
    """Mean share of absolute SHAP mass on ``predictive_set``.

    Rows whose attributions are all zero carry no information and are
    excluded; their number is reported in ``n_excluded``.
    """
    idx = _resolve_set(predictive_set, list(shap.names))
    if max(idx) >= shap.values.shape[1] or min(idx) < 0:
        raise DataError("predictive set index out of range")
    a = np.abs(shap.values)
    total = a.sum(axis=1)
    ok = total > 0
    if not ok.any():
        raise DataError("every row has zero total attribution")
    share = a[ok][:, list(idx)].sum(axis=1) / total[ok]
    return AttributionScore(float(share.mean()), idx, int((~ok).sum()), share)


def vip_summary(shap, groups=None):
    """Covariates ranked by median absolute SHAP value.

    ``groups`` maps an original covariate name to its design-matrix columns
    (one-hot levels); grouped values are summed per row before taking
    absolute values.
    """
    V = np.asarray(shap.values)
    if V.size == 0:
        raise DataError("empty SHAP matrix")
    if groups is None:
        groups = {name: [j] for j, name in enumerate(shap.names)}
    rows = []
    for name, cols in groups.items():
        a = np.abs(V[:, list(cols)].sum(axis=1))
        rows.append({"name": name, "median_abs": float(np.median(a)),
                     "mean_abs": float(np.mean(a))})
    rows.sort(key=lambda r: (-r["median_abs"], -r["mean_abs"], r["name"]))
    for k, r in enumerate(rows, start=1):
        r["rank"] = k
    return rows


def schema_groups(schema):
    """Group mapping for :func:`vip_summary` from a covariate schema."""
    return {c.name: cols for c, cols in zip(schema.covariates, schema.groups())}


def write_shap_summary(shap, path, groups=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(shap.summary(groups), fh, indent=2, sort_keys=True)
        fh.write("\n")
