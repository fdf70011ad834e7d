"""Random forests built on the compiled kernels.

Three estimators share one ensemble layout:

* :class:`RandomSurvivalForest` -- log-rank splits, Nelson-Aalen leaves,
  survival predicted as ``exp(-mean CHF)``.
* :class:`PropensityForest` -- classification forest for ``P(A=1 | X)``;
  leaf frequencies averaged across trees and clipped away from 0 and 1.
* :class:`WeightedRegressionForest` -- weighted variance-reduction splits and
  weighted leaf means, used for the pseudo-outcome regression.

Randomness is derived from ``(random_state, tree_index)`` and, for feature
sampling, the covariate *name*, so serial and threaded fits are bit-identical
and fits do not depend on row or column order.
"""

import math
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import _kernels
from .exceptions import ConfigError, DataError
from .validation import check_covariates, check_survival, check_weights


def _resolve_mtry(mtry, p, default):
    if mtry is None:
        mtry = default
    if isinstance(mtry, str):
        if mtry == "sqrt":
            mtry = math.ceil(math.sqrt(p))
        elif mtry == "third":
            mtry = math.ceil(p / 3)
        elif mtry == "all":
            mtry = p
        else:
            raise ConfigError(f"unknown mtry rule {mtry!r}")
    mtry = int(mtry)
    if mtry < 1:
        raise ConfigError("mtry must be >= 1")
    return max(1, min(mtry, p))


def _name_hash(name):
    return zlib.crc32(str(name).encode("utf-8"))


def _canonical_order(X, names, *cols):
    """Row permutation that sorts by (cols..., X columns in name order)."""
    keys = [X[:, j] for j in sorted(range(X.shape[1]), key=lambda j: names[j])][::-1]
    keys += [np.asarray(c, dtype=np.float64) for c in cols[::-1]]
    return np.lexsort(keys)


class _ForestBase(BaseEstimator):
    """Bootstrap, feature-key and threading plumbing shared by the forests."""

    _default_mtry = "sqrt"

    def _prepare(self, X, feature_names):
        n, p = X.shape
        if feature_names is None:
            feature_names = [f"x{j}" for j in range(p)]
        feature_names = [str(f) for f in feature_names]
        if len(feature_names) != p or len(set(feature_names)) != p:
            raise DataError("feature_names must be unique and match the column count")
        eligible = np.array([np.ptp(X[:, j]) > 0 for j in range(p)]) if n else np.zeros(p, bool)
        self.n_features_in_ = p
        self.feature_names_in_ = np.array(feature_names, dtype=object)
        self.eligible_features_ = eligible
        n_elig = int(eligible.sum())
        self.mtry_ = _resolve_mtry(self.mtry, max(n_elig, 1), self._default_mtry)
        if self.n_estimators < 1:
            raise ConfigError("n_estimators must be >= 1")
        return feature_names

    def _tree_streams(self, t, n_rows, n_nodes):
        seed = 0 if self.random_state is None else int(self.random_state)
        boot_rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
        if self.bootstrap:
            counts = np.bincount(boot_rng.integers(0, n_rows, n_rows), minlength=n_rows)
        else:
            counts = np.ones(n_rows, dtype=np.int64)
        keys = np.full((n_nodes, self.n_features_in_), np.inf)
        for j, name in enumerate(self.feature_names_in_):
            if self.eligible_features_[j]:
                rng = np.random.default_rng(np.random.SeedSequence([seed, t, _name_hash(name)]))
                keys[:, j] = rng.random(n_nodes)
        return counts, keys

    def _fit_trees(self, build_one):
        threads = getattr(self, "n_jobs", None) or 1
        if threads == 1:
            trees = [build_one(t) for t in range(self.n_estimators)]
        else:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                trees = list(ex.map(build_one, range(self.n_estimators)))
        return trees

    def _flatten(self, trees, fields):
        """Concatenate per-tree node arrays, shifting child and leaf offsets."""
        roots, parts = [], {f: [] for f in fields}
        node_off = 0
        leaf_off = 0
        for tree in trees:
            roots.append(node_off)
            for f in fields:
                a = tree[f]
                if f in ("left", "right"):
                    a = np.where(a >= 0, a + node_off, -1)
                elif f in ("leaf_start", "leaf_end"):
                    a = a + leaf_off
                parts[f].append(a)
            node_off += tree["feature"].shape[0]
            if "chf_t" in tree:
                leaf_off += tree["chf_t"].shape[0]
        self.roots_ = np.array(roots, dtype=np.int64)
        for f in fields:
            setattr(self, f + "_", np.concatenate(parts[f]))

    def _oob_mask(self, n_rows):
        """(n, n_trees) boolean mask of trees for which each row was out of bag."""
        return self.inbag_counts_.T == 0

    def _x(self, X):
        check_is_fitted(self, "roots_")
        return check_covariates(X, self.n_features_in_)

    @property
    def n_nodes_(self):
        return self.feature_.shape[0]

    def _state_arrays(self):
        return {f: getattr(self, f + "_") for f in ("roots", *self._fields)}


class RandomSurvivalForest(_ForestBase):
    """Random survival forest with log-rank splitting.

    Parameters
    ----------
    n_estimators : int, default=500
    mtry : int or {"sqrt", "third", "all"}, default="sqrt"
        Candidate columns per node; ``"sqrt"`` is ``ceil(sqrt(p))``.
    min_leaf_events : int, default=5
        Each child of a split must contain at least this many events.
    max_depth : int or None, default=None
        ``0`` yields a single-leaf (marginal Nelson-Aalen) tree.
    bootstrap : bool, default=True
    random_state : int, default=0
    n_jobs : int, default=1
        Threads used to grow trees; results do not depend on it.
    """

    _fields = ("feature", "threshold", "left", "right", "leaf_start", "leaf_end",
               "chf_t", "chf_h")

    def __init__(self, n_estimators=500, mtry="sqrt", min_leaf_events=5, max_depth=None,
                 bootstrap=True, random_state=0, n_jobs=1):
        self.n_estimators = n_estimators
        self.mtry = mtry
        self.min_leaf_events = min_leaf_events
        self.max_depth = max_depth
        self.bootstrap = bootstrap
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, time, event, feature_names=None):
        X = check_covariates(X)
        time, event = check_survival(time, event)
        if X.shape[0] != time.shape[0]:
            raise DataError("X and time lengths differ")
        if not event.any():
            raise DataError("survival forest needs at least one event")
        names = self._prepare(X, feature_names)
        order = _canonical_order(X, names, time, event)
        Xs, ts, es = X[order], time[order], event[order].astype(np.int64)
        n = Xs.shape[0]
        max_depth = -1 if self.max_depth is None else int(self.max_depth)

        def build_one(t):
            counts, keys = self._tree_streams(t, n, 2 * n + 1)
            rows = np.repeat(np.arange(n), counts)
            out = _kernels.build_survival_tree(
                Xs, ts, es, rows, keys, self.mtry_, int(self.min_leaf_events), max_depth)
            tree = dict(zip(self._fields, out))
            tree["counts"] = counts
            return tree

        trees = self._fit_trees(build_one)
        self._flatten(trees, self._fields)
        inbag = np.empty((len(trees), n), dtype=np.int64)
        for t, tree in enumerate(trees):
            inbag[t, order] = tree["counts"]
        self.inbag_counts_ = inbag
        self.event_times_ = np.unique(time[event])
        self.max_time_ = float(time.max())
        return self

    def _chf(self, X, times, mask):
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        if np.any(times < 0):
            raise DataError("prediction times must be nonnegative")
        return _kernels.predict_chf(
            X, times, self.roots_, self.feature_, self.threshold_, self.left_, self.right_,
            self.leaf_start_, self.leaf_end_, self.chf_t_, self.chf_h_, mask)

    def predict_cumulative_hazard(self, X, times):
        X = self._x(X)
        return self._chf(X, times, np.zeros((0, 0), dtype=np.bool_))

    def predict_survival(self, X, times):
        """``S(t | x)`` as an ``(n, len(times))`` array (1-d when ``times`` is scalar)."""
        scalar = np.ndim(times) == 0
        S = np.exp(-self.predict_cumulative_hazard(X, times))
        return S[:, 0] if scalar else S

    def predict_survival_oob(self, X, times):
        """Out-of-bag ``S(t | x)`` for the training rows (in training order)."""
        X = self._x(X)
        if not hasattr(self, "inbag_counts_") or X.shape[0] != self.inbag_counts_.shape[1]:
            raise DataError("OOB prediction needs the training covariates")
        scalar = np.ndim(times) == 0
        mask = self._oob_mask(X.shape[0])
        H = self._chf(X, times, mask)
        missing = np.isnan(H[:, 0])
        if missing.any():
            H[missing] = self._chf(X[missing], times, np.zeros((0, 0), dtype=np.bool_))
        S = np.exp(-H)
        return S[:, 0] if scalar else S


class WeightedRegressionForest(_ForestBase, RegressorMixin):
    """Bootstrap forest of weighted least-squares regression trees.

    Parameters
    ----------
    n_estimators : int, default=500
    mtry : int or {"sqrt", "third", "all"}, default="third"
    min_leaf_weight : float or None
        Minimum total sample weight in each child. ``None`` uses
        ``min_leaf_weight_factor * median(sample_weight)``.
    min_leaf_weight_factor : float, default=10.0
    min_samples_leaf : int, default=1
    max_depth : int or None
    bootstrap : bool, default=True
    random_state : int, default=0
    n_jobs : int, default=1
    """

    _default_mtry = "third"
    _fields = ("feature", "threshold", "left", "right", "value")

    def __init__(self, n_estimators=500, mtry="third", min_leaf_weight=None,
                 min_leaf_weight_factor=10.0, min_samples_leaf=1, max_depth=None,
                 bootstrap=True, random_state=0, n_jobs=1):
        self.n_estimators = n_estimators
        self.mtry = mtry
        self.min_leaf_weight = min_leaf_weight
        self.min_leaf_weight_factor = min_leaf_weight_factor
        self.min_samples_leaf = min_samples_leaf
        self.max_depth = max_depth
        self.bootstrap = bootstrap
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y, sample_weight=None, feature_names=None):
        X = check_covariates(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape[0] != X.shape[0]:
            raise DataError("X and y lengths differ")
        if not np.all(np.isfinite(y)):
            raise DataError("regression targets must be finite")
        w = check_weights(sample_weight, X.shape[0])
        keep = w > 0
        if not keep.any():
            raise DataError("all sample weights are zero")
        X, y, w = X[keep], y[keep], w[keep]
        names = self._prepare(X, feature_names)
        order = _canonical_order(X, names, y, w)
        Xs, ys, ws = X[order], y[order], w[order]
        n = Xs.shape[0]
        mlw = self.min_leaf_weight
        if mlw is None:
            mlw = float(self.min_leaf_weight_factor) * float(np.median(ws))
        self.min_leaf_weight_ = float(mlw)
        max_depth = -1 if self.max_depth is None else int(self.max_depth)

        def build_one(t):
            counts, keys = self._tree_streams(t, n, 2 * n + 1)
            rows = np.repeat(np.arange(n), counts)
            out = _kernels.build_regression_tree(
                Xs, ys, ws, rows, keys, self.mtry_, self.min_leaf_weight_,
                int(self.min_samples_leaf), max_depth)
            tree = dict(zip(self._fields, out))
            tree["counts"] = counts
            return tree

        trees = self._fit_trees(build_one)
        self._flatten(trees, self._fields)
        inbag = np.zeros((len(trees), keep.shape[0]), dtype=np.int64)
        kept = np.flatnonzero(keep)
        for t, tree in enumerate(trees):
            inbag[t, kept[order]] = tree["counts"]
        self.inbag_counts_ = inbag
        return self

    def _predict(self, X, mask):
        return _kernels.predict_regression(
            X, self.roots_, self.feature_, self.threshold_, self.left_, self.right_,
            self.value_, mask)

    def predict(self, X):
        return self._predict(self._x(X), np.zeros((0, 0), dtype=np.bool_))

    def predict_oob(self, X):
        X = self._x(X)
        if X.shape[0] != self.inbag_counts_.shape[1]:
            raise DataError("OOB prediction needs the training covariates")
        pred = self._predict(X, self._oob_mask(X.shape[0]))
        missing = np.isnan(pred)
        if missing.any():
            pred[missing] = self._predict(X[missing], np.zeros((0, 0), dtype=np.bool_))
        return pred


class PropensityForest(_ForestBase, ClassifierMixin):
    """Classification forest for the propensity score ``P(A=1 | X)``.

    Predicted probabilities average leaf treated-fractions across trees and
    are clipped to ``[clip, 1 - clip]``.
    """

    _fields = ("feature", "threshold", "left", "right", "value")

    def __init__(self, n_estimators=500, mtry="sqrt", min_samples_leaf=1, max_depth=None,
                 clip=0.01, bootstrap=True, random_state=0, n_jobs=1):
        self.n_estimators = n_estimators
        self.mtry = mtry
        self.min_samples_leaf = min_samples_leaf
        self.max_depth = max_depth
        self.clip = clip
        self.bootstrap = bootstrap
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, treatment, feature_names=None):
        X = check_covariates(X)
        a = np.asarray(treatment).ravel()
        if a.shape[0] != X.shape[0]:
            raise DataError("X and treatment lengths differ")
        if not np.all(np.isin(a, (0, 1))):
            raise DataError("treatment must be coded 0/1")
        if np.unique(a).shape[0] < 2:
            raise DataError("propensity model needs both treatment arms")
        if not 0 < self.clip < 0.5:
            raise ConfigError("clip must lie in (0, 0.5)")
        self.classes_ = np.array([0, 1])
        reg = WeightedRegressionForest(
            n_estimators=self.n_estimators,
            mtry="sqrt" if self.mtry is None else self.mtry, min_leaf_weight=0.0,
            min_samples_leaf=self.min_samples_leaf, max_depth=self.max_depth,
            bootstrap=self.bootstrap, random_state=self.random_state, n_jobs=self.n_jobs)
        reg.fit(X, a.astype(np.float64), feature_names=feature_names)
        self.forest_ = reg
        self.roots_ = reg.roots_
        self.n_features_in_ = reg.n_features_in_
        self.feature_names_in_ = reg.feature_names_in_
        return self

    def _clip(self, p):
        self.n_clipped_ = int(np.sum((p < self.clip) | (p > 1 - self.clip)))
        return np.clip(p, self.clip, 1.0 - self.clip)

    def predict_proba(self, X):
        p = self._clip(self.forest_.predict(X))
        return np.column_stack([1.0 - p, p])

    def predict_propensity(self, X):
        return self._clip(self.forest_.predict(X))

    def predict_propensity_oob(self, X):
        return self._clip(self.forest_.predict_oob(X))

    def predict(self, X):
        return (self.predict_propensity(X) > 0.5).astype(np.int64)
