"""Input validation helpers used by every estimator's ``fit``/``predict``."""

import numpy as np
from sklearn.utils import check_array, check_consistent_length

from .exceptions import DataError


def check_covariates(X, n_features=None):
    try:
        X = check_array(X, dtype=np.float64, ensure_all_finite=True, order="C")
    except ValueError as exc:
        raise DataError(f"invalid covariate matrix: {exc}") from exc
    if n_features is not None and X.shape[1] != n_features:
        raise DataError(
            f"covariate matrix has {X.shape[1]} columns, model expects {n_features}"
        )
    return X


def check_survival(time, event):
    time = np.asarray(time, dtype=np.float64).ravel()
    event = np.asarray(event).ravel()
    check_consistent_length(time, event)
    if time.size == 0:
        raise DataError("empty survival data")
    if not np.all(np.isfinite(time)):
        raise DataError("observed times must be finite")
    if np.any(time < 0):
        raise DataError("observed times must be nonnegative")
    if not np.all(np.isin(event, (0, 1, True, False))):
        raise DataError("event indicator must be 0/1")
    return time, event.astype(bool)


def check_treatment(treatment):
    a = np.asarray(treatment).ravel()
    if not np.all(np.isin(a, (0, 1))):
        raise DataError("treatment must be coded 0/1")
    return a.astype(np.int8)


def check_survival_data(X, time, event, treatment=None):
    """Validate a full (X, U, delta[, A]) training tuple."""
    X = check_covariates(X)
    time, event = check_survival(time, event)
    check_consistent_length(X, time)
    if treatment is None:
        return X, time, event
    treatment = check_treatment(treatment)
    check_consistent_length(X, treatment)
    return X, time, event, treatment


def check_weights(sample_weight, n):
    if sample_weight is None:
        return np.ones(n)
    w = np.asarray(sample_weight, dtype=np.float64).ravel()
    if w.shape[0] != n:
        raise DataError(f"sample_weight has length {w.shape[0]}, expected {n}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DataError("sample weights must be finite and nonnegative")
    return w
