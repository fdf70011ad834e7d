"""Data-adaptive subgroup discovery with the mean-treatment-difference curve.

For a grid of CATE percentiles ``q`` the subgroup ``{i : tau_i >= tau_q}`` is
formed, and its MTD is the Kaplan-Meier survival difference (treated minus
control) at ``t*``. All subjects enter the KM fits, censored ones included.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Cohort
from .exceptions import ConfigError, DataError
from .nuisance import KaplanMeier

DEFAULT_GRID = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)


def cate_percentile(tau_hat, q):
    """Lower (inverse-ECDF) ``q``-quantile of the predicted CATEs."""
    tau_hat = np.asarray(tau_hat, dtype=np.float64).ravel()
    if tau_hat.size == 0:
        raise DataError("no CATE predictions")
    if not 0 < q < 1:
        raise ConfigError(f"percentile must lie in (0, 1), got {q}")
    return float(np.quantile(tau_hat, q, method="inverted_cdf"))


@dataclass
class MtdPoint:
    q: float
    threshold: float
    n1: int
    n0: int
    mtd: float
    defined: bool = True
    reason: str = ""

    @property
    def one_minus_q(self):
        return round(1.0 - self.q, 12)


def _km_at(time, event, t_star):
    return float(KaplanMeier().fit(time, event).predict(t_star))


def _mtd_rows(cohort, rows, t_star):
    a = cohort.treatment[rows]
    n1 = int((a == 1).sum())
    n0 = int((a == 0).sum())
    if n1 == 0 or n0 == 0:
        arm = 1 if n1 == 0 else 0
        return n1, n0, math.nan, f"arm {arm} empty in subgroup"
    r1, r0 = rows[a == 1], rows[a == 0]
    s1 = _km_at(cohort.time[r1], cohort.event[r1], t_star)
    s0 = _km_at(cohort.time[r0], cohort.event[r0], t_star)
    return n1, n0, s1 - s0, ""


def _check(cohort, tau_hat, t_star):
    if not isinstance(cohort, Cohort):
        raise DataError("expected a Cohort")
    tau_hat = np.asarray(tau_hat, dtype=np.float64).ravel()
    if tau_hat.shape[0] != cohort.n:
        raise DataError("tau_hat length does not match the cohort")
    if not np.all(np.isfinite(tau_hat)):
        raise DataError("tau_hat must be finite")
    if not t_star > 0:
        raise DataError("t* must be positive")
    return tau_hat


def mtd_at(cohort, tau_hat, q, t_star):
    """MTD for the subgroup with predicted CATE at or above the ``q``-percentile."""
    tau_hat = _check(cohort, tau_hat, t_star)
    thr = cate_percentile(tau_hat, q)
    rows = np.flatnonzero(tau_hat >= thr)
    n1, n0, mtd, reason = _mtd_rows(cohort, rows, float(t_star))
    return MtdPoint(float(q), thr, n1, n0, mtd, not reason, reason)


def overall_mtd(cohort, t_star):
    """KM difference at ``t*`` over the whole cohort."""
    n1, n0, mtd, reason = _mtd_rows(cohort, np.arange(cohort.n), float(t_star))
    if reason:
        raise DataError(f"overall MTD undefined: {reason}")
    return mtd


@dataclass
class MtdCurve:
    """MTD points ordered by growing subgroup share ``1 - q``.

    The final point is the full cohort (threshold ``min(tau_hat)``); it
    equals ``overall_mtd`` by construction.
    """

    t_star: float
    points: list
    overall_mtd: float
    margin: float = 0.05
    extras: dict = field(default_factory=dict)

    def beneficial(self):
        return [p.defined and p.mtd - self.overall_mtd >= self.margin for p in self.points]

    def to_rows(self):
        return [{"one_minus_q": p.one_minus_q, "threshold": p.threshold, "n1": p.n1,
                 "n0": p.n0, "mtd": p.mtd} for p in self.points]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["one_minus_q", "threshold", "n1", "n0", "mtd"])
            for p in self.points:
                w.writerow([_fmt(p.one_minus_q), _fmt(p.threshold), p.n1, p.n0,
                            _fmt(p.mtd) if p.defined else "NA"])

    def to_dict(self):
        return {
            "t_star": self.t_star,
            "overall_mtd": self.overall_mtd,
            "margin": self.margin,
            "points": [
                {"one_minus_q": p.one_minus_q, "q": p.q, "threshold": p.threshold,
                 "n1": p.n1, "n0": p.n0, "mtd": p.mtd if p.defined else None,
                 "defined": p.defined, "reason": p.reason or None, "beneficial": b}
                for p, b in zip(self.points, self.beneficial())
            ],
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(v):
    return repr(float(v)) if math.isfinite(v) else "NA"


def mtd_curve(cohort, tau_hat, t_star, grid=DEFAULT_GRID, margin=0.05):
    """MTD curve over ``grid`` plus the full-cohort point.

    Undefined points (an arm missing from the subgroup) stay in the curve
    with ``defined=False`` and a reason.
    """
    tau_hat = _check(cohort, tau_hat, t_star)
    grid = sorted((float(q) for q in grid), reverse=True)
    if any(not 0 < q < 1 for q in grid):
        raise ConfigError("grid values must lie in (0, 1)")
    points = [mtd_at(cohort, tau_hat, q, t_star) for q in grid]
    n1, n0, full, reason = _mtd_rows(cohort, np.arange(cohort.n), float(t_star))
    if reason:
        raise DataError(f"overall MTD undefined: {reason}")
    points.append(MtdPoint(0.0, float(tau_hat.min()), n1, n0, full))
    return MtdCurve(float(t_star), points, full, float(margin))
