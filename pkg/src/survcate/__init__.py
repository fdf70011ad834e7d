"""Pseudo-outcome meta-learners for heterogeneous treatment effects on survival.

The conditional average treatment effect is the difference in survival
probabilities ``tau(x; t*) = S1(t* | x) - S0(t* | x)``.
"""

__version__ = "0.1.0"

from .data import (CompleteCaseView, Cohort, Covariate, CovariateSchema, SurvivalRecord,
                   TargetTime, complete_case_view, ingest_cohort, read_cohort_csv,
                   write_cohort_csv)
from .exceptions import ConfigError, ConvergenceError, DataError, NumericalError, SurvCateError
from .forest import PropensityForest, RandomSurvivalForest, WeightedRegressionForest
from .interpret import (AttributionScore, ShapConfig, ShapMatrix, attribution_score,
                        kernel_shap, vip_summary)
from .metalearners import (CateConfig, CateModel, LearnerKind, PseudoOutcomeSet,
                           SurvivalMetaLearner, build_pseudo_outcomes, cross_fit_cate,
                           fit_cate, predict_cate)
from .nuisance import (CensoringModel, KaplanMeier, NuisanceBundle, NuisanceConfig,
                       WeibullAFT, build_nuisance_bundle)
from .persist import load_model, save_model
from .subgroup import MtdCurve, cate_percentile, mtd_at, mtd_curve, overall_mtd

__all__ = [
    "AttributionScore", "CateConfig", "CateModel", "CensoringModel", "Cohort",
    "CompleteCaseView", "ConfigError", "ConvergenceError", "Covariate", "CovariateSchema",
    "DataError", "KaplanMeier", "LearnerKind", "MtdCurve", "NuisanceBundle",
    "NuisanceConfig", "NumericalError", "PropensityForest", "PseudoOutcomeSet",
    "RandomSurvivalForest", "ShapConfig", "ShapMatrix", "SurvCateError",
    "SurvivalMetaLearner", "SurvivalRecord", "TargetTime", "WeibullAFT",
    "WeightedRegressionForest", "attribution_score", "build_nuisance_bundle",
    "build_pseudo_outcomes", "cate_percentile", "complete_case_view", "cross_fit_cate",
    "fit_cate", "ingest_cohort", "kernel_shap", "load_model", "mtd_at", "mtd_curve",
    "overall_mtd", "predict_cate", "read_cohort_csv", "save_model", "vip_summary",
    "write_cohort_csv",
]
