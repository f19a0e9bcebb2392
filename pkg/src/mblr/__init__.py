"""Multivariate Bayesian logistic regression for safety issues across many responses."""

from .dataset import (
    ColumnConfig,
    CovariateSpec,
    GroupedDataset,
    ParameterIndex,
    build_design,
    group_subjects,
    ingest_subjects,
    model_dimensions,
    read_grouped_csv,
    spec_from_table,
)
from .errors import (
    ConvergenceError,
    EstimabilityError,
    MBLRError,
    ParseError,
    SurfaceDegeneracyError,
)
from .grid import DiscretePosterior, build_discrete_posterior, lambda_to_phi, phi_to_lambda
from .model import RLR_PHI, CoefficientVector, ConditionalPosterior, PriorSdPoint, maximize
from .posterior import (
    MixturePosterior,
    bayes_factor_vs_rlr,
    estimate_table,
    fit_rlr,
    mix,
    odds_ratio_ci,
    prior_sd_summary,
    subgroup_effects,
)

__version__ = "0.1.0"
