"""Bayesian joint model of intensive longitudinal data and a binary outcome.

Each subject's series is a cubic B-spline mean plus AR(1) errors.  The
long-term variability (spread of the subject's spline coefficients) and the
short-term variability (AR(1) innovation variance) enter a probit model for
the outcome.  Estimation is by Metropolis-within-Gibbs sampling; a
two-stage plug-in estimator is provided for comparison.
"""

__version__ = "0.1.0"

from .basis import BasisSpec, InsufficientKnots, OutOfDomain, build_knots, design_matrix
from .data import Dataset, RegimeMap, SubjectSeries, load_long_csv, make_dataset, save_long_csv
from .diagnostics import PosteriorSummary, rhat, summarize
from .likelihood import OutcomeScaling, SubjectParams, log_joint
from .ppc import ppc_longitudinal, ppc_outcome
from .sampler import (Draws, FitResult, GibbsSampler, PriorConfig, SamplerConfig, SamplerError,
                      SubjectDraws, run_chains)
from .simulate import SimTruth, run_study, setting_truth, simulate_dataset, tsst_truth
from .twostage import SeparationError, stage1_fit, two_stage

__all__ = [
    "BasisSpec", "InsufficientKnots", "OutOfDomain", "build_knots", "design_matrix",
    "Dataset", "RegimeMap", "SubjectSeries", "load_long_csv", "make_dataset", "save_long_csv",
    "PosteriorSummary", "rhat", "summarize",
    "OutcomeScaling", "SubjectParams", "log_joint",
    "ppc_longitudinal", "ppc_outcome",
    "Draws", "FitResult", "GibbsSampler", "PriorConfig", "SamplerConfig", "SamplerError",
    "SubjectDraws", "run_chains",
    "SimTruth", "run_study", "setting_truth", "simulate_dataset", "tsst_truth",
    "SeparationError", "stage1_fit", "two_stage",
]
