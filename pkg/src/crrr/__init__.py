"""Conditional rank-rank regression with monotone transformation-model ranks."""

from .data import CONTINUOUS, Dataset, OutcomeKind, ordinal
from .engine import (CrossFit, FitConfig, FoldPlan, RankSet, crossfit_ranks, estimates,
                     marginal_ranks, omega_rank, rho_corr, rho_cov, rho_ols, rrr_slope,
                     spearman_rescale)
from .numeric import RngStream

__version__ = "0.1.0"

__all__ = [
    "CONTINUOUS", "CrossFit", "Dataset", "FitConfig", "FoldPlan", "OutcomeKind", "RankSet",
    "RngStream", "crossfit_ranks", "estimates", "marginal_ranks", "omega_rank", "ordinal",
    "rho_corr", "rho_cov", "rho_ols", "rrr_slope", "spearman_rescale",
]
