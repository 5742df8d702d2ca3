"""Pairwise last-observation-time (PLOT) treatment effects for trials with intercurrent events."""

__version__ = "0.1.0"

from .data import (CounterfactualPanel, DataFormatError, TrialDataset, load_csv,  # noqa: E402
                   save_csv, validate)
from .dgp import DgpConfig, Setting, generate, t_distribution_table, true_estimand  # noqa: E402
from .estimators import (EstimateResult, EstimationError, cplot, plot_adjusted,  # noqa: E402
                         plot_unadj_fast, plot_unadj_pairwise, ratio_estimand, wald_test)
from .comparators import ipcw, locf, sace, survivors_only  # noqa: E402
from .learners import LearnerSpec  # noqa: E402
from .nuisance import NuisanceFit, corrupt, fit_nuisance  # noqa: E402

__all__ = [
    "CounterfactualPanel", "DataFormatError", "TrialDataset", "load_csv", "save_csv", "validate",
    "DgpConfig", "Setting", "generate", "t_distribution_table", "true_estimand",
    "EstimateResult", "EstimationError", "cplot", "plot_adjusted", "plot_unadj_fast",
    "plot_unadj_pairwise", "ratio_estimand", "wald_test", "ipcw", "locf", "sace",
    "survivors_only", "LearnerSpec", "NuisanceFit", "corrupt", "fit_nuisance",
]
