"""Efficient difference-in-differences and event-study estimation for short
panels with staggered treatment adoption."""

from .design import IfIndex, PtRegime, if_index
from .eif import eif_att, eif_es, eif_pi, generated_outcomes, omega_direct, omega_star, optimal_weights
from .errors import EdidError, EdidWarning, EstimationError, ValidationError
from .estimators import (CsModel, EfficientModel, Estimate, LattEstimate, estimate_att_efficient, estimate_cs,
                         estimate_es, estimate_es_avg, estimate_imputation, estimate_latt, estimate_twfe_dynamic,
                         estimate_twfe_static, write_weight_table)
from .inference import (BootstrapConfig, TestResult, are, cluster_bootstrap, hausman_test,
                        holm_incremental_selection, placebo_pretrends, simultaneous_bands)
from .nuisance import NuisanceConfig, fit_nuisance
from .panel import NEVER, CohortIndex, PanelDataset, cohort_index, load_long_csv, save_long_csv, validate

__version__ = "0.1.0"

__all__ = [
    "IfIndex", "PtRegime", "if_index", "eif_att", "eif_es", "eif_pi", "generated_outcomes", "omega_direct",
    "omega_star", "optimal_weights", "EdidError", "EdidWarning", "EstimationError", "ValidationError", "CsModel",
    "EfficientModel", "Estimate", "LattEstimate", "estimate_att_efficient", "estimate_cs", "estimate_es",
    "estimate_es_avg", "estimate_imputation", "estimate_latt", "estimate_twfe_dynamic", "estimate_twfe_static",
    "write_weight_table", "BootstrapConfig", "TestResult", "are", "cluster_bootstrap", "hausman_test",
    "holm_incremental_selection", "placebo_pretrends", "simultaneous_bands", "NuisanceConfig", "fit_nuisance",
    "NEVER", "CohortIndex", "PanelDataset", "cohort_index", "load_long_csv", "save_long_csv", "validate",
]
