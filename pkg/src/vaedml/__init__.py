"""Counterfactual-augmented double machine learning for firm-year panels."""

__version__ = "0.1.0"

from .baselines import binarize_treatment, ipw_ate, propensity_fit, psm_att
from .dml import (DmlConfig, DmlEstimate, estimate, mediation_regression,
                  robustness_grid, subgroup_estimates, temporal_effects)
from .indices import (entropy_topsis, greenwash_index, jf_coefficient,
                      performance_pressure, substantive_score, team_stability)
from .learners import LearnerSpec, fit, kfold_oof_predict, predict
from .panel import PanelTable, derive_treatment, expand_design, ingest_csv, winsorize
from .synth import DgpSpec, generate_mediated, generate_panel
from .vae import VaeConfig, VaeModel, elbo_loss, generate, merge, train, validate

__all__ = [
    "__version__",
    "binarize_treatment", "ipw_ate", "propensity_fit", "psm_att",
    "DmlConfig", "DmlEstimate", "estimate", "mediation_regression",
    "robustness_grid", "subgroup_estimates", "temporal_effects",
    "entropy_topsis", "greenwash_index", "jf_coefficient",
    "performance_pressure", "substantive_score", "team_stability",
    "LearnerSpec", "fit", "kfold_oof_predict", "predict",
    "PanelTable", "derive_treatment", "expand_design", "ingest_csv", "winsorize",
    "DgpSpec", "generate_mediated", "generate_panel",
    "VaeConfig", "VaeModel", "elbo_loss", "generate", "merge", "train", "validate",
]
