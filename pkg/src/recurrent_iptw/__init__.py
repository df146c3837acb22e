"""Recurrent inverse-probability-of-treatment weighting for longitudinal cohorts.

A small reverse-mode autodiff engine drives two LSTM models: a propensity
network whose outputs become stabilized weights, and a weighted outcome
network used for counterfactual prediction. Marginal structural models and a
bias-controlled simulator complete the pipeline.
"""

from .cohort import Cohort, PatientRecord, SchemaError, read_cohort, write_cohort
from .iptw import (StabilizedWeightSet, compute_stabilized_weights, emit_propensities, estimate_numerators,
                   phase1_weights, propensity_weight_report, train_phase1, truncate_weights,
                   weight_diagnostics)
from .metrics import auc_roc, nearest_rank_quantile, rmse, spearman_rho
from .msm import (build_ate_design, build_hte_design, conditional_or, ate_odds_ratios, empirical_ate, fit_hte,
                  fit_weighted_logistic)
from .outcome import InterventionQuery, TaskSpec, predict_potential_outcomes, train_end_to_end, train_phase2
from .simulator import SimConfig, apply_selection_bias, ground_truth_ate, simulate
from .training import TrainHyper

__version__ = "0.1.0"

__all__ = [
    "Cohort", "PatientRecord", "SchemaError", "read_cohort", "write_cohort",
    "StabilizedWeightSet", "compute_stabilized_weights", "emit_propensities", "estimate_numerators",
    "phase1_weights", "propensity_weight_report", "train_phase1", "truncate_weights", "weight_diagnostics",
    "auc_roc", "nearest_rank_quantile", "rmse", "spearman_rho",
    "build_ate_design", "build_hte_design", "conditional_or", "ate_odds_ratios", "empirical_ate", "fit_hte",
    "fit_weighted_logistic",
    "InterventionQuery", "TaskSpec", "predict_potential_outcomes", "train_end_to_end", "train_phase2",
    "SimConfig", "apply_selection_bias", "ground_truth_ate", "simulate", "TrainHyper",
]
