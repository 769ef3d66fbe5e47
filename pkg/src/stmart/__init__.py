"""Boosted regression trees with a CAR spatial smoother for spatio-temporal panels."""

from .backfit import BackfitConfig, BackfitResult, TwoStageRegressor, delta, two_stage_fit
from .interpret import importance, interaction_strength, partial_dependence, raw_importance
from .mart import BoostConfig, Ensemble, MARTRegressor, fit_mart, predict_mart, select_m
from .modelio import ModelFormatError, load_model, save_model
from .panel import Panel, PanelValidationError, RateTransform, build_response, validate_panel
from .spatial import (
    AdjacencyGraph,
    MoranResult,
    SpatialField,
    build_graph,
    car_smooth,
    grid_graph,
    morans_i,
    solve_phi,
)
from .synth import SynthSpec, generate
from .tree import RegressionTree, TreeModel, apply_tree, fit_tree, predict_tree

__version__ = "0.1.0"

__all__ = [
    "AdjacencyGraph", "BackfitConfig", "BackfitResult", "BoostConfig", "Ensemble", "MARTRegressor",
    "ModelFormatError", "MoranResult", "Panel", "PanelValidationError", "RateTransform", "RegressionTree",
    "SpatialField", "SynthSpec", "TreeModel", "TwoStageRegressor", "apply_tree", "build_graph",
    "build_response", "car_smooth", "delta", "fit_mart", "fit_tree", "generate", "grid_graph", "importance",
    "interaction_strength", "load_model", "morans_i", "partial_dependence", "predict_mart", "predict_tree",
    "raw_importance", "save_model", "select_m", "solve_phi", "two_stage_fit", "validate_panel",
]
