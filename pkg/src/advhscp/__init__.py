"""Hierarchical sparse factorization of connectivity matrices, with adversarial training."""

from .archive import ModelArchive, load_dataset, read_matrix, save_dataset, write_matrix
from .constraints import project_columns, project_component, project_l1_linf, project_loading, project_simplex
from .errors import *  # noqa: F401,F403
from .model import (
    AdversaryModel,
    CorrelationSet,
    FactorModel,
    HierarchySpec,
    PerturbationConfig,
    TimeSeriesPanel,
    pearson_correlation,
    reconstruct,
    reconstruction_loss,
)
from .objective import LossBreakdown, finite_difference_gradient
from .optimizer import OptimizerState, amsgrad_step
from .synthlab import (
    GroundTruth,
    MatchResult,
    accuracy_by_level,
    generate_ground_truth,
    grid_search_lambda,
    match_accuracy,
    split_sample_reproducibility,
    synthesize_panel,
)
from .trainer import FitConfig, FitReport, feasibility_violations, fit_adv_hscp, fit_hscp

__version__ = "0.1.0"
