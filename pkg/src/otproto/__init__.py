"""Local and global feature-grid prototypes learned with entropic optimal
transport, plus anomaly scoring, evaluation metrics, and binary formats."""

from .core import (
    AnomalyMap,
    CostConfig,
    FeatureGrid,
    PrototypeSet,
    TrainConfig,
    TransportPlan,
    init_prototypes,
    lattice_coords,
    make_feature_grid,
)
from .cost import CostMatrix, cost_matrix, fused_cost, struct_cost_table
from .detector import PrototypeAnomalyDetector
from .learn import TrainState, ema_update, train
from .metrics import DefectRegion, LabeledScores, auroc, masks_to_regions, spro_curve
from .score import (
    AssignmentMap,
    Provenance,
    aggregate,
    bilinear_upsample,
    reconstruct_prototypes,
    restore_image_patches,
    score_grid,
)
from .sinkhorn import SolverParams, marginal_residuals, solve, transport_cost

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap",
    "AssignmentMap",
    "CostConfig",
    "CostMatrix",
    "DefectRegion",
    "FeatureGrid",
    "LabeledScores",
    "PrototypeAnomalyDetector",
    "PrototypeSet",
    "Provenance",
    "SolverParams",
    "TrainConfig",
    "TrainState",
    "TransportPlan",
    "aggregate",
    "auroc",
    "bilinear_upsample",
    "cost_matrix",
    "ema_update",
    "fused_cost",
    "init_prototypes",
    "lattice_coords",
    "make_feature_grid",
    "marginal_residuals",
    "masks_to_regions",
    "reconstruct_prototypes",
    "restore_image_patches",
    "score_grid",
    "solve",
    "spro_curve",
    "struct_cost_table",
    "train",
    "transport_cost",
]
