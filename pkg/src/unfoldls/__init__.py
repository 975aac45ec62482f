"""Low-rank plus sparse dynamic MRI reconstruction, classical and deep-unfolded."""

from .data import (CoilSensitivities, ImageSequence, KSpaceDataset, NumericalError,
                   casorati_matrix, casorati_unfold)
from .metrics import mae, mae_loss
from .operators import EncodingOperator, TemporalDiff, op_norm
from .prox import ActivationParams, apply_activation, garrote, soft, svt
from .solver import Problem, SolveConfig, cpa_solve, grid_search, objective
from .unfolded import TrainConfig, UnfoldedModel, train

__all__ = [
    "ActivationParams", "CoilSensitivities", "EncodingOperator", "ImageSequence",
    "KSpaceDataset", "NumericalError", "Problem", "SolveConfig", "TemporalDiff", "TrainConfig",
    "UnfoldedModel", "apply_activation", "casorati_matrix", "casorati_unfold", "cpa_solve",
    "garrote", "grid_search", "mae", "mae_loss", "objective", "op_norm", "soft", "svt", "train",
]
