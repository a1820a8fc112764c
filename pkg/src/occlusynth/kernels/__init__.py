"""Numerical building blocks of the completion network."""

from .folding import FoldingConfig, FoldingParams, FoldLayer, folding_densify, folding_weight_grads
from .gradcheck import KERNELS, grad_check, rel_error
from .grid import (RES, gridding, gridding_grad, gridding_reverse, gridding_reverse_cells,
                   gridding_reverse_grad, gridding_weights, vertex_coords)
from .sampling import N_COARSE, cubic_feature_sampling, cubic_feature_sampling_grad, sample_coarse
from .sgc import SgcParams, sgc_forward

__all__ = [
    "FoldingConfig", "FoldingParams", "FoldLayer", "folding_densify", "folding_weight_grads",
    "KERNELS", "grad_check", "rel_error",
    "RES", "gridding", "gridding_grad", "gridding_reverse", "gridding_reverse_cells",
    "gridding_reverse_grad", "gridding_weights", "vertex_coords",
    "N_COARSE", "cubic_feature_sampling", "cubic_feature_sampling_grad", "sample_coarse",
    "SgcParams", "sgc_forward",
]
