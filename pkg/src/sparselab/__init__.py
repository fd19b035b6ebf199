"""Desk-scale sparse neural network training laboratory."""

from sparselab.autodiff import (
    Tensor,
    backward,
    finite_diff_grad,
    finite_diff_hessian,
    hvp_finite_diff,
)
from sparselab.datasets import Dataset, load_idx_images, make_synthetic
from sparselab.diagnostics import (
    ProbeConfig,
    activation_sparsity,
    avg_gradient_flow,
    eigvec_perturb_scan,
    landscape_slice,
    top_hessian_eigs,
)
from sparselab.ghost import GhostConfig, GhostState, alpha_at, beta_at, ghost_mode
from sparselab.layers import Model, build_model
from sparselab.masks import (
    Mask,
    apply_mask,
    grasp_mask,
    imp_lth,
    layer_collapse_check,
    magnitude_mask,
    random_mask,
    snip_mask,
    synflow_mask,
)
from sparselab.rescale import LRsIConfig, ScaleSet, apply_scales, first_step_loss, learn_scales
from sparselab.training import (
    RunRecord,
    TrainConfig,
    cross_entropy,
    lr_at,
    sgd_step,
    smooth_labels,
    train,
)

__all__ = [
    "Tensor", "backward", "finite_diff_grad", "finite_diff_hessian", "hvp_finite_diff",
    "Dataset", "make_synthetic", "load_idx_images",
    "ProbeConfig", "activation_sparsity", "avg_gradient_flow", "top_hessian_eigs",
    "eigvec_perturb_scan", "landscape_slice",
    "GhostConfig", "GhostState", "beta_at", "alpha_at", "ghost_mode",
    "Model", "build_model",
    "Mask", "random_mask", "magnitude_mask", "snip_mask", "grasp_mask", "synflow_mask",
    "imp_lth", "apply_mask", "layer_collapse_check",
    "LRsIConfig", "ScaleSet", "first_step_loss", "learn_scales", "apply_scales",
    "TrainConfig", "RunRecord", "train", "sgd_step", "lr_at", "smooth_labels",
    "cross_entropy",
]

__version__ = "0.1.0"
