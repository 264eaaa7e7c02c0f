"""The dynamic-factor Gaussian variational family."""

from .family import (
    ESTIMATORS,
    Workspace,
    elbo_estimate,
    elbo_samples,
    grad_roeder,
    grad_standard,
    log_q,
    lrsa_sample_and_grads,
    mean_gradient,
    sample_theta,
    sample_theta_batch,
    workspace,
)
from .layout import Chain, FactorLayout, ZetaBlock, ZetaGraph, build_C2_mask, count_params
from .params import BLOCKS, GradientSet, NoiseDraw, VariationalParams

__all__ = [
    "BLOCKS",
    "ESTIMATORS",
    "Chain",
    "FactorLayout",
    "GradientSet",
    "NoiseDraw",
    "VariationalParams",
    "Workspace",
    "ZetaBlock",
    "ZetaGraph",
    "build_C2_mask",
    "count_params",
    "elbo_estimate",
    "elbo_samples",
    "grad_roeder",
    "grad_standard",
    "log_q",
    "lrsa_sample_and_grads",
    "mean_gradient",
    "sample_theta",
    "sample_theta_batch",
    "workspace",
]
