"""Target models implementing the :class:`ModelSpec` contract."""

from .base import GaussianToy, ModelSpec, SelfTarget, StandardNormal, check_gradient, self_target
from .dove import DoveData, DoveHyper, DoveModel, Grid, build_spatial_basis, diffusion_operator, simulate_dove
from .lgssm import LGSSM, LGSSMTarget, kalman_filter, kalman_smoother
from .wishart import (
    WishartHyper,
    WishartModel,
    WishartTheta,
    ar1_prefilter,
    simulate_wishart,
    wishart_pack,
    wishart_unpack,
)

__all__ = [
    "DoveData",
    "DoveHyper",
    "DoveModel",
    "GaussianToy",
    "Grid",
    "LGSSM",
    "LGSSMTarget",
    "ModelSpec",
    "SelfTarget",
    "StandardNormal",
    "WishartHyper",
    "WishartModel",
    "WishartTheta",
    "ar1_prefilter",
    "build_spatial_basis",
    "check_gradient",
    "diffusion_operator",
    "kalman_filter",
    "kalman_smoother",
    "self_target",
    "simulate_dove",
    "simulate_wishart",
    "wishart_pack",
    "wishart_unpack",
]
