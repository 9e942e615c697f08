"""Decomposition optimizer: loss terms, lighting bootstrap, staged first-order
optimization with analytic gradients."""

from .embedding import QuotientChromaEmbedder, SelfQuotientEmbedder, identity_consistency_loss, self_quotient_embedding
from .lighting import estimate_lighting_ls
from .losses import parsimony_loss, reconstruction_loss, residual_l1, tv_loss
from .optimize import (
    DivergenceError,
    LossWeights,
    OptimizerConfig,
    build_problem,
    decompose,
    objective_with_gradients,
    render_with_gradients,
)

__all__ = [
    "tv_loss",
    "parsimony_loss",
    "residual_l1",
    "reconstruction_loss",
    "self_quotient_embedding",
    "SelfQuotientEmbedder",
    "QuotientChromaEmbedder",
    "identity_consistency_loss",
    "estimate_lighting_ls",
    "LossWeights",
    "OptimizerConfig",
    "DivergenceError",
    "decompose",
    "build_problem",
    "objective_with_gradients",
    "render_with_gradients",
]
