"""Differentiable 2.5D Gaussian splatting: scene, renderer, optimizer."""

from .optim import accumulate_grad_stats, adam_step, densify_and_prune
from .render import (
    BACKGROUND,
    BackwardResult,
    RenderCache,
    RenderResult,
    backward,
    contributions,
    render,
)
from .scene import (
    GROUP_NAMES,
    Gaussian2D,
    GaussianScene,
    ViewCamera,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "BACKGROUND",
    "BackwardResult",
    "GROUP_NAMES",
    "Gaussian2D",
    "GaussianScene",
    "RenderCache",
    "RenderResult",
    "ViewCamera",
    "accumulate_grad_stats",
    "adam_step",
    "backward",
    "contributions",
    "densify_and_prune",
    "load_checkpoint",
    "render",
    "save_checkpoint",
]
