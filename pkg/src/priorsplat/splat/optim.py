"""Adam updates and adaptive density control for a GaussianScene."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .render import BackwardResult
from .scene import GROUP_NAMES, MIN_DEPTH, GaussianScene

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
SPLIT_SCALE_DIVISOR = 1.6


def adam_step(scene: GaussianScene, grads: dict[str, np.ndarray], lr: dict[str, float],
              max_log_scale: float | None = None) -> GaussianScene:
    """One bias-corrected Adam step on every group listed in ``lr``."""
    for name in lr:
        if name not in GROUP_NAMES:
            raise KeyError(f"unknown parameter group {name!r}")
        if grads[name].shape != scene.params[name].shape:
            raise ShapeError(
                f"gradient for {name} has shape {grads[name].shape}, "
                f"parameters have {scene.params[name].shape}"
            )
    scene.step += 1
    t = scene.step
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name, rate in lr.items():
        g = grads[name]
        m = scene.exp_avg[name]
        v = scene.exp_avg_sq[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if rate == 0.0:
            continue
        scene.params[name] -= rate * (m / bc1) / (np.sqrt(v / bc2) + EPS)
    np.maximum(scene.params["depth"], MIN_DEPTH, out=scene.params["depth"])
    if max_log_scale is not None:
        np.minimum(scene.params["log_scales"], max_log_scale, out=scene.params["log_scales"])
    scene.touch()
    return scene


def accumulate_grad_stats(scene: GaussianScene, result: BackwardResult) -> None:
    """Add this view's screen-space mean-gradient norm for visible Gaussians."""
    vis = result.visible
    norms = np.sqrt(np.sum(result.screen_means**2, axis=1))
    scene.grad_accum[vis] += norms[vis]
    scene.grad_count[vis] += 1


def densify_and_prune(scene: GaussianScene, grad_threshold: float, size_threshold: float,
                      opacity_floor: float, max_count: int | None = None) -> dict[str, int]:
    """Clone small and split large high-gradient Gaussians, then prune faint ones.

    Split children get scales divided by 1.6 and sit at +-0.5 sigma along the
    parent's major axis. Accumulated statistics are reset afterwards.
    """
    n = len(scene)
    stats = {"cloned": 0, "split": 0, "pruned": 0}
    if n:
        count = np.maximum(scene.grad_count, 1)
        avg = np.where(scene.grad_count > 0, scene.grad_accum / count, 0.0)
        high = avg >= grad_threshold
        high &= scene.grad_count > 0
        cand = np.flatnonzero(high)
        if max_count is not None:
            budget = max(0, max_count - n)
            if cand.size > budget:
                # highest average gradient first, index as tie-break
                rank = np.lexsort((cand, -avg[cand]))
                cand = np.sort(cand[rank[:budget]])
        major = scene.scales.max(axis=1)
        is_clone = np.zeros(n, dtype=bool)
        is_split = np.zeros(n, dtype=bool)
        is_clone[cand] = major[cand] <= size_threshold
        is_split[cand] = major[cand] > size_threshold

        new_parts = []
        if is_clone.any():
            new_parts.append({k: scene.params[k][is_clone].copy() for k in GROUP_NAMES})
        if is_split.any():
            new_parts.append(_split_children(scene, np.flatnonzero(is_split)))
        stats["cloned"] = int(is_clone.sum())
        stats["split"] = int(is_split.sum())
        if is_split.any():
            scene.select(~is_split)
        for part in new_parts:
            scene.append(part)

        faint = scene.opacity < opacity_floor
        stats["pruned"] = int(faint.sum())
        if faint.any():
            scene.select(~faint)
    scene.reset_stats()
    scene.touch()
    return stats


def _split_children(scene: GaussianScene, rows: np.ndarray) -> dict[str, np.ndarray]:
    p = {k: scene.params[k][rows] for k in GROUP_NAMES}
    sx = np.exp(p["log_scales"][:, 0])
    sy = np.exp(p["log_scales"][:, 1])
    th = p["theta"]
    use_x = sx >= sy
    axis = np.where(
        use_x[:, None],
        np.stack([np.cos(th), np.sin(th)], axis=1),
        np.stack([-np.sin(th), np.cos(th)], axis=1),
    )
    sigma = np.where(use_x, sx, sy)
    offset = 0.5 * sigma[:, None] * axis
    children = {}
    for k in GROUP_NAMES:
        children[k] = np.concatenate([p[k], p[k]], axis=0)
    m = rows.size
    children["means"][:m] += offset
    children["means"][m:] -= offset
    children["log_scales"] = children["log_scales"] - np.log(SPLIT_SCALE_DIVISOR)
    return children
