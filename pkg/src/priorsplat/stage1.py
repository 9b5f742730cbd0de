"""Stage I: conservative reconstruction with instance-level residual screening.

Every view keeps the keep-mask from its latest screening round. A view is
re-screened when it is visited and its mask is at least ``k_screen``
iterations old. Screening averages the L1 residual over each instance
proposal and flags instances above an image-adaptive threshold that starts
high (mu + 2.5 sigma for lambda_local = 1.5) and tightens to mu + sigma.
Masks are recomputed from scratch each round; the union of all rounds is
tracked only for logging.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _loop
from .errors import ParameterError
from .losses import masked_loss
from .providers import Providers, resolve_providers
from .raster import InstanceSet, l1_residual, save_image_png, save_mask_png
from .scenegen import Dataset, ViewFrame
from .splat import GaussianScene, accumulate_grad_stats, adam_step, backward, render, save_checkpoint

log = logging.getLogger(__name__)

STATS_HEADER = ["iter", "view", "loss", "l1", "dssim", "gaussians", "screened",
                "mu", "sigma", "threshold", "flagged", "flagged_accum"]


def instance_residual(residual, instance) -> float:
    """Mean of the residual raster over the instance's pixels."""
    m = np.asarray(instance, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("instance is empty")
    return float(np.sum(np.asarray(residual, dtype=np.float64)[m]) / n)


def image_stats(residual) -> tuple[float, float]:
    """Population mean and standard deviation over all pixels."""
    r = np.asarray(residual, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty residual raster")
    if np.all(r == r.flat[0]):
        return float(r.flat[0]), 0.0  # exact, free of summation rounding
    mu = float(r.mean())
    return mu, float(np.sqrt(np.mean((r - mu) ** 2)))


def adaptive_threshold(mu: float, sigma: float, t: float, t_max: float,
                       lambda_local: float) -> float:
    """mu + (1 + lambda_local (t_max - t) / t_max) sigma."""
    if t_max <= 0:
        raise ParameterError("t_max must be > 0")
    if not 0 <= t <= t_max:
        raise ParameterError(f"t = {t} outside [0, {t_max}]")
    return mu + (1.0 + lambda_local * (t_max - t) / t_max) * sigma


@dataclass
class ScreenResult:
    flagged: list[int]
    keep: np.ndarray
    mu: float
    sigma: float
    threshold: float
    scores: dict[int, float]


@dataclass
class ScreeningState:
    t: int
    t_max: int
    lambda_local: float = 1.5
    flagged: dict[int, list[int]] = field(default_factory=dict)  # view id -> M_t ids
    keep: dict[int, np.ndarray] = field(default_factory=dict)
    accumulated: dict[int, set] = field(default_factory=dict)
    last_screen: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.lambda_local < 0:
            raise ParameterError("lambda_local must be >= 0")
        if not 0 <= self.t <= self.t_max:
            raise ParameterError(f"t = {self.t} outside [0, {self.t_max}]")

    def keep_mask(self, view: ViewFrame) -> np.ndarray:
        m = self.keep.get(view.view_id)
        return np.ones(view.shape) if m is None else m


def screen_instances(view: ViewFrame, instances: InstanceSet, residual,
                     state: ScreeningState) -> ScreenResult:
    """Flag instances whose mean residual exceeds the adaptive threshold."""
    mu, sigma = image_stats(residual)
    thr = adaptive_threshold(mu, sigma, state.t, state.t_max, state.lambda_local)
    scores = {}
    flagged = []
    for iid, m in instances:
        r = instance_residual(residual, m)
        scores[iid] = r
        if r > thr:
            flagged.append(iid)
    keep = 1.0 - instances.union(flagged).astype(np.float64)
    vid = view.view_id
    state.flagged[vid] = flagged
    state.keep[vid] = keep
    state.accumulated.setdefault(vid, set()).update(flagged)
    state.last_screen[vid] = state.t
    return ScreenResult(flagged, keep, mu, sigma, thr, scores)


@dataclass
class Stage1Result:
    scene: GaussianScene
    renders: dict[int, np.ndarray]  # 8-bit quantized, as written to disk
    keep_masks: dict[int, np.ndarray]
    state: ScreeningState
    stats: list[list]


def train_stage1(dataset: Dataset, config, providers: Providers | None = None,
                 scene: GaussianScene | None = None, force_keep: bool = False) -> Stage1Result:
    """Masked training with periodic screening; ``force_keep`` disables masking."""
    providers = providers or resolve_providers(config)
    t_max = int(config["stage1.iterations"])
    k_screen = int(config["stage1.k_screen"])
    lam = float(config["lambda_dssim"])
    start, end = config["stage1.densify_start"], config["stage1.densify_end"]
    scene = scene if scene is not None else _loop.initial_scene(dataset, config)
    lr = _loop.learning_rates(config)
    sampler = _loop.ViewSampler(len(dataset.views), config["seed"], 11)
    state = ScreeningState(0, t_max, float(config["stage1.lambda_local"]))
    stats = []

    for it in range(t_max):
        view = dataset.views[sampler.next()]
        r = render(scene, view.camera)
        row = [it, view.view_id]
        screen = None
        if not force_keep:
            last = state.last_screen.get(view.view_id)
            if last is None or it - last >= k_screen:
                state.t = it
                residual = l1_residual(view.gt_image, r.image)
                screen = screen_instances(view, providers.instances(view, residual), residual,
                                          state)
        keep = None if force_keep else state.keep_mask(view)
        loss = masked_loss(view.gt_image, r.image, keep, lam)
        _loop.check_finite(loss.total, it)
        grads = backward(r.cache, loss.grad)
        accumulate_grad_stats(scene, grads)
        adam_step(scene, grads.params, lr)
        _loop.maybe_densify(scene, config, it, start, end)
        row += [loss.total, loss.l1, loss.dssim, len(scene)]
        if screen is None:
            row += [0, None, None, None, None, None]
        else:
            acc = len(state.accumulated[view.view_id])
            row += [1, screen.mu, screen.sigma, screen.threshold, len(screen.flagged), acc]
        stats.append(row)
        if it % 250 == 0:
            log.info("stage1 it %d loss %.4f gaussians %d", it, loss.total, len(scene))

    # final round at t = T_max on the finished reconstruction
    state.t = t_max
    renders, masks = {}, {}
    for view in dataset.views:
        img = _loop.quantize(render(scene, view.camera).image)
        renders[view.view_id] = img
        if force_keep:
            masks[view.view_id] = np.ones(view.shape)
            continue
        residual = l1_residual(view.gt_image, img)
        res = screen_instances(view, providers.instances(view, residual), residual, state)
        masks[view.view_id] = res.keep
    return Stage1Result(scene, renders, masks, state, stats)


def save_stage1(result: Stage1Result, out_dir) -> list[Path]:
    """Write scene checkpoint, renders, keep masks and stats.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "scene.gs2d"]
    save_checkpoint(result.scene, written[0])
    for vid in sorted(result.renders):
        p = out / f"render_{vid:04d}.png"
        save_image_png(p, result.renders[vid])
        q = out / f"keepmask_{vid:04d}.png"
        save_mask_png(q, result.keep_masks[vid])
        written += [p, q]
    _loop.write_csv(out / "stats.csv", STATS_HEADER, result.stats)
    written.append(out / "stats.csv")
    return written
