"""Pseudo-mask priors from Stage I failures.

Per view: cosine similarity between features of the ground truth and of the
Stage I render, min-max normalized; per-instance mean similarity and mean L1
residual; instances that are both dissimilar (mean <= tau_sim) and poorly
reconstructed (mean residual >= tau_l1) are retained, unioned and dilated.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _loop
from .errors import PriorSplatError, ShapeError
from .providers import Providers, resolve_providers
from .raster import (
    InstanceSet,
    cosine_similarity_map,
    dilate,
    l1_residual,
    minmax_normalize,
    save_mask_png,
)
from .scenegen import Dataset

STATS_HEADER = ["instance_id", "mu_sim", "mean_l1", "retained"]


@dataclass
class InstanceRecord:
    instance_id: int
    mu_sim: float
    mean_l1: float
    retained: bool = False


@dataclass
class PseudoPrior:
    keep: np.ndarray  # binary keep-polarity mask
    records: list[InstanceRecord]
    tau_sim: float
    tau_l1: float
    dilation: int

    @property
    def retained_ids(self) -> list[int]:
        return [r.instance_id for r in self.records if r.retained]


def similarity_map(f_gt, f_render) -> tuple[np.ndarray, np.ndarray]:
    """(S, S_hat): per-pixel cosine similarity and its min-max normalization."""
    f_gt = np.asarray(f_gt, dtype=np.float64)
    f_render = np.asarray(f_render, dtype=np.float64)
    if f_gt.shape != f_render.shape:
        raise ShapeError(f"feature maps differ: {f_gt.shape} vs {f_render.shape}")
    s = cosine_similarity_map(f_gt, f_render)
    return s, minmax_normalize(s)


def instance_stats(s_hat, l1, instance) -> tuple[float, float]:
    """Means of S_hat and of the L1 residual over the instance."""
    m = np.asarray(instance, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("instance is empty")
    return (float(np.sum(np.asarray(s_hat, dtype=np.float64)[m]) / n),
            float(np.sum(np.asarray(l1, dtype=np.float64)[m]) / n))


def filter_instances(records, tau_sim: float, tau_l1: float) -> list[int]:
    """Ids with mu_sim <= tau_sim and mean_l1 >= tau_l1 (equality retained)."""
    if not (0.0 <= tau_sim <= 1.0 and 0.0 <= tau_l1 <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    keep = []
    for r in records:
        r.retained = bool(r.mu_sim <= tau_sim and r.mean_l1 >= tau_l1)
        if r.retained:
            keep.append(r.instance_id)
    return keep


def mask_from_instances(instances: InstanceSet, ids, dilation: int) -> np.ndarray:
    keep = 1.0 - instances.union(ids).astype(np.float64)
    return dilate(keep, dilation)


def build_view_prior(s_hat, l1, instances: InstanceSet, tau_sim: float, tau_l1: float,
                     dilation: int) -> PseudoPrior:
    records = []
    for iid, m in instances:
        mu, ell = instance_stats(s_hat, l1, m)
        records.append(InstanceRecord(iid, mu, ell))
    ids = filter_instances(records, tau_sim, tau_l1)
    return PseudoPrior(mask_from_instances(instances, ids, dilation), records, tau_sim, tau_l1,
                       dilation)


class PriorBuildError(PriorSplatError, RuntimeError):
    def __init__(self, view_id: int, cause: Exception):
        self.view_id = view_id
        super().__init__(f"view {view_id}: {cause}")


def build_pseudo_masks(dataset: Dataset, renders: dict[int, np.ndarray], config,
                       providers: Providers | None = None) -> dict[int, PseudoPrior]:
    """Pseudo-mask prior for every view from the Stage I renders."""
    providers = providers or resolve_providers(config)
    tau_sim = float(config["priors.tau_sim"])
    tau_l1 = float(config["priors.tau_l1"])
    radius = int(config["priors.dilation"])
    priors = {}
    for view in dataset.views:
        vid = view.view_id
        try:
            rimg = renders[vid]
            f_gt = providers.prior_features(view, view.gt_image, "gt")
            f_r = providers.prior_features(view, rimg, "render")
            _, s_hat = similarity_map(f_gt, f_r)
            l1 = l1_residual(view.gt_image, rimg)
            inst = providers.instances(view, l1)
            priors[vid] = build_view_prior(s_hat, l1, inst, tau_sim, tau_l1, radius)
        except PriorSplatError as exc:
            raise PriorBuildError(vid, exc) from exc
        except (KeyError, ValueError, OSError) as exc:
            raise PriorBuildError(vid, exc) from exc
    return priors


def save_priors(priors: dict[int, PseudoPrior], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for vid in sorted(priors):
        p = priors[vid]
        png = out / f"pseudo_{vid:04d}.png"
        save_mask_png(png, p.keep)
        csv_path = out / f"stats_{vid:04d}.csv"
        rows = [[r.instance_id, r.mu_sim, r.mean_l1, r.retained] for r in p.records]
        _loop.write_csv(csv_path, STATS_HEADER, rows)
        written += [png, csv_path]
    return written
