"""Feature, instance-proposal and depth providers.

Each slot has a deterministic built-in stand-in and an ingestion path for
exports from external models (dense features and depth as RAS1 rasters,
instance proposals as directories of binary ``inst_XXX.png`` masks). Results
are cached on ``ViewFrame.cache`` keyed by provider id, written once.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from .errors import (
    ConfigError,
    DimensionMismatchError,
    NonFiniteError,
    ParameterError,
    PrerequisiteError,
)
from .raster import DepthMap, InstanceSet, as_image, load_mask_png, read_ras1, save_mask_png
from .scenegen import ViewFrame

FEATURE_DIM = 11
BLUR_SIGMAS = (1.0, 2.0, 4.0)
GRAD_SIGMAS = (1.0, 2.0)
CC_PERCENTILE = 90.0
CC_MIN_PIXELS = 16
INSTANCE_MODES = ("gt-objects", "residual-cc")


def builtin_features(image) -> np.ndarray:
    """(H, W, 11): RGB blurred at sigma 1, 2, 4 and gray gradient magnitude at sigma 1, 2.

    Separable Gaussian filters with reflect padding (scipy's ``reflect`` mode,
    which repeats the edge sample).
    """
    img = as_image(image)
    planes = []
    for s in BLUR_SIGMAS:
        planes.append(ndimage.gaussian_filter(img, sigma=(s, s, 0), mode="reflect"))
    gray = img.mean(axis=2)
    for s in GRAD_SIGMAS:
        planes.append(ndimage.gaussian_gradient_magnitude(gray, sigma=s, mode="reflect")[:, :, None])
    return np.concatenate(planes, axis=2)


def builtin_instances(view: ViewFrame, residual=None, mode: str = "gt-objects") -> InstanceSet:
    """Object proposals: ground-truth objects, or connected high-residual blobs."""
    if mode == "gt-objects":
        return view.instances
    if mode != "residual-cc":
        raise ConfigError(f"unknown instance mode {mode!r}; choose from {INSTANCE_MODES}")
    if residual is None:
        raise ParameterError("residual-cc proposals need a residual raster")
    return residual_components(residual)


def residual_components(residual, percentile: float = CC_PERCENTILE,
                        min_pixels: int = CC_MIN_PIXELS) -> InstanceSet:
    """8-connected components of pixels above the residual percentile."""
    r = np.asarray(residual, dtype=np.float64)
    if not np.any(r > 0):
        return InstanceSet.empty(*r.shape)
    cut = np.percentile(r, percentile)
    on = r > cut
    labels, n = ndimage.label(on, structure=np.ones((3, 3), dtype=bool))
    masks = []
    for k in range(1, n + 1):
        m = labels == k
        if m.sum() >= min_pixels:
            masks.append(m)
    if not masks:
        return InstanceSet.empty(*r.shape)
    return InstanceSet(np.stack(masks), list(range(len(masks))))


def builtin_depth(view: ViewFrame, noise_sigma: float | None = None, seed: int = 0) -> DepthMap:
    """Ground-truth static depth plus seeded Gaussian noise.

    ``noise_sigma`` defaults to 2% of the valid depth range. Invalid pixels stay
    invalid and carry depth 0.
    """
    gt = view.static_depth
    if noise_sigma is None:
        noise_sigma = 0.02 * gt.range()
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be >= 0")
    depth = gt.depth.copy()
    if noise_sigma > 0:
        rng = np.random.default_rng([seed, view.view_id, 2])
        depth = depth + rng.normal(0.0, noise_sigma, depth.shape)
    depth = np.where(gt.valid, np.maximum(depth, 0.0), 0.0)
    return DepthMap(depth, gt.valid.copy())


# -- ingestion -----------------------------------------------------------------

_INST_RE = re.compile(r"inst_(\d+)\.png$")


def ingest(path, kind: str, view: ViewFrame | None = None):
    """Load one external provider output and validate it against ``view``.

    ``kind`` is ``features`` (RAS1, any channel count), ``depth`` (RAS1, one
    channel, negative = invalid) or ``instances`` (directory of inst_XXX.png).
    The result is cached on the view under ``ingest:<kind>:<path>``.
    """
    path = Path(path)
    key = f"ingest:{kind}:{path}"
    if view is not None and key in view.cache:
        return view.cache[key]
    hw = view.shape if view is not None else None
    if kind == "features":
        arr = read_ras1(path, hw).astype(np.float64)
        out = arr
    elif kind == "depth":
        arr = read_ras1(path, hw).astype(np.float64)
        if arr.shape[2] != 1:
            raise DimensionMismatchError(path, (*arr.shape[:2], 1), arr.shape)
        d = arr[:, :, 0]
        out = DepthMap(np.maximum(d, 0.0), d >= 0.0)
    elif kind == "instances":
        out = _ingest_instances(path, hw)
    else:
        raise ConfigError(f"unknown ingest kind {kind!r}")
    if view is not None:
        view.cache[key] = out
    return out


def _ingest_instances(root: Path, hw) -> InstanceSet:
    if not root.is_dir():
        raise FileNotFoundError(f"instance directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if _INST_RE.search(p.name))
    masks, ids = [], []
    for p in files:
        keep = load_mask_png(p)
        if hw is not None and keep.shape != tuple(hw):
            raise DimensionMismatchError(p, tuple(hw), keep.shape)
        # exported masks mark the object with 255
        m = keep > 0.5
        if not m.any():
            continue
        masks.append(m)
        ids.append(int(_INST_RE.search(p.name).group(1)))
    if not masks:
        h, w = hw if hw is not None else (0, 0)
        return InstanceSet.empty(h, w)
    return InstanceSet(np.stack(masks), ids)


def write_instance_dir(root, instances: InstanceSet) -> None:
    """Export an InstanceSet as inst_XXX.png files (255 = object)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for iid, m in zip(instances.ids, instances.masks):
        save_mask_png(root / f"inst_{iid:03d}.png", m.astype(np.float64))


# -- provider selection --------------------------------------------------------


@dataclass
class Providers:
    """Resolved provider functions for one run.

    ``prior_features(view, image, which)`` serves pseudo-mask construction,
    with ``which`` in {"gt", "render"}. ``mlp_features(view)`` is the cached
    per-view input of the Stage II mask predictor. The live consistency check
    of Stage II compares gt and current renders, so it always runs the
    built-in extractor on both (an ingested model cannot be re-run inside the
    training loop).
    """

    prior_features: Callable
    mlp_features: Callable
    instances: Callable  # view, residual -> InstanceSet
    depth: Callable  # view -> DepthMap
    ids: dict


def _view_file(root: Path, view: ViewFrame, suffix: str) -> Path:
    return root / f"view_{view.view_id:04d}{suffix}"


def _cached(view: ViewFrame, key: str, make):
    if key not in view.cache:
        view.cache[key] = make()
    return view.cache[key]


def _prior_feature_provider(spec: str):
    if spec == "builtin":
        def feat(view, image, which):
            if which == "gt":
                return _cached(view, "features:builtin:gt", lambda: builtin_features(image))
            return builtin_features(image)
        return feat
    root = Path(spec.split(":", 1)[1])

    def feat(view, image, which):
        suffix = ".ras1" if which == "gt" else "_render.ras1"
        path = _view_file(root, view, suffix)
        if not path.exists():
            raise PrerequisiteError(f"ingested features missing: {path}")
        return ingest(path, "features", view)
    return feat


def _mlp_feature_provider(spec: str):
    if spec == "builtin":
        def feat(view):
            return _cached(view, "features:builtin:gt", lambda: builtin_features(view.gt_image))
        return feat
    root = Path(spec.split(":", 1)[1])

    def feat(view):
        return ingest(_view_file(root, view, ".ras1"), "features", view)
    return feat


def resolve_providers(config) -> Providers:
    """Build provider callables from ``features.provider`` and friends."""
    feat_spec = config["features.provider"]
    mlp_spec = config["mlp_features.provider"]
    inst_spec = config["instances.provider"]
    depth_spec = config["depth.provider"]
    mode = config["instances.mode"]
    rel = config["depth.noise_rel"]
    seed = config["seed"]

    if inst_spec == "builtin":
        def instances(view, residual=None):
            return builtin_instances(view, residual, mode)
    else:
        iroot = Path(inst_spec.split(":", 1)[1])

        def instances(view, residual=None):
            return ingest(_view_file(iroot, view, ""), "instances", view)

    if depth_spec == "builtin":
        def depth(view):
            return _cached(view, "depth:builtin",
                           lambda: builtin_depth(view, rel * view.static_depth.range(), seed))
    else:
        droot = Path(depth_spec.split(":", 1)[1])

        def depth(view):
            return ingest(_view_file(droot, view, "_depth.ras1"), "depth", view)

    ids = {"features": feat_spec, "mlp_features": mlp_spec, "instances": f"{inst_spec}/{mode}",
           "depth": depth_spec}
    return Providers(_prior_feature_provider(feat_spec), _mlp_feature_provider(mlp_spec),
                     instances, depth, ids)


def check_finite_features(feat: np.ndarray, what: str = "features") -> None:
    if not np.all(np.isfinite(feat)):
        raise NonFiniteError(f"{what} contain NaN or Inf")
