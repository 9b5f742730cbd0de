"""Deterministic synthetic multi-view datasets with exact ground truth.

A static world made of Gaussians (a far background layer plus object clusters)
is drawn once from the seed. Cameras sweep a smooth path over it. Each view
also composites transient clusters in front of the static content; a transient
recurs in the next view with probability ``p_persist`` and otherwise vanishes.
Ground truth comes from the per-object alpha-weighted contribution: the
transient mask marks pixels where the summed transient contribution exceeds
``tau_vis``; an instance proposal holds the pixels an object dominates
(contribution above ``tau_instance``), the way a segmenter outlines the
visible body of an object rather than its faint fringe.
"""

from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .raster import (
    DepthMap,
    InstanceSet,
    load_image_png,
    load_mask_png,
    read_ras1,
    save_image_png,
    save_mask_png,
    write_ras1,
)
from .splat import GaussianScene, ViewCamera, contributions, load_checkpoint, render, save_checkpoint
from .splat.scene import logit

log = logging.getLogger(__name__)

TAU_VIS = 0.05
TAU_INSTANCE = 0.1
TRANSIENT_ID_BASE = 1000


@dataclass
class SceneSpec:
    seed: int = 0
    width: int = 128
    height: int = 96
    pixel_scale: float = 0.05
    world_extent: tuple[float, float] = (24.0, 16.8)
    background_spacing: float = 1.0  # world units between background blobs
    static_objects: int = 60
    static_size: tuple[float, float] = (0.3, 0.6)
    static_saturation: tuple[float, float] = (0.15, 0.45)
    static_detail: float = 4.0  # small texture Gaussians per square world unit
    views: int = 48
    path_rows: int = 4  # camera path sweeps the world in this many serpentine rows
    camera_jitter: float = 0.25  # world units of per-view translation noise
    rotation_jitter: float = 0.12  # radians
    transients_per_view: int = 1
    p_persist: float = 0.0
    transient_size: tuple[float, float] = (0.9, 1.25)
    transient_saturation: tuple[float, float] = (0.85, 1.0)
    transient_value: tuple[float, float] = (0.6, 1.0)
    tau_vis: float = TAU_VIS
    tau_instance: float = TAU_INSTANCE  # object owns a pixel above this contribution

    def validate(self) -> None:
        if self.views <= 0:
            raise ConfigError(f"views must be > 0, got {self.views}")
        for name in ("static_objects", "transients_per_view", "width", "height"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.p_persist <= 1.0:
            raise ConfigError(f"p_persist must lie in [0, 1], got {self.p_persist}")
        if self.pixel_scale <= 0:
            raise ConfigError("pixel_scale must be > 0")


@dataclass
class ViewFrame:
    view_id: int
    camera: ViewCamera
    gt_image: np.ndarray
    static_image: np.ndarray
    transient_mask: np.ndarray  # keep polarity
    transient_alpha: np.ndarray  # summed transient contribution per pixel
    static_depth: DepthMap
    instances: InstanceSet
    transient_ids: list[int] = field(default_factory=list)
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_image.shape[:2]


@dataclass
class Dataset:
    spec: SceneSpec
    views: list[ViewFrame]
    static_scene: GaussianScene

    def __len__(self):
        return len(self.views)


@dataclass
class _Object:
    params: dict
    instance_id: int


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _cluster(rng, center, radius, n, depth_band, rgb, jitter_color, opacity,
             spread=0.45, scale_range=(0.35, 0.6)):
    """Gaussians scattered around ``center`` forming one object."""
    ang = rng.uniform(0, 2 * np.pi, n)
    rad = radius * spread * np.sqrt(rng.uniform(0, 1, n))
    means = np.asarray(center) + np.stack([np.cos(ang) * rad, np.sin(ang) * rad], axis=1)
    scales = radius * rng.uniform(scale_range[0], scale_range[1], (n, 2))
    cols = np.clip(rgb[None, :] + rng.normal(0, jitter_color, (n, 3)), 0.02, 0.98)
    depth = rng.uniform(depth_band[0], depth_band[1], n)
    return {
        "means": means,
        "log_scales": np.log(scales),
        "theta": rng.uniform(0, np.pi, n),
        "opacity_logit": logit(rng.uniform(opacity[0], opacity[1], n)),
        "color_logit": logit(cols),
        "depth": depth,
    }


def _concat(parts):
    keys = parts[0].keys()
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in keys}


def _static_world(spec: SceneSpec, rng):
    wx, wy = spec.world_extent
    step = spec.background_spacing
    parts, groups = [], []
    # far background layer, slightly overscanned so the window never sees bare gray
    gx = int(math.ceil((wx + 1.0) / step)) + 1
    gy = int(math.ceil((wy + 1.0) / step)) + 1
    cx, cy = np.meshgrid(-0.5 + step * np.arange(gx), -0.5 + step * np.arange(gy))
    nb = cx.size
    means = np.stack([cx.ravel(), cy.ravel()], axis=1) + rng.normal(0, 0.1 * step, (nb, 2))
    base_hue = rng.uniform(0, 1)
    cols = np.array([
        _hsv(base_hue + rng.normal(0, 0.08), rng.uniform(0.1, 0.35), rng.uniform(0.35, 0.75))
        for _ in range(nb)
    ])
    parts.append({
        "means": means,
        "log_scales": np.log(step * rng.uniform(0.5, 0.75, (nb, 2))),
        "theta": rng.uniform(0, np.pi, nb),
        "opacity_logit": logit(rng.uniform(0.9, 0.97, nb)),
        "color_logit": logit(cols),
        "depth": rng.uniform(8.0, 10.0, nb),
    })
    groups.append(np.full(nb, -1))
    # fine texture painted on the background
    nd = int(round(spec.static_detail * wx * wy))
    if nd:
        dcols = np.array([
            _hsv(base_hue + rng.normal(0, 0.15), rng.uniform(0.05, 0.4), rng.uniform(0.2, 0.9))
            for _ in range(nd)
        ])
        parts.append({
            "means": rng.uniform([0.0, 0.0], [wx, wy], (nd, 2)),
            "log_scales": np.log(rng.uniform(0.06, 0.2, (nd, 2))),
            "theta": rng.uniform(0, np.pi, nd),
            "opacity_logit": logit(rng.uniform(0.5, 0.9, nd)),
            "color_logit": logit(dcols),
            "depth": rng.uniform(7.0, 8.0, nd),
        })
        groups.append(np.full(nd, -1))
    objects = []
    for j in range(spec.static_objects):
        r = rng.uniform(*spec.static_size)
        c = rng.uniform([r, r], [wx - r, wy - r])
        n = int(rng.integers(2, 6))
        rgb = _hsv(rng.uniform(0, 1), rng.uniform(*spec.static_saturation), rng.uniform(0.3, 0.85))
        p = _cluster(rng, c, r, n, (4.0, 7.0), rgb, 0.03, (0.85, 0.97))
        parts.append(p)
        groups.append(np.full(n, j))
        objects.append(_Object(p, j))
    return _concat(parts), np.concatenate(groups), objects


def _camera_path(spec: SceneSpec, rng) -> list[ViewCamera]:
    """Serpentine sweep: ``path_rows`` rows, consecutive views are neighbours."""
    wx, wy = spec.world_extent
    win_w = spec.width * spec.pixel_scale
    win_h = spec.height * spec.pixel_scale
    rows = max(1, min(spec.path_rows, spec.views))
    cols = int(math.ceil(spec.views / rows))
    xs = np.linspace(win_w / 2, max(wx - win_w / 2, win_w / 2), cols)
    ys = np.linspace(win_h / 2, max(wy - win_h / 2, win_h / 2), rows)
    cams = []
    for v in range(spec.views):
        row, k = divmod(v, cols)
        col = k if row % 2 == 0 else cols - 1 - k
        c = np.array([xs[col], ys[row]]) + rng.normal(0, spec.camera_jitter, 2)
        rot = rng.uniform(-spec.rotation_jitter, spec.rotation_jitter)
        cr, sr = math.cos(rot), math.sin(rot)
        half = np.array([spec.width / 2, spec.height / 2]) * spec.pixel_scale
        origin = c - np.array([[cr, -sr], [sr, cr]]) @ half
        cams.append(ViewCamera(tuple(origin), rot, spec.pixel_scale, spec.width, spec.height))
    return cams


def _quantize(img):
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate(spec: SceneSpec | None = None) -> Dataset:
    """Draw the static world, cameras and transients; render all ground truth."""
    spec = SceneSpec() if spec is None else spec
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    static_params, static_groups, static_objects = _static_world(spec, rng)
    static_scene = GaussianScene(static_params)
    cameras = _camera_path(spec, rng)
    trng = np.random.default_rng([spec.seed, 1])

    n_static_obj = len(static_objects)
    active: list[_Object] = []
    next_tid = TRANSIENT_ID_BASE
    views = []
    for v, cam in enumerate(cameras):
        # persistence process: each live transient survives into this view w.p. p_persist
        if v > 0:
            active = [o for o in active if trng.uniform() < spec.p_persist]
        while len(active) < spec.transients_per_view:
            r = trng.uniform(*spec.transient_size)
            # place inside the central part of this view's window
            sx = trng.uniform(0.2, 0.8) * spec.width
            sy = trng.uniform(0.25, 0.75) * spec.height
            c = cam.screen_to_world(np.array([sx, sy]))
            rgb = _hsv(trng.uniform(0, 1), trng.uniform(*spec.transient_saturation),
                       trng.uniform(*spec.transient_value))
            n = int(trng.integers(3, 9))
            # compact, nearly opaque blobs: thin soft fringe around a solid core
            p = _cluster(trng, c, r, n, (1.0, 2.5), rgb, 0.05, (0.95, 0.99),
                         spread=0.5, scale_range=(0.3, 0.42))
            active.append(_Object(p, next_tid))
            next_tid += 1

        parts = [static_params] + [o.params for o in active]
        full = GaussianScene(_concat(parts) if active else static_params)
        groups = [static_groups]
        for k, o in enumerate(active):
            groups.append(np.full(o.params["means"].shape[0], n_static_obj + k))
        groups = np.concatenate(groups)
        ngroups = n_static_obj + len(active)

        static_r = render(static_scene, cam)
        full_r = render(full, cam)
        contrib = contributions(full, cam, groups, ngroups) if ngroups else np.zeros((0, *cam.shape))
        t_alpha = contrib[n_static_obj:].sum(axis=0) if active else np.zeros(cam.shape)
        t_alpha = t_alpha.astype(np.float32).astype(np.float64)
        tmask = np.where(t_alpha > spec.tau_vis, 0.0, 1.0)

        inst_masks, inst_ids, t_ids = [], [], []
        for g in range(ngroups):
            m = contrib[g] > spec.tau_instance
            if not m.any():
                continue
            if g < n_static_obj:
                inst_ids.append(static_objects[g].instance_id)
            else:
                iid = active[g - n_static_obj].instance_id
                inst_ids.append(iid)
                t_ids.append(iid)
            inst_masks.append(m)
        if inst_masks:
            instances = InstanceSet(np.stack(inst_masks), inst_ids)
        else:
            instances = InstanceSet.empty(*cam.shape)

        sd = static_r.depth
        depth = DepthMap(sd.depth.astype(np.float32).astype(np.float64), sd.valid)
        views.append(ViewFrame(
            view_id=v,
            camera=cam,
            gt_image=_quantize(full_r.image),
            static_image=_quantize(static_r.image),
            transient_mask=tmask,
            transient_alpha=t_alpha,
            static_depth=depth,
            instances=instances,
            transient_ids=t_ids,
        ))
    log.debug("generated %d views, %d static Gaussians", len(views), len(static_scene))
    return Dataset(spec, views, static_scene)


def gt_transient_mask(view: ViewFrame, tau_vis: float = TAU_VIS) -> np.ndarray:
    """Keep mask: 0 where the transient contribution exceeds ``tau_vis``."""
    return np.where(view.transient_alpha > tau_vis, 0.0, 1.0)


def init_scene(extent, count: int, seed: int, pixel_scale: float,
               depth_range=(1.0, 10.0), init_scale_px: float = 4.0,
               init_opacity: float = 0.1) -> GaussianScene:
    """Random reconstruction start: uniform means over the world, gray colour."""
    rng = np.random.default_rng([seed, 7])
    wx, wy = extent
    scale = init_scale_px * pixel_scale
    p = {
        "means": rng.uniform([0.0, 0.0], [wx, wy], (count, 2)),
        "log_scales": np.log(scale * rng.uniform(0.7, 1.3, (count, 2))),
        "theta": rng.uniform(0, np.pi, count),
        "opacity_logit": np.full(count, float(logit(init_opacity))),
        "color_logit": rng.normal(0, 0.1, (count, 3)),
        "depth": rng.uniform(depth_range[0], depth_range[1], count),
    }
    return GaussianScene(p)


# -- on-disk layout ------------------------------------------------------------


def _write_kv(path: Path, d: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in d.items()))


def _read_kv(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def _ids_str(ids):
    return ",".join(str(i) for i in ids)


def _parse_ids(s):
    return [int(x) for x in s.split(",") if x]


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    _write_kv(root / "spec.txt", {k: v for k, v in asdict(ds.spec).items()})
    save_checkpoint(ds.static_scene, root / "scene.gs2d")
    for v in ds.views:
        d = root / f"view_{v.view_id:04d}"
        d.mkdir(exist_ok=True)
        save_image_png(d / "gt.png", v.gt_image)
        save_image_png(d / "static.png", v.static_image)
        save_mask_png(d / "tmask.png", v.transient_mask)
        write_ras1(d / "depth.ras1", np.where(v.static_depth.valid, v.static_depth.depth, -1.0))
        write_ras1(d / "talpha.ras1", v.transient_alpha)
        planes = np.moveaxis(v.instances.masks, 0, -1).astype(np.float32)
        if planes.shape[-1] == 0:
            planes = np.zeros((*v.shape, 0), np.float32)
        write_ras1(d / "instances.ras1", planes)
        kv = v.camera.to_dict()
        kv["view_id"] = v.view_id
        kv["instance_ids"] = _ids_str(v.instances.ids)
        kv["transient_ids"] = _ids_str(v.transient_ids)
        _write_kv(d / "camera.txt", kv)


def _parse_spec(d: dict) -> SceneSpec:
    fields = SceneSpec.__dataclass_fields__
    kwargs = {}
    for k, raw in d.items():
        if k not in fields:
            continue
        default = getattr(SceneSpec, k)
        if isinstance(default, tuple):
            kwargs[k] = tuple(type(default[0])(float(x)) for x in raw.strip("()").split(","))
        elif isinstance(default, bool):
            kwargs[k] = raw == "True"
        elif isinstance(default, int):
            kwargs[k] = int(raw)
        else:
            kwargs[k] = float(raw)
    return SceneSpec(**kwargs)


def load_dataset(root) -> Dataset:
    root = Path(root)
    spec = _parse_spec(_read_kv(root / "spec.txt"))
    scene = load_checkpoint(root / "scene.gs2d")
    views = []
    for d in sorted(root.glob("view_*")):
        kv = _read_kv(d / "camera.txt")
        cam = ViewCamera.from_dict(kv)
        dep = read_ras1(d / "depth.ras1", cam.shape)[:, :, 0].astype(np.float64)
        planes = read_ras1(d / "instances.ras1", cam.shape)
        ids = _parse_ids(kv.get("instance_ids", ""))
        masks = np.moveaxis(planes, -1, 0) > 0.5
        inst = InstanceSet(masks, ids) if ids else InstanceSet.empty(*cam.shape)
        views.append(ViewFrame(
            view_id=int(kv["view_id"]),
            camera=cam,
            gt_image=load_image_png(d / "gt.png"),
            static_image=load_image_png(d / "static.png"),
            transient_mask=load_mask_png(d / "tmask.png"),
            transient_alpha=read_ras1(d / "talpha.ras1", cam.shape)[:, :, 0].astype(np.float64),
            static_depth=DepthMap(np.maximum(dep, 0.0), dep >= 0.0),
            instances=inst,
            transient_ids=_parse_ids(kv.get("transient_ids", "")),
        ))
    return Dataset(spec, views, scene)
