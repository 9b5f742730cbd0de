"""Rendering and analytic backward pass for the 2.5D splatting scene.

The full 3DGS projection Sigma' = J W Sigma W^T J^T reduces here to an exact
similarity conjugation: with world-to-screen map x -> R(-phi)(x - o)/s the
screen covariance is R(theta - phi) diag(sx^2, sy^2) R(theta - phi)^T / s^2.
Depth never enters the projection; it only orders primitives and feeds the
rendered depth map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, StaleCacheError
from ..raster import DepthMap
from . import _kernels as K
from .scene import GaussianScene, ViewCamera

BACKGROUND = (0.5, 0.5, 0.5)
_Q_CUTOFF = 2.0 * math.log(255.0)


@dataclass
class Projection:
    order: np.ndarray  # scene indices, front to back
    mx: np.ndarray
    my: np.ndarray
    ca: np.ndarray
    cb: np.ndarray
    cc: np.ndarray
    inv1: np.ndarray
    inv2: np.ndarray
    cos_t: np.ndarray
    sin_t: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    depth: np.ndarray
    offsets: np.ndarray
    idx: np.ndarray


@dataclass
class RenderCache:
    scene: GaussianScene
    version: int
    camera: ViewCamera
    background: np.ndarray
    proj: Projection
    ncontrib: np.ndarray  # scene order


@dataclass
class RenderResult:
    image: np.ndarray
    depth: DepthMap
    alpha: np.ndarray
    transmittance: np.ndarray
    cache: RenderCache = field(repr=False)


@dataclass
class BackwardResult:
    params: dict[str, np.ndarray]
    screen_means: np.ndarray
    visible: np.ndarray


def project(scene: GaussianScene, camera: ViewCamera) -> Projection:
    scene.validate()
    p = scene.params
    order = np.lexsort((scene.ids, p["depth"]))
    mat = camera.world_to_screen_matrix()
    means = (p["means"][order] - np.asarray(camera.origin)) @ mat.T
    s2 = camera.pixel_scale**2
    ls = p["log_scales"][order]
    inv1 = s2 * np.exp(-2.0 * ls[:, 0])
    inv2 = s2 * np.exp(-2.0 * ls[:, 1])
    th = p["theta"][order] - camera.rotation
    ct = np.cos(th)
    st = np.sin(th)
    ca = ct * ct * inv1 + st * st * inv2
    cb = ct * st * (inv1 - inv2)
    cc = st * st * inv1 + ct * ct * inv2
    lam_max = 1.0 / np.minimum(inv1, inv2)
    rad = np.sqrt(_Q_CUTOFF * lam_max) + 1e-9
    mx = np.ascontiguousarray(means[:, 0])
    my = np.ascontiguousarray(means[:, 1])
    offsets, idx = K.bin_tiles(mx, my, rad, camera.height, camera.width, K.TILE)
    return Projection(
        order=order, mx=mx, my=my, ca=ca, cb=cb, cc=cc, inv1=inv1, inv2=inv2,
        cos_t=ct, sin_t=st,
        opacity=scene.opacity[order],
        colors=np.ascontiguousarray(scene.colors[order]),
        depth=np.ascontiguousarray(p["depth"][order]),
        offsets=offsets, idx=idx,
    )


def render(scene: GaussianScene, camera: ViewCamera, background=BACKGROUND) -> RenderResult:
    """Composite the scene front to back into an image, depth and alpha map."""
    bg = np.asarray(background, dtype=np.float64)
    proj = project(scene, camera)
    img, dep, acc, tfin, ncontrib = K.render_tiles(
        proj.mx, proj.my, proj.ca, proj.cb, proj.cc, proj.opacity, proj.colors,
        proj.depth, proj.offsets, proj.idx, camera.height, camera.width, K.TILE, bg,
    )
    counts = np.zeros(len(scene), dtype=np.int64)
    counts[proj.order] = ncontrib
    cache = RenderCache(scene, scene.version, camera, bg, proj, counts)
    depth = DepthMap(dep, acc >= K.DEPTH_MIN_ALPHA)
    return RenderResult(img, depth, acc, tfin, cache)


def backward(cache: RenderCache, grad_image, grad_depth=None) -> BackwardResult:
    """Gradients of a scalar loss w.r.t. every parameter group of the scene."""
    scene = cache.scene
    if scene.version != cache.version:
        raise StaleCacheError(
            f"scene changed since render (version {cache.version} -> {scene.version})"
        )
    cam = cache.camera
    g_img = np.ascontiguousarray(grad_image, dtype=np.float64)
    if g_img.shape != (cam.height, cam.width, 3):
        raise ShapeError(f"image gradient shape {g_img.shape} does not match camera")
    if grad_depth is None:
        g_dep = np.zeros(cam.shape)
    else:
        g_dep = np.ascontiguousarray(grad_depth, dtype=np.float64)
        if g_dep.shape != cam.shape:
            raise ShapeError(f"depth gradient shape {g_dep.shape} does not match camera")
    pr = cache.proj
    gmx, gmy, gca, gcb, gcc, gop, gcol, gz = K.backward_tiles(
        pr.mx, pr.my, pr.ca, pr.cb, pr.cc, pr.opacity, pr.colors, pr.depth,
        pr.offsets, pr.idx, cam.height, cam.width, K.TILE, cache.background, g_img, g_dep,
    )
    n = len(scene)
    order = pr.order
    g_screen = np.stack([gmx, gmy], axis=1)
    g_means = g_screen @ cam.world_to_screen_matrix()

    ct, st, inv1, inv2 = pr.cos_t, pr.sin_t, pr.inv1, pr.inv2
    g_inv1 = gca * ct * ct + gcb * ct * st + gcc * st * st
    g_inv2 = gca * st * st - gcb * ct * st + gcc * ct * ct
    diff = inv1 - inv2
    g_theta = diff * (-2.0 * ct * st * gca + (ct * ct - st * st) * gcb + 2.0 * ct * st * gcc)
    g_ls = np.stack([-2.0 * inv1 * g_inv1, -2.0 * inv2 * g_inv2], axis=1)
    o = pr.opacity
    g_ologit = gop * o * (1.0 - o)
    cols = pr.colors
    g_clogit = gcol * cols * (1.0 - cols)

    out = {
        "means": np.zeros((n, 2)),
        "log_scales": np.zeros((n, 2)),
        "theta": np.zeros(n),
        "opacity_logit": np.zeros(n),
        "color_logit": np.zeros((n, 3)),
        "depth": np.zeros(n),
    }
    out["means"][order] = g_means
    out["log_scales"][order] = g_ls
    out["theta"][order] = g_theta
    out["opacity_logit"][order] = g_ologit
    out["color_logit"][order] = g_clogit
    out["depth"][order] = gz
    screen = np.zeros((n, 2))
    screen[order] = g_screen
    return BackwardResult(out, screen, cache.ncontrib > 0)


def contributions(scene: GaussianScene, camera: ViewCamera, groups, ngroups: int) -> np.ndarray:
    """Alpha-weighted visible contribution of each group, shape (ngroups, H, W).

    ``groups`` assigns a group index to each Gaussian (-1 for none).
    """
    proj = project(scene, camera)
    grp = np.ascontiguousarray(np.asarray(groups, dtype=np.int64)[proj.order])
    return K.contribution_by_group(
        proj.mx, proj.my, proj.ca, proj.cb, proj.cc, proj.opacity, grp, int(ngroups),
        proj.offsets, proj.idx, camera.height, camera.width, K.TILE,
    )
