"""Raster containers and elementary image operations.

Conventions used everywhere in the package:

* Images are ``float64`` arrays of shape ``(H, W, 3)`` with values in [0, 1].
* Mask maps are ``(H, W)`` arrays in [0, 1] with **keep polarity**:
  1 means the pixel is static and supervises reconstruction, 0 means transient.
* Feature maps are ``(H, W, D)`` arrays with ``D >= 1``.
* Depth maps and instance sets carry extra structure and are small dataclasses.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import (
    DimensionMismatchError,
    NonBinaryMaskError,
    NonFiniteError,
    RasterFormatError,
    ShapeError,
)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

RAS1_MAGIC = b"RAS1"
RAS1_DTYPE_F32 = 0


@dataclass
class DepthMap:
    """Per-pixel depth with a validity flag (invalid where nothing rendered)."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape or self.depth.ndim != 2:
            raise ShapeError(
                f"depth {self.depth.shape} and validity {self.valid.shape} must be equal 2D shapes"
            )

    @property
    def shape(self):
        return self.depth.shape

    def range(self) -> float:
        """max - min over valid pixels, 0 if fewer than two valid values."""
        if not self.valid.any():
            return 0.0
        vals = self.depth[self.valid]
        return float(vals.max() - vals.min())


@dataclass
class InstanceSet:
    """Object-level proposals: one boolean plane per instance, overlap allowed."""

    masks: np.ndarray
    ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise ShapeError(f"instance planes must be (K, H, W), got {self.masks.shape}")
        if not self.ids:
            self.ids = list(range(self.masks.shape[0]))
        self.ids = [int(i) for i in self.ids]
        if len(self.ids) != self.masks.shape[0]:
            raise ShapeError("one id per instance plane is required")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("instance ids must be unique")
        empty = [i for i, m in zip(self.ids, self.masks) if not m.any()]
        if empty:
            raise ValueError(f"empty instances: {empty}")

    @classmethod
    def empty(cls, height: int, width: int) -> "InstanceSet":
        return cls(np.zeros((0, height, width), dtype=bool), [])

    @property
    def shape(self):
        return self.masks.shape[1:]

    def __len__(self):
        return self.masks.shape[0]

    def __iter__(self):
        return iter(zip(self.ids, self.masks))

    def get(self, instance_id: int) -> np.ndarray:
        return self.masks[self.ids.index(instance_id)]

    def union(self, ids=None) -> np.ndarray:
        """Boolean union of the selected instances (all when ``ids`` is None)."""
        if ids is None:
            sel = self.masks
        else:
            wanted = set(ids)
            sel = self.masks[[k for k, i in enumerate(self.ids) if i in wanted]]
        if sel.shape[0] == 0:
            return np.zeros(self.shape, dtype=bool)
        return sel.any(axis=0)


def _check_same(a: np.ndarray, b: np.ndarray, what: str = "rasters"):
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def as_image(x) -> np.ndarray:
    img = np.asarray(x, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {img.shape}")
    return img


def keep_to_transient(mask: np.ndarray) -> np.ndarray:
    """Boolean transient set from a keep-polarity mask (binarized at 0.5)."""
    return np.asarray(mask) < 0.5


def transient_to_keep(transient: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(transient, dtype=bool), 0.0, 1.0)


def is_binary(mask: np.ndarray) -> bool:
    m = np.asarray(mask)
    return bool(np.all((m == 0) | (m == 1)))


def l1_residual(gt, render) -> np.ndarray:
    """Per-pixel mean absolute channel difference, shape (H, W)."""
    gt = as_image(gt)
    render = as_image(render)
    _check_same(gt, render, "images")
    return np.abs(gt - render).mean(axis=2)


def gaussian_kernel1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_filter_zero(x: np.ndarray, kernel: np.ndarray | None = None) -> np.ndarray:
    """Separable 'same' filtering of the first two axes with zero padding."""
    k = gaussian_kernel1d() if kernel is None else np.asarray(kernel, dtype=np.float64)
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        return _separable_zero(a[:, :, None], k)[:, :, 0]
    return _separable_zero(a, k)


@numba.njit(cache=True)
def _separable_zero(x, k):
    h, w, c = x.shape
    r = k.shape[0] // 2
    n = w * c
    flat = np.ascontiguousarray(x).reshape(h, n)
    tmp = np.zeros((h, n))
    for i in range(h):
        for t in range(k.shape[0]):
            ii = i + t - r
            if ii < 0 or ii >= h:
                continue
            kt = k[t]
            for q in range(n):
                tmp[i, q] += kt * flat[ii, q]
    out = np.zeros((h, n))
    for i in range(h):
        for t in range(k.shape[0]):
            shift = (t - r) * c
            lo = max(0, -shift)
            hi = min(n, n - shift)
            kt = k[t]
            for q in range(lo, hi):
                out[i, q] += kt * tmp[i, q + shift]
    return out.reshape(h, w, c)


@functools.lru_cache(maxsize=16)
def _window_norm(h: int, w: int) -> np.ndarray:
    # in-image mass of the window at every pixel; 1 away from borders
    norm = gaussian_filter_zero(np.ones((h, w, 1)))
    norm.setflags(write=False)
    return norm


@dataclass
class SSIMResult:
    value: float
    map: np.ndarray  # (H, W), channel mean of the SSIM index
    _terms: tuple = field(default=(), repr=False)

    @property
    def dssim(self) -> float:
        return (1.0 - self.value) / 2.0


def ssim(gt, render) -> SSIMResult:
    """SSIM with an 11x11 Gaussian window (sigma 1.5) on unit dynamic range.

    Near the border the window is truncated to the image and renormalized, so
    local statistics of a constant image are exact everywhere. Returns the mean
    index and the per-pixel map averaged over channels.
    """
    x = as_image(gt)
    y = as_image(render)
    _check_same(x, y, "images")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ShapeError(
            f"image {x.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    norm = _window_norm(*x.shape[:2])
    stats = gaussian_filter_zero(_ssim_moments(x, y))
    smap, ds = _ssim_terms(stats, norm[:, :, 0], SSIM_C1, SSIM_C2)
    pix = smap.mean(axis=2)
    return SSIMResult(float(pix.mean()), pix, (x, y, ds, norm))


def ssim_backward(result: SSIMResult, grad_map: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the rendered image given dL/d(per-pixel SSIM map)."""
    x, y, ds, norm = result._terms
    w = np.ascontiguousarray(grad_map, dtype=np.float64) / 3.0
    # local_mean = G(.)/norm with G self-adjoint, so its adjoint is G(./norm)
    filt = gaussian_filter_zero(_ssim_adjoint_in(ds, w, norm[:, :, 0]))
    return _ssim_adjoint_out(filt, x, y)


@numba.njit(cache=True)
def _ssim_moments(x, y):
    h, w, c = x.shape
    out = np.empty((h, w, 5 * c))
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                a = x[i, j, ch]
                b = y[i, j, ch]
                out[i, j, ch] = a
                out[i, j, c + ch] = b
                out[i, j, 2 * c + ch] = a * a
                out[i, j, 3 * c + ch] = b * b
                out[i, j, 4 * c + ch] = a * b
    return out


@numba.njit(cache=True)
def _ssim_terms(stats, norm, c1, c2):
    h, w, c5 = stats.shape
    c = c5 // 5
    smap = np.empty((h, w, c))
    ds = np.empty((h, w, 3 * c))  # dS/d(mu_y), dS/d(E[y^2]), dS/d(E[xy])
    for i in range(h):
        for j in range(w):
            nrm = norm[i, j]
            for ch in range(c):
                mx = stats[i, j, ch] / nrm
                my = stats[i, j, c + ch] / nrm
                sxx = stats[i, j, 2 * c + ch] / nrm - mx * mx
                syy = stats[i, j, 3 * c + ch] / nrm - my * my
                sxy = stats[i, j, 4 * c + ch] / nrm - mx * my
                a1 = 2.0 * mx * my + c1
                a2 = 2.0 * sxy + c2
                b1 = mx * mx + my * my + c1
                b2 = sxx + syy + c2
                s = (a1 * a2) / (b1 * b2)
                smap[i, j, ch] = s
                d_mu = 2.0 * mx * a2 / (b1 * b2) - s * 2.0 * my / b1
                d_syy = -s / b2
                d_sxy = 2.0 * a1 / (b1 * b2)
                # sigma_yy = E[y^2] - mu_y^2, sigma_xy = E[xy] - mu_x mu_y
                ds[i, j, ch] = d_mu - 2.0 * my * d_syy - mx * d_sxy
                ds[i, j, c + ch] = d_syy
                ds[i, j, 2 * c + ch] = d_sxy
    return smap, ds


@numba.njit(cache=True)
def _ssim_adjoint_in(ds, wmap, norm):
    h, w, c3 = ds.shape
    out = np.empty((h, w, c3))
    for i in range(h):
        for j in range(w):
            f = wmap[i, j] / norm[i, j]
            for q in range(c3):
                out[i, j, q] = f * ds[i, j, q]
    return out


@numba.njit(cache=True)
def _ssim_adjoint_out(filt, x, y):
    h, w, c = x.shape
    out = np.empty((h, w, c))
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                out[i, j, ch] = (filt[i, j, ch] + 2.0 * y[i, j, ch] * filt[i, j, c + ch]
                                 + x[i, j, ch] * filt[i, j, 2 * c + ch])
    return out


def psnr(gt, render) -> float:
    """10 log10(1 / MSE) in dB; ``math.inf`` when the images are identical."""
    gt = np.asarray(gt, dtype=np.float64)
    render = np.asarray(render, dtype=np.float64)
    _check_same(gt, render, "images")
    mse = float(np.mean((gt - render) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def dilate(mask, radius: int) -> np.ndarray:
    """Grow the transient (0) region of a binary keep mask by a square element.

    Pixels outside the image count as keep.
    """
    if radius < 0:
        raise ValueError(f"dilation radius must be >= 0, got {radius}")
    m = np.asarray(mask, dtype=np.float64)
    if not is_binary(m):
        raise NonBinaryMaskError("dilate expects a binary {0,1} mask")
    if radius == 0:
        return m.copy()
    return ndimage.minimum_filter(m, size=2 * radius + 1, mode="constant", cval=1.0)


MINMAX_FLAT = 1e-12


def minmax_normalize(raster) -> np.ndarray:
    """Rescale to [0, 1]; a constant raster maps to 0.5.

    A spread below ``MINMAX_FLAT`` counts as constant, so rounding noise (a
    cosine of 1 - 1e-16) is not stretched into a full-range map.
    """
    r = np.asarray(raster, dtype=np.float64)
    if np.isnan(r).any():
        raise ValueError("cannot normalize a raster containing NaN")
    lo = r.min()
    hi = r.max()
    if hi - lo <= MINMAX_FLAT:
        return np.full(r.shape, 0.5)
    return (r - lo) / (hi - lo)


def cosine_similarity_map(fa, fb) -> np.ndarray:
    """Per-pixel cosine similarity of two feature maps.

    Zero-vector guard: 1 when both vectors are zero, 0 when exactly one is.
    """
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.shape != fb.shape or fa.ndim != 3:
        raise ShapeError(f"feature maps differ: {fa.shape} vs {fb.shape}")
    na = np.sqrt(np.sum(fa * fa, axis=2))
    nb = np.sqrt(np.sum(fb * fb, axis=2))
    dot = np.sum(fa * fb, axis=2)
    za = na == 0.0
    zb = nb == 0.0
    safe = np.where(za | zb, 1.0, na * nb)
    cos = np.clip(dot / safe, -1.0, 1.0)
    cos = np.where(za & zb, 1.0, cos)
    cos = np.where(za ^ zb, 0.0, cos)
    return cos


# --- RAS1 raster files -------------------------------------------------------


def write_ras1(path, array) -> None:
    """Write an (H, W) or (H, W, C) raster as little-endian float32 RAS1."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"RAS1 holds 2D or 3D rasters, got {a.shape}")
    h, w, c = a.shape
    payload = np.ascontiguousarray(a, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(RAS1_MAGIC)
        fh.write(struct.pack("<4I", w, h, c, RAS1_DTYPE_F32))
        fh.write(payload.tobytes())


def read_ras1(path, expected_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Read a RAS1 file into a float32 array of shape (H, W, C)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 20 or data[:4] != RAS1_MAGIC:
        raise RasterFormatError(f"{path}: bad magic, not a RAS1 file")
    w, h, c, tag = struct.unpack("<4I", data[4:20])
    if tag != RAS1_DTYPE_F32:
        raise RasterFormatError(f"{path}: unsupported dtype tag {tag}")
    n = w * h * c
    if len(data) != 20 + 4 * n:
        raise RasterFormatError(f"{path}: payload has {len(data) - 20} bytes, expected {4 * n}")
    if expected_hw is not None and (h, w) != tuple(expected_hw):
        raise DimensionMismatchError(path, expected_hw, (h, w))
    arr = np.frombuffer(data, dtype="<f4", count=n, offset=20).reshape(h, w, c).copy()
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{path}: payload contains non-finite values")
    return arr


# --- PNG helpers ------------------------------------------------------------


def image_to_u8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image_png(path, img) -> None:
    PILImage.fromarray(image_to_u8(as_image(img))).save(path, optimize=False)


def load_image_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_mask_png(path, mask) -> None:
    """8-bit grayscale PNG: 255 = keep, 0 = transient (binarized at 0.5)."""
    m = np.where(np.asarray(mask) >= 0.5, 255, 0).astype(np.uint8)
    PILImage.fromarray(m).save(path, optimize=False)


def load_mask_png(path) -> np.ndarray:
    """Load a binary 0/255 PNG as a {0, 1} float array; gray levels are rejected."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        raise NonBinaryMaskError(
            f"{path}: mask is not binary (found value {int(arr[bad][0])})"
        )
    return (arr == 255).astype(np.float64)
