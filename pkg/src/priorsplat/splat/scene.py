"""Splat primitives, the optimizable scene container and the view camera."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ParameterError, RasterFormatError

# Declaration order of per-Gaussian parameter groups and their widths.
PARAM_GROUPS = (
    ("means", 2),
    ("log_scales", 2),
    ("theta", 1),
    ("opacity_logit", 1),
    ("color_logit", 3),
    ("depth", 1),
)
GROUP_NAMES = tuple(name for name, _ in PARAM_GROUPS)
FLOATS_PER_GAUSSIAN = sum(w for _, w in PARAM_GROUPS)

GS2D_MAGIC = b"GS2D"
ADAM_MAGIC = b"ADM1"
MIN_DEPTH = 1e-3


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian2D:
    """One splat; ``cov_params`` = (log_sx, log_sy, theta)."""

    mu: tuple[float, float]
    cov_params: tuple[float, float, float]
    opacity_logit: float
    color: tuple[float, float, float]  # pre-sigmoid logits
    depth: float

    @classmethod
    def from_natural(cls, mu, scales, theta, opacity, rgb, depth) -> "Gaussian2D":
        """Build from world scales, opacity in (0, 1) and colour in (0, 1)."""
        rgb = np.clip(np.asarray(rgb, dtype=np.float64), 1e-4, 1 - 1e-4)
        opacity = float(np.clip(opacity, 1e-6, 1 - 1e-6))
        return cls(
            mu=(float(mu[0]), float(mu[1])),
            cov_params=(math.log(scales[0]), math.log(scales[1]), float(theta)),
            opacity_logit=float(logit(opacity)),
            color=tuple(float(v) for v in logit(rgb)),
            depth=float(depth),
        )

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def rgb(self) -> np.ndarray:
        return sigmoid(self.color)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.cov_params[:2])

    def covariance(self) -> np.ndarray:
        sx, sy = self.scales
        c, s = math.cos(self.cov_params[2]), math.sin(self.cov_params[2])
        rot = np.array([[c, -s], [s, c]])
        return rot @ np.diag([sx * sx, sy * sy]) @ rot.T


@dataclass
class ViewCamera:
    """World-to-screen similarity transform.

    A world point x maps to screen ``R(-rotation) (x - origin) / pixel_scale``;
    pixel (r, c) samples screen point (c + 0.5, r + 0.5).
    """

    origin: tuple[float, float]
    rotation: float
    pixel_scale: float
    width: int
    height: int

    def __post_init__(self):
        if not self.pixel_scale > 0:
            raise ValueError(f"pixel scale must be > 0, got {self.pixel_scale}")
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        self.rotation = float(self.rotation)
        self.pixel_scale = float(self.pixel_scale)
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def world_to_screen_matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, s], [-s, c]]) / self.pixel_scale

    def world_to_screen(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.asarray(self.origin)) @ self.world_to_screen_matrix().T

    def screen_to_world(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return pts * self.pixel_scale @ rot.T + np.asarray(self.origin)

    def to_dict(self) -> dict:
        return {
            "origin_x": self.origin[0],
            "origin_y": self.origin[1],
            "rotation": self.rotation,
            "pixel_scale": self.pixel_scale,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d) -> "ViewCamera":
        return cls(
            origin=(float(d["origin_x"]), float(d["origin_y"])),
            rotation=float(d["rotation"]),
            pixel_scale=float(d["pixel_scale"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def _empty_params(n: int = 0) -> dict[str, np.ndarray]:
    out = {}
    for name, width in PARAM_GROUPS:
        shape = (n,) if width == 1 else (n, width)
        out[name] = np.zeros(shape)
    return out


class GaussianScene:
    """Ordered primitives plus Adam moments and densification statistics.

    Parameters live in ``params``, a dict of arrays keyed by group name whose
    first axis is the primitive index. Every structural or parameter change
    bumps ``version`` so stale render caches can be detected.
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None, ids=None):
        self.params = _empty_params() if params is None else {
            k: np.array(params[k], dtype=np.float64) for k in GROUP_NAMES
        }
        n = self.params["means"].shape[0]
        for name, width in PARAM_GROUPS:
            expect = (n,) if width == 1 else (n, width)
            if self.params[name].shape != expect:
                raise ValueError(f"group {name} has shape {self.params[name].shape}, expected {expect}")
        self.ids = np.arange(n, dtype=np.int64) if ids is None else np.array(ids, dtype=np.int64)
        self.next_id = int(self.ids.max()) + 1 if n else 0
        self.exp_avg = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.exp_avg_sq = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n, dtype=np.int64)
        self.version = 0

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianScene":
        gaussians = list(gaussians)
        p = _empty_params(len(gaussians))
        for i, g in enumerate(gaussians):
            p["means"][i] = g.mu
            p["log_scales"][i] = g.cov_params[:2]
            p["theta"][i] = g.cov_params[2]
            p["opacity_logit"][i] = g.opacity_logit
            p["color_logit"][i] = g.color
            p["depth"][i] = g.depth
        return cls(p)

    def __len__(self) -> int:
        return self.params["means"].shape[0]

    def __getitem__(self, i: int) -> Gaussian2D:
        p = self.params
        return Gaussian2D(
            mu=tuple(p["means"][i]),
            cov_params=(p["log_scales"][i, 0], p["log_scales"][i, 1], p["theta"][i]),
            opacity_logit=float(p["opacity_logit"][i]),
            color=tuple(p["color_logit"][i]),
            depth=float(p["depth"][i]),
        )

    def copy(self) -> "GaussianScene":
        other = GaussianScene(self.params, self.ids)
        other.next_id = self.next_id
        other.exp_avg = {k: v.copy() for k, v in self.exp_avg.items()}
        other.exp_avg_sq = {k: v.copy() for k, v in self.exp_avg_sq.items()}
        other.step = self.step
        other.grad_accum = self.grad_accum.copy()
        other.grad_count = self.grad_count.copy()
        return other

    def touch(self) -> None:
        self.version += 1

    # -- derived quantities ----------------------------------------------------

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.params["opacity_logit"])

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.params["color_logit"])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.params["log_scales"])

    def validate(self) -> None:
        """Raise ParameterError naming the first Gaussian with a non-finite value."""
        for name, width in PARAM_GROUPS:
            arr = self.params[name].reshape(len(self), width)
            bad = ~np.all(np.isfinite(arr), axis=1)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise ParameterError(
                    f"Gaussian {i} (id {int(self.ids[i])}) has non-finite {name}: {arr[i].tolist()}"
                )

    # -- structural edits ------------------------------------------------------

    def select(self, keep: np.ndarray) -> None:
        """Keep only rows where ``keep`` is true (or listed indices), in order."""
        for store in (self.params, self.exp_avg, self.exp_avg_sq):
            for k in GROUP_NAMES:
                store[k] = store[k][keep]
        self.ids = self.ids[keep]
        self.grad_accum = self.grad_accum[keep]
        self.grad_count = self.grad_count[keep]
        self.touch()

    def append(self, new: dict[str, np.ndarray]) -> None:
        """Append primitives with zeroed optimizer state and fresh ids."""
        m = new["means"].shape[0]
        for k in GROUP_NAMES:
            self.params[k] = np.concatenate([self.params[k], new[k]], axis=0)
            zeros = np.zeros_like(new[k])
            self.exp_avg[k] = np.concatenate([self.exp_avg[k], zeros], axis=0)
            self.exp_avg_sq[k] = np.concatenate([self.exp_avg_sq[k], zeros], axis=0)
        self.ids = np.concatenate([self.ids, np.arange(self.next_id, self.next_id + m)])
        self.next_id += m
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(m)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(m, dtype=np.int64)])
        self.touch()

    def reset_stats(self) -> None:
        self.grad_accum[:] = 0.0
        self.grad_count[:] = 0


# -- GS2D checkpoints -----------------------------------------------------------


def _pack_rows(store: dict[str, np.ndarray], n: int) -> np.ndarray:
    cols = [store[name].reshape(n, -1) for name in GROUP_NAMES]
    return np.concatenate(cols, axis=1) if n else np.zeros((0, FLOATS_PER_GAUSSIAN))


def _unpack_rows(rows: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    col = 0
    for name, width in PARAM_GROUPS:
        block = rows[:, col:col + width].astype(np.float64)
        out[name] = block[:, 0] if width == 1 else block
        col += width
    return out


def save_checkpoint(scene: GaussianScene, path) -> None:
    """Write ``GS2D`` (count + packed f32 fields) followed by the ``ADM1`` Adam block."""
    n = len(scene)
    with open(path, "wb") as fh:
        fh.write(GS2D_MAGIC)
        fh.write(struct.pack("<I", n))
        fh.write(np.ascontiguousarray(_pack_rows(scene.params, n), dtype="<f4").tobytes())
        fh.write(ADAM_MAGIC)
        fh.write(struct.pack("<II", scene.step, n))
        fh.write(np.ascontiguousarray(_pack_rows(scene.exp_avg, n), dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(_pack_rows(scene.exp_avg_sq, n), dtype="<f4").tobytes())


def load_checkpoint(path) -> GaussianScene:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != GS2D_MAGIC:
        raise RasterFormatError(f"{path}: bad magic, not a GS2D checkpoint")
    (n,) = struct.unpack("<I", data[4:8])
    size = n * FLOATS_PER_GAUSSIAN * 4
    off = 8
    rows = np.frombuffer(data, dtype="<f4", count=n * FLOATS_PER_GAUSSIAN, offset=off)
    scene = GaussianScene(_unpack_rows(rows.reshape(n, FLOATS_PER_GAUSSIAN)))
    off += size
    if len(data) > off:
        if data[off:off + 4] != ADAM_MAGIC:
            raise RasterFormatError(f"{path}: bad optimizer-state magic")
        step, m = struct.unpack("<II", data[off + 4:off + 12])
        if m != n:
            raise RasterFormatError(f"{path}: optimizer state has {m} rows for {n} Gaussians")
        off += 12
        cnt = n * FLOATS_PER_GAUSSIAN
        m1 = np.frombuffer(data, dtype="<f4", count=cnt, offset=off).reshape(n, -1)
        m2 = np.frombuffer(data, dtype="<f4", count=cnt, offset=off + 4 * cnt).reshape(n, -1)
        scene.exp_avg = _unpack_rows(m1)
        scene.exp_avg_sq = _unpack_rows(m2)
        scene.step = int(step)
    for k in GROUP_NAMES:
        scene.params[k] = scene.params[k].copy()
    return scene
