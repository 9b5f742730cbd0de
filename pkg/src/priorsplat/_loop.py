"""Pieces shared by the Stage I and Stage II optimization loops."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .errors import DivergenceError
from .scenegen import Dataset, init_scene
from .splat import GROUP_NAMES, GaussianScene, densify_and_prune

LR_KEYS = {name: f"lr.{name}" for name in GROUP_NAMES}


def learning_rates(config) -> dict[str, float]:
    return {name: float(config[key]) for name, key in LR_KEYS.items()}


def initial_scene(dataset: Dataset, config) -> GaussianScene:
    spec = dataset.spec
    return init_scene(spec.world_extent, config["init.count"], config["seed"], spec.pixel_scale,
                      init_scale_px=config["init.scale_px"], init_opacity=config["init.opacity"])


class ViewSampler:
    """Seeded epoch-wise permutation of view indices."""

    def __init__(self, n: int, seed: int, stream: int):
        self.n = n
        self.rng = np.random.default_rng([seed, stream])
        self._queue: list[int] = []

    def next(self) -> int:
        if not self._queue:
            self._queue = [int(i) for i in self.rng.permutation(self.n)[::-1]]
        return self._queue.pop()


def check_finite(value: float, iteration: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(iteration, value)


def maybe_densify(scene: GaussianScene, config, it: int, start: int, end: int) -> dict | None:
    """Densify after iteration ``it`` (0-based) when inside [start, end]."""
    step = it + 1
    interval = config["densify.interval"]
    if step < start or step > end or step % interval != 0:
        return None
    return densify_and_prune(
        scene,
        config["densify.grad_threshold"],
        config["densify.size_threshold"],
        config["densify.opacity_floor"],
        config["densify.max_count"],
    )


def fmt(v) -> str:
    """Stable text for CSV cells."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6g}"
    return str(v)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels so in-memory renders equal their PNG copies."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
