"""Flat key=value run configuration with desk and paper-scale profiles.

Every tunable constant of the pipeline has one dotted key. Unknown keys are
rejected. The ``desk`` profile is the default; ``paper`` swaps in the
full-scale iteration counts and schedule constants. Dataset keys mirror the
fields of :class:`priorsplat.scenegen.SceneSpec` under ``dataset.``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .scenegen import SceneSpec

# key -> (default, note). Notes say where a value comes from: "method" for
# values the method fixes explicitly, "decision" for choices made here.
_DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (0, "global seed for initialization and view order"),
    "out": ("runs/desk", "output directory"),
    # scene initialization and optimizer
    "init.count": (2000, "decision: random initial Gaussians"),
    "init.scale_px": (4.0, "decision: initial scale in pixels"),
    "init.opacity": (0.1, "3DGS initial opacity"),
    "lr.means": (0.0064, "decision: world units per step"),
    "lr.log_scales": (0.005, "3DGS default"),
    "lr.theta": (0.005, "decision"),
    "lr.opacity_logit": (0.05, "3DGS default"),
    "lr.color_logit": (0.01, "decision"),
    "lr.depth": (0.002, "decision"),
    "densify.interval": (100, "3DGS default"),
    "densify.grad_threshold": (5e-5, "decision: screen units are pixels"),
    "densify.size_threshold": (0.3, "decision: world units"),
    "densify.opacity_floor": (0.005, "3DGS default"),
    "densify.max_count": (8000, "decision: memory cap"),
    # stage I
    "stage1.iterations": (1500, "desk scale; method uses 10000"),
    "stage1.densify_start": (100, "desk scale of 3DGS default start"),
    "stage1.densify_end": (750, "desk scale of 3DGS default end"),
    "stage1.k_screen": (25, "decision: screening cadence"),
    "stage1.lambda_local": (1.5, "method"),
    "lambda_dssim": (0.2, "3DGS convention"),
    # providers
    "features.provider": ("builtin", "builtin | ingest:<dir>"),
    "mlp_features.provider": ("builtin", "builtin | ingest:<dir> (Stage II slot)"),
    "instances.provider": ("builtin", "builtin | ingest:<dir>"),
    "instances.mode": ("gt-objects", "gt-objects | residual-cc"),
    "depth.provider": ("builtin", "builtin | ingest:<dir>"),
    "depth.noise_rel": (0.02, "decision: noise std relative to depth range"),
    # priors
    "priors.tau_sim": (0.75, "method"),
    "priors.tau_l1": (0.05, "method"),
    "priors.dilation": (2, "decision: pixels"),
    # stage II
    "stage2.iterations": (4000, "desk scale; method uses 30000"),
    "stage2.init": ("fresh", "fresh | warm"),
    "stage2.mask": ("mlp", "none | pseudo | mlp"),
    "stage2.delayed_densify": (True, "densify only inside the delayed window"),
    "stage2.densify_start": (1333, "desk scale of 10000/30000"),
    "stage2.densify_end": (2667, "desk scale of 20000/30000"),
    "stage2.default_densify_start": (100, "window used when delayed_densify is off"),
    "stage2.default_densify_end": (2000, "desk scale of 3DGS default end"),
    "stage2.t_densify": (1333, "desk scale of method value 10000"),
    "stage2.beta_prior": (1333, "desk scale of method value 10000"),
    "stage2.beta_robustness": (1333, "desk scale of method value 10000"),
    "stage2.lambda_prior": (1.0, "method"),
    "stage2.lambda_robust": (0.5, "method"),
    "stage2.lambda_reg": (0.01, "decision"),
    "stage2.lambda_depth": (0.05, "decision"),
    "stage2.use_prior": (True, "ablation toggle"),
    "stage2.use_robust": (True, "ablation toggle"),
    "stage2.depth_reg": (True, "ablation toggle"),
    "stage2.mlp_lr": (1e-3, "method"),
    "stage2.mlp_hidden": (32, "decision"),
    "stage2.mlp_bias": (2.0, "decision: initial masks near keep"),
    "stage2.cos_anchor": (2.0, "decision: constant channel of the consistency features"),
    "stage2.k_feat": (25, "decision: rendered-feature refresh cadence"),
    "stage2.res_q_low": (30.0, "decision: percentile for must-keep bound"),
    "stage2.res_q_high": (95.0, "decision: percentile for may-keep bound"),
    # evaluation
    "eval.binarize": (0.5, "threshold for predicted keep masks"),
    "eval.refine_tau": (0.5, "similarity-analog threshold for the refined mask"),
    "eval.refine_dilation": (2, "dilation radius for the refined mask"),
    "eval.ablation": (False, "also run the ablation grid and write ablation.csv"),
}

for _f in fields(SceneSpec):
    _DEFAULTS[f"dataset.{_f.name}"] = (_f.default, "synthetic dataset")

PROFILES: dict[str, dict[str, object]] = {
    "desk": {},
    "paper": {
        "stage1.iterations": 10000,
        "stage1.densify_start": 500,
        "stage1.densify_end": 10000,
        "stage2.iterations": 30000,
        "stage2.densify_start": 10000,
        "stage2.densify_end": 20000,
        "stage2.default_densify_start": 500,
        "stage2.default_densify_end": 15000,
        "stage2.t_densify": 10000,
        "stage2.beta_prior": 10000,
        "stage2.beta_robustness": 10000,
        "out": "runs/paper",
    },
}

# phases and the key prefixes their outputs depend on, cumulative downstream
PHASE_KEYS = {
    "generate": ("seed", "dataset."),
    "stage1": ("init.", "lr.", "densify.", "stage1.", "lambda_dssim", "instances."),
    "priors": ("priors.", "features."),
    "stage2": ("stage2.", "depth.", "mlp_features."),
    "eval": ("eval.",),
}
PHASES = list(PHASE_KEYS)


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            kind = type(default[0])
            return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    profile: str = "desk"

    @classmethod
    def from_profile(cls, profile: str = "desk", overrides: dict | None = None) -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        vals = {k: v for k, (v, _) in _DEFAULTS.items()}
        vals.update(PROFILES[profile])
        cfg = cls(vals, profile)
        for k, v in (overrides or {}).items():
            cfg.set(k, v)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, profile: str = "desk", overrides: dict | None = None) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        raw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
        raw.update(overrides or {})
        return cls.from_profile(profile, raw)

    def set(self, key: str, value) -> None:
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = _DEFAULTS[key][0]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse_value(key, value, default)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif isinstance(default, tuple):
            value = tuple(value)
        self.values[key] = value

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def with_overrides(self, **kw) -> "RunConfig":
        """Copy with overrides; keyword names use ``__`` for dots."""
        cfg = RunConfig(dict(self.values), self.profile)
        for k, v in kw.items():
            cfg.set(k.replace("__", "."), v)
        cfg.validate()
        return cfg

    def scene_spec(self) -> SceneSpec:
        kw = {f.name: self.values[f"dataset.{f.name}"] for f in fields(SceneSpec)}
        spec = SceneSpec(**kw)
        spec.validate()
        return spec

    def validate(self) -> None:
        v = self.values
        for key in ("stage1.iterations", "stage2.iterations"):
            if v[key] <= 0:
                raise ConfigError(f"{key} must be > 0")
        for key in ("stage2.beta_prior", "stage2.beta_robustness"):
            if v[key] <= 0:
                raise ConfigError(f"{key} must be > 0")
        if v["stage1.lambda_local"] < 0:
            raise ConfigError("stage1.lambda_local must be >= 0")
        for key in ("priors.tau_sim", "priors.tau_l1"):
            if not 0.0 <= v[key] <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")
        if v["stage2.init"] not in ("fresh", "warm"):
            raise ConfigError("stage2.init must be fresh or warm")
        if v["stage2.mask"] not in ("none", "pseudo", "mlp"):
            raise ConfigError("stage2.mask must be none, pseudo or mlp")
        if v["instances.mode"] not in ("gt-objects", "residual-cc"):
            raise ConfigError("instances.mode must be gt-objects or residual-cc")
        for key in ("features.provider", "mlp_features.provider", "instances.provider",
                    "depth.provider"):
            p = v[key]
            if p != "builtin" and not p.startswith("ingest:"):
                raise ConfigError(f"{key} must be builtin or ingest:<path>, got {p!r}")
        s2 = v["stage2.iterations"]
        if not 0 <= v["stage2.densify_start"] <= v["stage2.densify_end"] <= s2:
            raise ConfigError("stage2 densify window must lie within [0, stage2.iterations]")
        self.scene_spec()

    def subset(self, phase: str) -> dict:
        """Keys the given phase and all its upstream phases depend on."""
        prefixes = []
        for name in PHASES:
            prefixes.extend(PHASE_KEYS[name])
            if name == phase:
                break
        else:
            raise ConfigError(f"unknown phase {phase!r}")
        return {k: self.values[k] for k in sorted(self.values)
                if any(k == p or k.startswith(p) for p in prefixes)}

    def phase_hash(self, phase: str) -> str:
        return _hash_dict(self.subset(phase))

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _hash_dict(d: dict) -> str:
    text = "".join(f"{k}={_format(d[k])}\n" for k in sorted(d))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def describe_keys() -> list[tuple[str, object, str]]:
    """(key, default, note) rows for documentation."""
    return [(k, v, note) for k, (v, note) in sorted(_DEFAULTS.items())]
