"""Stage II: prior-guided reconstruction with an online per-pixel mask predictor.

A small MLP maps cached ground-truth features and the depth residual of the
current render to a keep probability. Early on it is pulled toward the
pseudo-masks with a decaying weight; later, residual bounds and feature
consistency between ground truth and render take over. The reconstruction
loss uses the soft mask, but mask gradients never reach the Gaussians: the
MLP is trained only from its own objective with its own Adam state.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _loop
from .errors import PrerequisiteError, RasterFormatError, ShapeError
from .losses import masked_loss
from .providers import Providers, builtin_features, resolve_providers
from .raster import (
    DepthMap,
    cosine_similarity_map,
    load_image_png,
    read_ras1,
    save_image_png,
    save_mask_png,
    write_ras1,
)
from .scenegen import Dataset
from .splat import (
    GaussianScene,
    accumulate_grad_stats,
    adam_step,
    backward,
    load_checkpoint,
    render,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MLP_MAGIC = b"MLP1"
CONSISTENCY_ANCHOR = 2.0  # standardized units, default of stage2.cos_anchor
STATS_HEADER = ["iter", "view", "loss", "l1", "dssim", "depth_loss", "gaussians",
                "w_prior", "w_robust", "l_prior", "l_res", "l_cos", "l_reg", "l_mlp",
                "mask_mean", "mask_iou", "feat_refreshed"]


# -- mask predictor ------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MaskMLP:
    """Fully connected [in -> hidden -> hidden -> 1], ReLU hidden, sigmoid out.

    Inputs are standardized with a fixed per-dimension ``input_shift`` and
    ``input_scale`` before the first layer. Raw feature dimensions differ in
    spread by an order of magnitude; without this the sigmoid saturates at
    keep before the features separate the classes.
    """

    weights: list[np.ndarray]  # (fan_in, fan_out)
    biases: list[np.ndarray]
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    exp_avg: list[np.ndarray] = field(default_factory=list, repr=False)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list, repr=False)
    step: int = 0

    def __post_init__(self):
        d = self.weights[0].shape[0]
        if self.input_shift is None:
            self.input_shift = np.zeros(d)
        if self.input_scale is None:
            self.input_scale = np.ones(d)
        self.input_shift = np.asarray(self.input_shift, dtype=np.float64)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64)
        if self.input_shift.shape != (d,) or self.input_scale.shape != (d,):
            raise ShapeError(f"input standardization must have {d} entries")
        if not np.all(self.input_scale > 0):
            raise ValueError("input_scale must be > 0")
        if not self.exp_avg:
            self.exp_avg = [np.zeros_like(p) for p in self.parameters()]
            self.exp_avg_sq = [np.zeros_like(p) for p in self.parameters()]

    @classmethod
    def create(cls, in_dim: int, hidden: int = 32, seed: int = 0, out_bias: float = 2.0,
               input_shift=None, input_scale=None, out_gain: float = 0.1) -> "MaskMLP":
        # the output layer starts near zero so every pixel begins at sigmoid(out_bias)
        rng = np.random.default_rng([seed, 5])
        dims = [in_dim, hidden, hidden, 1]
        ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(a)
            ws.append(rng.uniform(-bound, bound, (a, b)))
            bs.append(rng.uniform(-bound, bound, b))
        ws[-1] *= out_gain
        bs[-1][:] = out_bias
        return cls(ws, bs, input_shift, input_scale)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x: np.ndarray):
        """Keep probabilities (N,) and the activations needed for backward."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dims[0]:
            raise ShapeError(f"MLP expects (N, {self.dims[0]}) inputs, got {x.shape}")
        h = (x - self.input_shift) / self.input_scale
        acts = [h]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = _sigmoid(z[:, 0]) if k == last else np.maximum(z, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, g_out: np.ndarray) -> list[np.ndarray]:
        """Gradients (w0, b0, w1, b1, ...) given dL/d(output)."""
        out = acts[-1]
        g = (np.asarray(g_out, dtype=np.float64) * out * (1.0 - out))[:, None]
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = acts[k]
            grads[2 * k] = h_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k > 0:
                g = (g @ self.weights[k].T) * (acts[k] > 0.0)
        return grads

    def adam_step(self, grads: list[np.ndarray], lr: float) -> None:
        self.step += 1
        t = self.step
        bc1 = 1.0 - 0.9**t
        bc2 = 1.0 - 0.999**t
        for p, g, m, v in zip(self.parameters(), grads, self.exp_avg, self.exp_avg_sq):
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + 1e-8)


def save_mlp(mlp: MaskMLP, path) -> None:
    """'MLP1', u32 layer count, u32 dims, f32 weights and biases per layer,
    then the f32 input shift and scale."""
    dims = mlp.dims
    with open(path, "wb") as fh:
        fh.write(MLP_MAGIC)
        fh.write(struct.pack("<I", len(mlp.weights)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for w, b in zip(mlp.weights, mlp.biases):
            fh.write(w.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())
        fh.write(mlp.input_shift.astype("<f4").tobytes())
        fh.write(mlp.input_scale.astype("<f4").tobytes())


def load_mlp(path) -> MaskMLP:
    data = Path(path).read_bytes()
    if data[:4] != MLP_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        return _parse_mlp(data)
    except (struct.error, ValueError) as exc:
        raise RasterFormatError(f"{path}: truncated or corrupt MLP file ({exc})") from None


def _parse_mlp(data: bytes) -> MaskMLP:
    (nl,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{nl + 1}I", data, 8)
    off = 8 + 4 * (nl + 1)
    expect = off + 4 * (sum(a * b + b for a, b in zip(dims[:-1], dims[1:])) + 2 * dims[0])
    if len(data) != expect:
        raise ValueError(f"expected {expect} bytes, got {len(data)}")
    ws, bs = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, "<f4", a * b, off).reshape(a, b).astype(np.float64)
        off += 4 * a * b
        bias = np.frombuffer(data, "<f4", b, off).astype(np.float64)
        off += 4 * b
        ws.append(w)
        bs.append(bias)
    shift = np.frombuffer(data, "<f4", dims[0], off).astype(np.float64)
    scale = np.frombuffer(data, "<f4", dims[0], off + 4 * dims[0]).astype(np.float64)
    return MaskMLP(ws, bs, shift, scale)


def depth_residual(provider: DepthMap, rendered: DepthMap) -> np.ndarray:
    """|D_provider - D_render| / provider depth range, clamped to [0, 1].

    Zero wherever either depth is invalid.
    """
    valid = provider.valid & rendered.valid
    rng = provider.range()
    if rng <= 0:
        rng = 1.0
    d = np.abs(provider.depth - rendered.depth) / rng
    return np.where(valid, np.clip(d, 0.0, 1.0), 0.0)


def feature_standardization(feature_maps) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std over all pixels of all views.

    The trailing depth-residual input already lies in [0, 1] and is passed
    through unchanged (shift 0, scale 1). Constant dimensions get scale 1.
    """
    flat = np.concatenate([np.asarray(f, dtype=np.float64).reshape(-1, f.shape[2])
                           for f in feature_maps])
    mu = flat.mean(axis=0)
    sd = flat.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return np.append(mu, 0.0), np.append(sd, 1.0)


def mlp_inputs(features: np.ndarray, d: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if f.shape[:2] != d.shape:
        raise ShapeError(f"features {f.shape[:2]} and depth residual {d.shape} differ")
    return np.concatenate([f, d[:, :, None]], axis=2).reshape(-1, f.shape[2] + 1)


def predict_mask(mlp: MaskMLP, features, d, return_cache: bool = False):
    """Keep-probability map M_i from features and depth residual."""
    x = mlp_inputs(features, d)
    out, acts = mlp.forward(x)
    m = out.reshape(np.shape(d))
    return (m, acts) if return_cache else m


# -- MLP objective -------------------------------------------------------------


@dataclass
class ResidualBounds:
    upper_keep: np.ndarray  # U: 1 where the pixel must be kept
    lower_keep: np.ndarray  # L: 0 where the pixel may be suppressed

    def __post_init__(self):
        if np.any(self.upper_keep > self.lower_keep):
            raise ValueError("residual bounds violate U <= L")


def residual_bounds(l1, q_low: float = 30.0, q_high: float = 95.0) -> ResidualBounds:
    """U = 1 at or below the low percentile, L = 0 strictly above the high one.

    Pixels tied with the low percentile count as below it, so a constant
    raster is must-keep everywhere and never suppressible.
    """
    r = np.asarray(l1, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty residual raster")
    lo, hi = np.percentile(r, [q_low, q_high])
    u = (r <= lo).astype(np.float64)
    lower = np.where(r > hi, 0.0, 1.0)
    return ResidualBounds(u, lower)


def prior_weight(t: float, beta_prior: float) -> float:
    if beta_prior <= 0:
        raise ValueError("beta_prior must be > 0")
    return float(np.exp(-t / beta_prior))


def robust_weight(t: float, t_densify: float, beta_robustness: float) -> float:
    """exp(-max(0, T_densify - t) / beta); 1 from T_densify on."""
    if beta_robustness <= 0:
        raise ValueError("beta_robustness must be > 0")
    return float(np.exp(-max(0.0, t_densify - t) / beta_robustness))


def prior_loss(m, m_pseudo, t: float, beta_prior: float):
    """(loss, dL/dM): exp(-t/beta) mean|M_pseudo - M|."""
    m = np.asarray(m, dtype=np.float64)
    w = prior_weight(t, beta_prior)
    diff = m - np.asarray(m_pseudo, dtype=np.float64)
    return w * float(np.mean(np.abs(diff))), w * np.sign(diff) / m.size


def res_loss(m, bounds: ResidualBounds):
    """(loss, dL/dM): mean of max(U - M, 0) + max(M - L, 0)."""
    m = np.asarray(m, dtype=np.float64)
    below = bounds.upper_keep - m
    above = m - bounds.lower_keep
    loss = float(np.mean(np.maximum(below, 0.0) + np.maximum(above, 0.0)))
    grad = (-(below > 0).astype(np.float64) + (above > 0)) / m.size
    return loss, grad


def consistency_map(f, f_render) -> np.ndarray:
    """M_cos = max(2 cos(f, f') - 1, 0)."""
    return np.maximum(2.0 * cosine_similarity_map(f, f_render) - 1.0, 0.0)


def cos_loss(m, f, f_render):
    """(loss, dL/dM, M_cos) with loss = mean|M_cos - M|."""
    m = np.asarray(m, dtype=np.float64)
    mc = consistency_map(f, f_render)
    if mc.shape != m.shape:
        raise ShapeError(f"mask {m.shape} and features {mc.shape} differ")
    diff = m - mc
    return float(np.mean(np.abs(diff))), np.sign(diff) / m.size, mc


@dataclass
class MLPComponents:
    l_prior: float = 0.0
    g_prior: np.ndarray | float = 0.0
    l_res: float = 0.0
    g_res: np.ndarray | float = 0.0
    l_cos: float = 0.0
    g_cos: np.ndarray | float = 0.0


@dataclass
class Schedule:
    t: int
    t_max: int
    t_densify: float
    beta_prior: float
    beta_robustness: float
    lambda_prior: float = 1.0
    lambda_robust: float = 0.5
    lambda_reg: float = 0.01
    densify_window: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name in ("t_densify", "beta_prior", "beta_robustness", "lambda_prior",
                     "lambda_robust", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        lo, hi = self.densify_window
        if not 0 <= lo <= hi <= self.t_max:
            raise ValueError("densify window must lie within [0, t_max]")

    @property
    def w_prior(self) -> float:
        return prior_weight(self.t, self.beta_prior)

    @property
    def w_robust(self) -> float:
        return robust_weight(self.t, self.t_densify, self.beta_robustness)

    @classmethod
    def from_config(cls, config, t: int = 0) -> "Schedule":
        if config["stage2.delayed_densify"]:
            win = (config["stage2.densify_start"], config["stage2.densify_end"])
        else:
            win = (config["stage2.default_densify_start"], config["stage2.default_densify_end"])
        return cls(t, config["stage2.iterations"], config["stage2.t_densify"],
                   config["stage2.beta_prior"], config["stage2.beta_robustness"],
                   config["stage2.lambda_prior"], config["stage2.lambda_robust"],
                   config["stage2.lambda_reg"], win)


def mlp_loss(m, comp: MLPComponents, sched: Schedule):
    """(L_MLP, dL/dM) = lambda_robust L_robust + lambda_prior L_prior + L_reg.

    ``comp.l_prior`` already carries its decay weight; L_robust is the robust
    weight times (L_cos + L_res); L_reg = lambda_reg mean(1 - M).
    """
    m = np.asarray(m, dtype=np.float64)
    wr = sched.w_robust
    l_robust = wr * (comp.l_cos + comp.l_res)
    l_reg = sched.lambda_reg * float(np.mean(1.0 - m))
    total = sched.lambda_robust * l_robust + sched.lambda_prior * comp.l_prior + l_reg
    grad = (sched.lambda_robust * wr * (np.asarray(comp.g_cos) + np.asarray(comp.g_res))
            + sched.lambda_prior * np.asarray(comp.g_prior)
            - sched.lambda_reg / m.size)
    return float(total), np.broadcast_to(grad, m.shape).astype(np.float64)


# -- training loop -------------------------------------------------------------


@dataclass
class Stage2Result:
    scene: GaussianScene
    mlp: MaskMLP | None
    masks: dict[int, np.ndarray]  # soft keep masks after training
    renders: dict[int, np.ndarray]
    stats: list[list]


def _binary_iou(keep, gt_keep) -> float:
    p = keep < 0.5
    g = gt_keep < 0.5
    union = np.sum(p | g)
    return 1.0 if union == 0 else float(np.sum(p & g) / union)


def train_stage2(dataset: Dataset, config, priors: dict | None = None,
                 stage1_scene: GaussianScene | None = None,
                 providers: Providers | None = None) -> Stage2Result:
    """Second reconstruction guided by pseudo-masks (``priors``: view id -> keep)."""
    providers = providers or resolve_providers(config)
    mode = config["stage2.mask"]
    t_max = int(config["stage2.iterations"])
    lam = float(config["lambda_dssim"])
    use_prior = bool(config["stage2.use_prior"])
    use_robust = bool(config["stage2.use_robust"])
    depth_reg = bool(config["stage2.depth_reg"])
    lam_depth = float(config["stage2.lambda_depth"])
    k_feat = int(config["stage2.k_feat"])
    q_lo, q_hi = config["stage2.res_q_low"], config["stage2.res_q_high"]
    mlp_lr = float(config["stage2.mlp_lr"])

    needs_prior = mode == "pseudo" or (mode == "mlp" and use_prior)
    if needs_prior:
        if priors is None:
            raise PrerequisiteError("stage II needs pseudo-mask priors")
        missing = [v.view_id for v in dataset.views if v.view_id not in priors]
        if missing:
            raise PrerequisiteError(f"missing pseudo-mask prior for views {missing}")

    if config["stage2.init"] == "warm":
        if stage1_scene is None:
            raise PrerequisiteError("warm start needs the Stage I scene")
        scene = stage1_scene.copy()
        scene.reset_stats()
    else:
        scene = _loop.initial_scene(dataset, config)
    lr = _loop.learning_rates(config)
    sched = Schedule.from_config(config)
    win_lo, win_hi = sched.densify_window
    sampler = _loop.ViewSampler(len(dataset.views), config["seed"], 22)

    mlp = None
    if mode == "mlp":
        shift, scale = feature_standardization(
            [providers.mlp_features(v) for v in dataset.views])
        mlp = MaskMLP.create(len(shift), config["stage2.mlp_hidden"], config["seed"],
                             config["stage2.mlp_bias"], shift, scale)
        log.info("mask MLP dims %s, %d parameters", mlp.dims, mlp.n_params)
    if mode == "mlp" and use_robust:
        c_std = _consistency_standardization(dataset)
        anchor = config["stage2.cos_anchor"]
    feat_cache: dict[int, tuple[np.ndarray, int]] = {}
    stats = []

    for it in range(t_max):
        sched.t = it
        view = dataset.views[sampler.next()]
        vid = view.view_id
        r = render(scene, view.camera)
        dp = providers.depth(view) if (depth_reg or mode == "mlp") else None
        acts = None
        if mode == "mlp":
            d = depth_residual(dp, r.depth)
            m, acts = predict_mask(mlp, providers.mlp_features(view), d, return_cache=True)
        elif mode == "pseudo":
            m = priors[vid]
        else:
            m = None
        loss = masked_loss(view.gt_image, r.image, m, lam)
        total = loss.total
        g_depth = None
        l_depth = 0.0
        if depth_reg:
            valid = (dp.valid & r.depth.valid).astype(np.float64)
            w = valid if m is None else valid * m
            diff = r.depth.depth - dp.depth
            npix = diff.size
            l_depth = lam_depth * float(np.sum(w * np.abs(diff)) / npix)
            g_depth = lam_depth * w * np.sign(diff) / npix
            total += l_depth
        _loop.check_finite(total, it)
        grads = backward(r.cache, loss.grad, g_depth)
        accumulate_grad_stats(scene, grads)
        adam_step(scene, grads.params, lr)
        _loop.maybe_densify(scene, config, it, win_lo, win_hi)

        row = [it, vid, total, loss.l1, loss.dssim, l_depth, len(scene)]
        refreshed = 0
        if mode == "mlp":
            comp = MLPComponents()
            if use_prior:
                comp.l_prior, comp.g_prior = prior_loss(m, priors[vid], it, sched.beta_prior)
            if use_robust:
                comp.l_res, comp.g_res = res_loss(m, residual_bounds(loss.l1_map, q_lo, q_hi))
                cached = feat_cache.get(vid)
                if cached is None or it - cached[1] >= k_feat:
                    f_render = consistency_features(builtin_features(r.image), *c_std, anchor)
                    feat_cache[vid] = (f_render, it)
                    refreshed = 1
                f_gt = consistency_features(_gt_builtin_features(view), *c_std, anchor)
                comp.l_cos, comp.g_cos, _ = cos_loss(m, f_gt, feat_cache[vid][0])
            l_mlp, g_m = mlp_loss(m, comp, sched)
            _loop.check_finite(l_mlp, it)
            mlp.adam_step(mlp.backward(acts, g_m.reshape(-1)), mlp_lr)
            l_reg = sched.lambda_reg * float(np.mean(1.0 - m))
            row += [sched.w_prior, sched.w_robust, comp.l_prior, comp.l_res, comp.l_cos,
                    l_reg, l_mlp, float(np.mean(m)), _binary_iou(m, view.transient_mask)]
        else:
            mm = 1.0 if m is None else float(np.mean(m))
            iou = _binary_iou(np.ones(view.shape) if m is None else m, view.transient_mask)
            row += [sched.w_prior, sched.w_robust, None, None, None, None, None, mm, iou]
        row.append(refreshed)
        stats.append(row)
        if it % 500 == 0:
            log.info("stage2 it %d loss %.4f gaussians %d", it, total, len(scene))

    masks, renders = {}, {}
    for view in dataset.views:
        r = render(scene, view.camera)
        renders[view.view_id] = _loop.quantize(r.image)
        if mode == "mlp":
            d = depth_residual(providers.depth(view), r.depth)
            # float32 rounding keeps in-memory masks equal to their RAS1 copies
            soft = predict_mask(mlp, providers.mlp_features(view), d)
            masks[view.view_id] = soft.astype(np.float32).astype(np.float64)
        elif mode == "pseudo":
            masks[view.view_id] = np.asarray(priors[view.view_id], dtype=np.float64)
        else:
            masks[view.view_id] = np.ones(view.shape)
    return Stage2Result(scene, mlp, masks, renders, stats)


def _consistency_standardization(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    # built-in features are non-negative, so raw cosines stay high even across
    # different content; centring on the dataset statistics restores contrast
    shift, scale = feature_standardization([_gt_builtin_features(v) for v in dataset.views])
    return shift[:-1], scale[:-1]


def consistency_features(f, shift, scale, anchor: float = CONSISTENCY_ANCHOR) -> np.ndarray:
    """Standardized features plus a constant anchor channel for the cosine check.

    The anchor keeps cosines of near-mean (featureless) pixels close to 1, so
    only sizeable feature changes read as inconsistent.
    """
    z = (np.asarray(f, dtype=np.float64) - shift) / scale
    return np.concatenate([z, np.full(z.shape[:2] + (1,), float(anchor))], axis=2)


def _gt_builtin_features(view) -> np.ndarray:
    key = "features:builtin:gt"
    if key not in view.cache:
        view.cache[key] = builtin_features(view.gt_image)
    return view.cache[key]


def save_stage2(result: Stage2Result, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "scene.gs2d"]
    save_checkpoint(result.scene, written[0])
    if result.mlp is not None:
        save_mlp(result.mlp, out / "mlp.bin")
        written.append(out / "mlp.bin")
    for vid in sorted(result.renders):
        p = out / f"render_{vid:04d}.png"
        save_image_png(p, result.renders[vid])
        soft = result.masks[vid]
        q = out / f"mask_{vid:04d}.png"
        save_mask_png(q, (soft >= 0.5).astype(np.float64))
        s = out / f"softmask_{vid:04d}.ras1"
        write_ras1(s, soft)
        written += [p, q, s]
    _loop.write_csv(out / "stats.csv", STATS_HEADER, result.stats)
    written.append(out / "stats.csv")
    return written


def load_stage2(out_dir, view_ids) -> Stage2Result:
    """Reload a saved Stage II result (stats are not reloaded)."""
    out = Path(out_dir)
    mlp_path = out / "mlp.bin"
    masks, renders = {}, {}
    for vid in view_ids:
        renders[vid] = load_image_png(out / f"render_{vid:04d}.png")
        masks[vid] = read_ras1(out / f"softmask_{vid:04d}.ras1")[:, :, 0].astype(np.float64)
    return Stage2Result(load_checkpoint(out / "scene.gs2d"),
                        load_mlp(mlp_path) if mlp_path.exists() else None, masks, renders, [])
