"""Image metrics, transient-mask metrics, stratified analysis and ablations.

Mask metrics count the transient class as positive, so keep-polarity masks
are inverted (binarized at 0.5) before counting. Aggregate mask rows pool
confusion counts over all views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _loop
from .errors import ConfigError, NonBinaryMaskError, ShapeError
from .priorbuild import build_view_prior
from .providers import resolve_providers
from .raster import InstanceSet, as_image, is_binary, l1_residual, psnr, save_mask_png, ssim
from .scenegen import Dataset
from .stage2 import train_stage2

METRICS_HEADER = ["view", "psnr", "ssim", "gaussians"] + [
    f"{m}_{k}" for m in ("pseudo", "mlp", "refined")
    for k in ("accuracy", "precision", "recall", "iou")]
STRATIFIED_HEADER = ["view", "inside_pixels", "outside_pixels", "psnr_inside", "psnr_outside",
                     "ssim_inside", "ssim_outside"]
ABLATION_HEADER = ["row", "psnr", "ssim", "psnr_inside", "psnr_outside", "mask_accuracy",
                   "mask_precision", "mask_recall", "mask_iou", "gaussians"]


# -- mask metrics --------------------------------------------------------------


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                         self.tn + other.tn)


@dataclass(frozen=True)
class MaskMetrics:
    accuracy: float
    precision: float
    recall: float
    iou: float

    def __post_init__(self):
        for name in ("accuracy", "precision", "recall", "iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")
        if self.iou > min(self.precision, self.recall) + 1e-12:
            raise ValueError("IoU exceeds min(precision, recall)")

    def row(self) -> list[float]:
        return [self.accuracy, self.precision, self.recall, self.iou]


def _ratio(num: int, den: int, pred_pos: int, gt_pos: int) -> float:
    if den > 0:
        return num / den
    # both sides empty agree perfectly; exactly one empty side is a miss
    return 1.0 if pred_pos == 0 and gt_pos == 0 else 0.0


def confusion(pred, gt) -> Confusion:
    """Counts with transient (keep value 0) as the positive class."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"masks differ in shape: {pred.shape} vs {gt.shape}")
    if not (is_binary(pred) and is_binary(gt)):
        raise NonBinaryMaskError("mask metrics expect binary {0,1} keep masks")
    p = pred == 0
    g = gt == 0
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    return Confusion(tp, fp, fn, int(p.size) - tp - fp - fn)


def metrics_from_confusion(c: Confusion) -> MaskMetrics:
    total = c.tp + c.fp + c.fn + c.tn
    pp = c.tp + c.fp
    gp = c.tp + c.fn
    return MaskMetrics(
        (c.tp + c.tn) / total if total else 1.0,
        _ratio(c.tp, pp, pp, gp),
        _ratio(c.tp, gp, pp, gp),
        _ratio(c.tp, c.tp + c.fp + c.fn, pp, gp),
    )


def mask_metrics(pred, gt) -> MaskMetrics:
    return metrics_from_confusion(confusion(pred, gt))


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    """Keep-polarity soft mask to {0, 1}: keep where M >= threshold."""
    return (np.asarray(mask, dtype=np.float64) >= threshold).astype(np.float64)


# -- stratified metrics --------------------------------------------------------


@dataclass(frozen=True)
class RegionScores:
    pixels: int
    psnr: float | None  # None when the region is empty
    ssim: float | None

    @property
    def present(self) -> bool:
        return self.pixels > 0


@dataclass(frozen=True)
class StratifiedEntry:
    inside: RegionScores  # ground-truth transient pixels
    outside: RegionScores


def _region(render, clean, ssim_map, sel) -> RegionScores:
    n = int(sel.sum())
    if n == 0:
        return RegionScores(0, None, None)
    mse = float(np.mean(((render - clean) ** 2)[sel]))
    p = math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
    return RegionScores(n, p, float(np.mean(ssim_map[sel])))


def stratified_metrics(render, clean_static, transient_keep) -> StratifiedEntry:
    """PSNR and masked-SSIM averages inside and outside the gt transient region."""
    render = as_image(render)
    clean = as_image(clean_static)
    keep = np.asarray(transient_keep)
    if keep.shape != render.shape[:2] or clean.shape != render.shape:
        raise ShapeError("render, clean image and transient mask must align")
    if not is_binary(keep):
        raise NonBinaryMaskError("transient mask must be binary")
    s_map = ssim(clean, render).map
    inside = keep == 0
    return StratifiedEntry(_region(render, clean, s_map, inside),
                           _region(render, clean, s_map, ~inside))


def _mean_present(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


# -- refined masks -------------------------------------------------------------


def refine_predicted_mask(m, instances: InstanceSet, l1, tau_sim: float = 0.5,
                          tau_l1: float = 0.05, dilation: int = 2) -> np.ndarray:
    """Snap a soft keep mask to instances via the pseudo-mask filter.

    The mask takes the place of the normalized similarity map: an instance is
    marked transient when its mean keep value is <= ``tau_sim`` and its mean
    residual is >= ``tau_l1``.
    """
    m = np.asarray(m, dtype=np.float64)
    if len(instances) == 0:
        return np.ones(m.shape)
    return build_view_prior(m, l1, instances, tau_sim, tau_l1, dilation).keep


# -- dataset-level evaluation --------------------------------------------------


@dataclass
class EvalReport:
    metrics: list[list]
    stratified: list[list]
    summary: dict[str, float]
    refined: dict[int, np.ndarray]


def evaluate_run(dataset: Dataset, config, stage2, priors: dict | None = None,
                 providers=None) -> EvalReport:
    """Per-view and pooled metrics of a Stage II result."""
    providers = providers or resolve_providers(config)
    thr = float(config["eval.binarize"])
    tau = float(config["eval.refine_tau"])
    tau_l1 = float(config["priors.tau_l1"])
    radius = int(config["eval.refine_dilation"])
    rows, strat, refined = [], [], {}
    pooled = {k: Confusion(0, 0, 0, 0) for k in ("pseudo", "mlp", "refined")}
    psnrs, ssims, ins, outs, sins, souts = [], [], [], [], [], []
    for view in dataset.views:
        vid = view.view_id
        img = stage2.renders[vid]
        gt_keep = view.transient_mask
        p = psnr(view.static_image, img)
        s = ssim(view.static_image, img).value
        psnrs.append(p)
        ssims.append(s)
        soft = stage2.masks[vid]
        l1 = l1_residual(view.gt_image, img)
        ref = refine_predicted_mask(soft, providers.instances(view, l1), l1, tau, tau_l1,
                                    radius)
        refined[vid] = ref
        cells = [vid, p, s, len(stage2.scene)]
        masks = {"pseudo": priors[vid] if priors is not None else None,
                 "mlp": binarize(soft, thr), "refined": ref}
        for key in ("pseudo", "mlp", "refined"):
            if masks[key] is None:
                cells += [None] * 4
                continue
            c = confusion(masks[key], gt_keep)
            pooled[key] = pooled[key] + c
            cells += metrics_from_confusion(c).row()
        rows.append(cells)
        e = stratified_metrics(img, view.static_image, gt_keep)
        strat.append([vid, e.inside.pixels, e.outside.pixels, e.inside.psnr, e.outside.psnr,
                      e.inside.ssim, e.outside.ssim])
        ins.append(e.inside.psnr)
        outs.append(e.outside.psnr)
        sins.append(e.inside.ssim)
        souts.append(e.outside.ssim)
    summary = {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)),
               "psnr_inside": _mean_present(ins), "psnr_outside": _mean_present(outs),
               "ssim_inside": _mean_present(sins), "ssim_outside": _mean_present(souts)}
    allrow = ["all", summary["psnr"], summary["ssim"], len(stage2.scene)]
    for key in ("pseudo", "mlp", "refined"):
        if key == "pseudo" and priors is None:
            allrow += [None] * 4
            continue
        mm = metrics_from_confusion(pooled[key])
        allrow += mm.row()
        for name, v in zip(("accuracy", "precision", "recall", "iou"), mm.row()):
            summary[f"{key}_{name}"] = v
    rows.append(allrow)
    strat.append(["all", sum(r[1] for r in strat), sum(r[2] for r in strat),
                  summary["psnr_inside"], summary["psnr_outside"], summary["ssim_inside"],
                  summary["ssim_outside"]])
    return EvalReport(rows, strat, summary, refined)


def save_report(report: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _loop.write_csv(out / "metrics.csv", METRICS_HEADER, report.metrics)
    _loop.write_csv(out / "stratified.csv", STRATIFIED_HEADER, report.stratified)
    written = [out / "metrics.csv", out / "stratified.csv"]
    for vid in sorted(report.refined):
        p = out / f"refined_{vid:04d}.png"
        save_mask_png(p, report.refined[vid])
        written.append(p)
    return written


# -- ablation grid -------------------------------------------------------------

TOGGLES = ("pm", "dd", "mlp", "no_prior", "no_robust", "depth")
ABLATION_ROWS = {
    "base": frozenset(),
    "base+PM": frozenset({"pm"}),
    "DD": frozenset({"dd"}),
    "DD+PM": frozenset({"dd", "pm"}),
    "DD+MLP w/o PM": frozenset({"dd", "mlp", "no_prior"}),
    "DD+MLP w/o robust": frozenset({"dd", "mlp", "no_robust"}),
    "DD+MLP": frozenset({"dd", "mlp"}),
    "DD+MLP+depth": frozenset({"dd", "mlp", "depth"}),
}


def toggle_overrides(toggles) -> dict:
    """Stage II config overrides for a set of named toggles."""
    toggles = set(toggles)
    unknown = toggles - set(TOGGLES)
    if unknown:
        raise ConfigError(f"unknown ablation toggles {sorted(unknown)}; known: {TOGGLES}")
    if "pm" in toggles and "mlp" in toggles:
        raise ConfigError("toggles 'pm' and 'mlp' are exclusive")
    if (toggles & {"no_prior", "no_robust"}) and "mlp" not in toggles:
        raise ConfigError("'no_prior' and 'no_robust' need the 'mlp' toggle")
    mask = "mlp" if "mlp" in toggles else ("pseudo" if "pm" in toggles else "none")
    return {
        "stage2.mask": mask,
        "stage2.delayed_densify": "dd" in toggles,
        "stage2.use_prior": "no_prior" not in toggles,
        "stage2.use_robust": "no_robust" not in toggles,
        "stage2.depth_reg": "depth" in toggles,
    }


def ablation_grid(dataset: Dataset, config, priors: dict, rows=None,
                  reuse: dict | None = None, providers=None) -> list[list]:
    """Run Stage II for each ablation row with the shared seed.

    ``rows`` maps row names to toggle sets, or lists names of ``ABLATION_ROWS``.
    ``reuse`` maps row names to already computed Stage II results whose
    configuration matches that row.
    """
    if rows is None:
        rows = dict(ABLATION_ROWS)
    elif not isinstance(rows, dict):
        missing = [r for r in rows if r not in ABLATION_ROWS]
        if missing:
            raise ConfigError(f"unknown ablation rows {missing}")
        rows = {r: ABLATION_ROWS[r] for r in rows}
    reuse = reuse or {}
    table = []
    for name, toggles in rows.items():
        cfg = config.with_overrides(**{k.replace(".", "__"): v
                                       for k, v in toggle_overrides(toggles).items()})
        res = reuse.get(name)
        if res is None:
            res = train_stage2(dataset, cfg, priors=priors, providers=providers)
        s = evaluate_run(dataset, cfg, res, priors, providers).summary
        table.append([name, s["psnr"], s["ssim"], s["psnr_inside"], s["psnr_outside"],
                      s["mlp_accuracy"], s["mlp_precision"], s["mlp_recall"], s["mlp_iou"],
                      len(res.scene)])
    return table


def save_ablation(table: list[list], out_dir) -> Path:
    path = Path(out_dir) / "ablation.csv"
    _loop.write_csv(path, ABLATION_HEADER, table)
    return path
