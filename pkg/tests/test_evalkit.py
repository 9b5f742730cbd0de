import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config
from priorsplat.errors import ConfigError, NonBinaryMaskError, ShapeError
from priorsplat.evalkit import (
    ABLATION_HEADER,
    ABLATION_ROWS,
    Confusion,
    MaskMetrics,
    ablation_grid,
    binarize,
    confusion,
    evaluate_run,
    mask_metrics,
    metrics_from_confusion,
    refine_predicted_mask,
    save_ablation,
    save_report,
    stratified_metrics,
    toggle_overrides,
)
from priorsplat.raster import InstanceSet, ssim
from priorsplat.scenegen import generate
from priorsplat.stage2 import train_stage2


def count_oracle(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p == 0 and g == 0:
            tp += 1
        elif p == 0:
            fp += 1
        elif g == 0:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def random_masks(g, shape=(9, 11), p=0.3):
    return ((g.uniform(size=shape) > p).astype(float),
            (g.uniform(size=shape) > p).astype(float))


def test_identical_masks_score_one(rng):
    gt = random_masks(rng)[0]
    m = mask_metrics(gt, gt)
    assert m.row() == [1.0, 1.0, 1.0, 1.0]


def test_all_keep_prediction_has_zero_recall(rng):
    gt = random_masks(rng)[0]
    assert mask_metrics(np.ones_like(gt), gt).recall == 0.0


def test_zero_denominator_conventions():
    keep = np.ones((4, 4))
    some = keep.copy()
    some[0, 0] = 0
    assert mask_metrics(keep, keep).row() == [1.0, 1.0, 1.0, 1.0]
    m = mask_metrics(some, keep)
    assert (m.precision, m.recall, m.iou) == (0.0, 0.0, 0.0)
    m = mask_metrics(keep, some)
    assert (m.precision, m.recall, m.iou) == (0.0, 0.0, 0.0)


@given(st.integers(0, 2**31 - 1))
def test_confusion_matches_count_oracle(seed):
    pred, gt = random_masks(np.random.default_rng(seed))
    c = confusion(pred, gt)
    tp, fp, fn, tn = count_oracle(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
    m = metrics_from_confusion(c)
    assert m.accuracy == pytest.approx((tp + tn) / pred.size, abs=1e-12)
    if tp + fp and tp + fn:
        prec, rec = tp / (tp + fp), tp / (tp + fn)
        assert m.precision == pytest.approx(prec, abs=1e-12)
        assert m.recall == pytest.approx(rec, abs=1e-12)
        # IoU from precision and recall: 1 / (1/p + 1/r - 1)
        assert m.iou == pytest.approx(1 / (1 / prec + 1 / rec - 1), abs=1e-12)
        assert m.iou <= min(m.precision, m.recall)


def test_confusion_sums_and_errors():
    assert Confusion(1, 2, 3, 4) + Confusion(1, 1, 1, 1) == Confusion(2, 3, 4, 5)
    with pytest.raises(NonBinaryMaskError):
        confusion(np.full((2, 2), 0.5), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        confusion(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        MaskMetrics(1.0, 0.5, 0.5, 0.8)
    np.testing.assert_array_equal(binarize(np.array([0.2, 0.5, 0.9])), [0.0, 1.0, 1.0])


def region_oracle(render, clean, keep):
    s_map = ssim(clean, render).map
    out = {}
    for name, want in (("inside", 0), ("outside", 1)):
        se, sm, n = 0.0, 0.0, 0
        h, w = keep.shape
        for i in range(h):
            for j in range(w):
                if keep[i, j] != want:
                    continue
                n += 1
                se += sum((render[i, j, c] - clean[i, j, c]) ** 2 for c in range(3))
                sm += s_map[i, j]
        out[name] = (n, 10 * math.log10(1 / (se / (3 * n))), sm / n)
    return out


def test_stratified_matches_masked_loop_oracle(rng):
    clean = rng.uniform(size=(14, 15, 3))
    render = np.clip(clean + rng.normal(0, 0.05, clean.shape), 0, 1)
    keep = np.ones((14, 15))
    keep[3:8, 4:10] = 0
    e = stratified_metrics(render, clean, keep)
    ref = region_oracle(render, clean, keep)
    for region, got in (("inside", e.inside), ("outside", e.outside)):
        n, p, s = ref[region]
        assert got.pixels == n
        assert got.psnr == pytest.approx(p, abs=1e-9)
        assert got.ssim == pytest.approx(s, abs=1e-12)
    assert e.inside.pixels + e.outside.pixels == keep.size


def test_stratified_identity_locality_and_empty_region(rng):
    clean = rng.uniform(size=(12, 12, 3))
    keep = np.ones((12, 12))
    keep[2:5, 2:5] = 0
    e = stratified_metrics(clean, clean, keep)
    assert e.inside.psnr == math.inf and e.outside.psnr == math.inf
    corrupt = clean.copy()
    corrupt[2:5, 2:5] = 1 - corrupt[2:5, 2:5]
    e2 = stratified_metrics(corrupt, clean, keep)
    assert e2.outside.psnr == math.inf and e2.inside.psnr < 20
    e3 = stratified_metrics(clean, clean, np.ones((12, 12)))
    assert not e3.inside.present and e3.inside.psnr is None


@given(st.integers(0, 2**31 - 1))
def test_stratified_pixel_counts_sum_to_total(seed):
    g = np.random.default_rng(seed)
    keep = (g.uniform(size=(11, 13)) > 0.4).astype(float)
    clean = g.uniform(size=(11, 13, 3))
    e = stratified_metrics(clean, clean, keep)
    assert e.inside.pixels + e.outside.pixels == keep.size


def two_instances(shape=(12, 12)):
    masks = np.zeros((2,) + shape, bool)
    masks[0, 1:4, 1:5] = True
    masks[1, 7:11, 6:10] = True
    return InstanceSet(masks, [1000, 1001])


def test_refine_fixed_point_and_empty_set():
    inst = two_instances()
    m = np.ones((12, 12))
    m[inst.get(1000)] = 0.0
    l1 = np.ones((12, 12))
    np.testing.assert_array_equal(refine_predicted_mask(m, inst, l1, dilation=0), m)
    np.testing.assert_array_equal(
        refine_predicted_mask(np.zeros((12, 12)), InstanceSet.empty(12, 12), l1), 1.0)


def test_refine_snaps_noisy_masks_to_instances(rng):
    inst = two_instances()
    gt = np.ones((12, 12))
    gt[inst.union()] = 0.0
    soft = np.clip(gt + rng.normal(0, 0.35, gt.shape), 0, 1)
    l1 = np.where(gt == 0, 0.3, 0.01)
    raw = mask_metrics(binarize(soft), gt).iou
    ref = mask_metrics(refine_predicted_mask(soft, inst, l1, dilation=0), gt).iou
    assert ref >= raw and ref == 1.0


def test_toggles_validate():
    assert toggle_overrides(ABLATION_ROWS["base"])["stage2.mask"] == "none"
    assert toggle_overrides({"dd", "mlp", "depth"})["stage2.depth_reg"] is True
    with pytest.raises(ConfigError, match="unknown"):
        toggle_overrides({"dd", "sparkle"})
    with pytest.raises(ConfigError):
        toggle_overrides({"pm", "mlp"})
    with pytest.raises(ConfigError):
        toggle_overrides({"no_prior"})


def test_single_row_grid_is_reproducible(tmp_path):
    cfg = tiny_config(**{"stage2.iterations": 15})
    ds = generate(cfg.scene_spec())
    priors = {v.view_id: v.transient_mask.copy() for v in ds.views}
    a = ablation_grid(ds, cfg, priors, rows=["base"])
    b = ablation_grid(ds, cfg, priors, rows=["base"])
    assert len(a) == 1 and a == b and len(a[0]) == len(ABLATION_HEADER)
    path = save_ablation(a, tmp_path)
    assert len(path.read_text().splitlines()) == 2
    with pytest.raises(ConfigError):
        ablation_grid(ds, cfg, priors, rows=["no such row"])


def test_evaluate_run_pools_views_and_writes_reports(tmp_path):
    cfg = tiny_config(**{"stage2.iterations": 15, "stage2.mask": "pseudo"})
    ds = generate(cfg.scene_spec())
    priors = {v.view_id: v.transient_mask.copy() for v in ds.views}
    res = train_stage2(ds, cfg, priors)
    rep = evaluate_run(ds, cfg, res, priors)
    assert rep.summary["pseudo_iou"] == 1.0 and rep.summary["mlp_iou"] == 1.0
    assert rep.metrics[-1][0] == "all" and len(rep.metrics) == len(ds.views) + 1
    pix = sum(r[1] + r[2] for r in rep.stratified[:-1])
    assert pix == len(ds.views) * ds.views[0].transient_mask.size
    written = save_report(rep, tmp_path)
    assert (tmp_path / "metrics.csv") in written and (tmp_path / "stratified.csv") in written
