import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config
from priorsplat.errors import ConfigError
from priorsplat.raster import DepthMap, InstanceSet, psnr
from priorsplat.scenegen import (
    SceneSpec,
    ViewFrame,
    generate,
    gt_transient_mask,
    load_dataset,
    save_dataset,
)
from priorsplat.splat import Gaussian2D, GaussianScene, ViewCamera, contributions


def tiny_spec(**kw):
    return tiny_config(**{f"dataset.{k}": v for k, v in kw.items()}).scene_spec()


def test_no_transients_means_clean_views():
    ds = generate(tiny_spec(transients_per_view=0))
    for v in ds.views:
        np.testing.assert_array_equal(v.transient_mask, 1.0)
        np.testing.assert_array_equal(v.gt_image, v.static_image)
        assert v.transient_ids == []


def test_each_transient_lives_in_one_view_without_persistence():
    ds = generate(tiny_spec(views=6, p_persist=0.0))
    seen = [i for v in ds.views for i in v.transient_ids]
    assert len(seen) == len(set(seen)) == 6


def test_persistent_transients_recur():
    ds = generate(tiny_spec(views=6, p_persist=1.0))
    ids = {i for v in ds.views for i in v.transient_ids}
    assert len(ids) == 1


def test_generation_is_deterministic():
    a = generate(tiny_spec())
    b = generate(tiny_spec())
    for va, vb in zip(a.views, b.views):
        np.testing.assert_array_equal(va.gt_image, vb.gt_image)
        np.testing.assert_array_equal(va.transient_alpha, vb.transient_alpha)
        np.testing.assert_array_equal(va.instances.masks, vb.instances.masks)
    c = generate(tiny_spec(seed=1))
    assert not np.array_equal(a.views[0].gt_image, c.views[0].gt_image)


def test_view_rasters_align_and_instances_cover_transients():
    ds = generate(tiny_spec())
    v = ds.views[0]
    assert v.gt_image.shape[:2] == v.transient_mask.shape == v.static_depth.shape
    assert v.instances.masks.shape[1:] == v.shape
    np.testing.assert_array_equal(v.transient_mask, gt_transient_mask(v))
    # every pixel the transient owns above the instance threshold is in its instance
    tids = set(v.transient_ids)
    t_union = v.instances.union([i for i in v.instances.ids if i in tids])
    owned = v.transient_alpha > ds.spec.tau_instance
    assert owned.any() and np.all(t_union[owned])
    assert np.all(v.transient_mask[owned] == 0)


def test_degenerate_specs_are_rejected():
    with pytest.raises(ConfigError):
        generate(SceneSpec(views=0))
    with pytest.raises(ConfigError):
        generate(SceneSpec(p_persist=1.5))
    with pytest.raises(ConfigError):
        generate(SceneSpec(static_objects=-1))


def frame_with_alpha(alpha):
    h, w = alpha.shape
    return ViewFrame(0, ViewCamera((0, 0), 0, 0.1, w, h), np.zeros((h, w, 3)),
                     np.zeros((h, w, 3)), np.ones((h, w)), alpha,
                     DepthMap(np.zeros((h, w)), np.zeros((h, w), bool)),
                     InstanceSet.empty(h, w))


def test_opaque_disk_mask_matches_contribution_oracle():
    cam = ViewCamera((0.0, 0.0), 0.0, 0.1, 24, 24)
    back = Gaussian2D.from_natural((1.2, 1.2), (3.0, 3.0), 0.0, 0.9, (0.3, 0.3, 0.3), 5.0)
    disk = Gaussian2D.from_natural((1.2, 1.2), (0.3, 0.3), 0.0, 0.99, (1, 0, 0), 1.0)
    scene = GaussianScene.from_gaussians([back, disk])
    alpha = contributions(scene, cam, np.array([0, 1]), 2)[1]
    # the disk is in front, so its contribution is its own alpha
    ref = np.zeros((24, 24))
    for r in range(24):
        for c in range(24):
            d2 = ((c + 0.5) * 0.1 - 1.2) ** 2 + ((r + 0.5) * 0.1 - 1.2) ** 2
            g = math.exp(-0.5 * d2 / 0.09)
            ref[r, c] = min(0.99, 0.99 * g) if g >= 1 / 255 else 0.0
    np.testing.assert_allclose(alpha, ref, atol=1e-12)
    np.testing.assert_array_equal(gt_transient_mask(frame_with_alpha(alpha)),
                                  np.where(ref > 0.05, 0.0, 1.0))
    np.testing.assert_array_equal(gt_transient_mask(frame_with_alpha(alpha), 1.0), 1.0)


def test_clean_static_views_agree_under_warping():
    ds = generate(tiny_spec(views=4, camera_jitter=0.1, rotation_jitter=0.1))
    a, b = ds.views[0], ds.views[1]
    h, w = b.shape
    rows, cols = np.mgrid[0:h, 0:w]
    centres = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1)
    pa = a.camera.world_to_screen(b.camera.screen_to_world(centres)) - 0.5
    x, y = pa[:, 0], pa[:, 1]
    inside = (x >= 0) & (x <= w - 1.001) & (y >= 0) & (y <= h - 1.001)
    x0, y0 = np.floor(x[inside]).astype(int), np.floor(y[inside]).astype(int)
    fx, fy = (x[inside] - x0)[:, None], (y[inside] - y0)[:, None]
    img = a.static_image
    warped = ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x0 + 1]
              + (1 - fx) * fy * img[y0 + 1, x0] + fx * fy * img[y0 + 1, x0 + 1])
    target = b.static_image.reshape(-1, 3)[inside]
    assert inside.mean() > 0.3
    assert psnr(target, warped) > 30.0


def test_dataset_roundtrip(tmp_path):
    ds = generate(tiny_spec())
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.spec == ds.spec
    for va, vb in zip(ds.views, back.views):
        np.testing.assert_array_equal(va.gt_image, vb.gt_image)
        np.testing.assert_array_equal(va.transient_mask, vb.transient_mask)
        np.testing.assert_array_equal(va.static_depth.depth, vb.static_depth.depth)
        np.testing.assert_array_equal(va.instances.masks, vb.instances.masks)
        assert va.instances.ids == vb.instances.ids and va.transient_ids == vb.transient_ids
        assert va.camera == vb.camera


@given(st.floats(0.0, 1.0))
def test_mask_shrinks_as_visibility_threshold_rises(tau):
    alpha = np.linspace(0, 0.99, 40).reshape(5, 8)
    f = frame_with_alpha(alpha)
    assert np.all(gt_transient_mask(f, tau) >= gt_transient_mask(f, tau / 2))
