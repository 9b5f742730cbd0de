import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from priorsplat.errors import (
    DimensionMismatchError,
    NonBinaryMaskError,
    NonFiniteError,
    RasterFormatError,
    ShapeError,
)
from priorsplat.raster import (
    SSIM_C1,
    SSIM_C2,
    DepthMap,
    InstanceSet,
    cosine_similarity_map,
    dilate,
    gaussian_filter_zero,
    gaussian_kernel1d,
    l1_residual,
    load_image_png,
    load_mask_png,
    minmax_normalize,
    psnr,
    read_ras1,
    save_image_png,
    save_mask_png,
    ssim,
    ssim_backward,
    write_ras1,
)


def ssim_loop_oracle(x, y):
    """Per-pixel SSIM with the window truncated to the image and renormalized."""
    h, w, c = x.shape
    k = gaussian_kernel1d()
    r = len(k) // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for ch in range(c):
                sw = sx = sy = sxx = syy = sxy = 0.0
                for u in range(-r, r + 1):
                    for v in range(-r, r + 1):
                        ii, jj = i + u, j + v
                        if not (0 <= ii < h and 0 <= jj < w):
                            continue
                        wt = k[u + r] * k[v + r]
                        a, b = x[ii, jj, ch], y[ii, jj, ch]
                        sw += wt
                        sx += wt * a
                        sy += wt * b
                        sxx += wt * a * a
                        syy += wt * b * b
                        sxy += wt * a * b
                mx, my = sx / sw, sy / sw
                vx = sxx / sw - mx * mx
                vy = syy / sw - my * my
                cxy = sxy / sw - mx * my
                acc += ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
            out[i, j] = acc / c
    return out


def test_ssim_matches_loop_oracle(rng):
    x = rng.uniform(size=(13, 14, 3))
    y = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
    res = ssim(x, y)
    ref = ssim_loop_oracle(x, y)
    np.testing.assert_allclose(res.map, ref, atol=1e-12)
    assert res.value == pytest.approx(ref.mean(), abs=1e-12)


def test_ssim_identical_and_constant_images():
    x = np.full((12, 12, 3), 0.3)
    assert ssim(x, x).value == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(0)
    z = rng.uniform(size=(16, 16, 3))
    np.testing.assert_allclose(ssim(z, z).map, 1.0, atol=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_ssim_backward_matches_finite_differences(rng):
    x = rng.uniform(0.1, 0.9, (12, 13, 3))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0.05, 0.95)
    g = rng.normal(size=(12, 13))
    grad = ssim_backward(ssim(x, y), g)
    h = 1e-6
    for _ in range(40):
        idx = tuple(rng.integers(0, s) for s in y.shape)
        yp, ym = y.copy(), y.copy()
        yp[idx] += h
        ym[idx] -= h
        fd = ((ssim(x, yp).map * g).sum() - (ssim(x, ym).map * g).sum()) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_zero_padded_filter_matches_scipy(rng):
    a = rng.normal(size=(15, 17, 4))
    k = gaussian_kernel1d()
    ref = ndimage.correlate1d(a, k, axis=0, mode="constant")
    ref = ndimage.correlate1d(ref, k, axis=1, mode="constant")
    np.testing.assert_allclose(gaussian_filter_zero(a), ref, atol=1e-14)
    np.testing.assert_allclose(gaussian_filter_zero(a[:, :, 0]), ref[:, :, 0], atol=1e-14)


def test_psnr_oracle_and_identity(rng):
    a = rng.uniform(size=(8, 9, 3))
    b = rng.uniform(size=(8, 9, 3))
    mse = sum((a[i, j, c] - b[i, j, c]) ** 2 for i in range(8) for j in range(9)
              for c in range(3)) / a.size
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-12)
    assert psnr(a, a) == math.inf


def test_l1_residual_is_channel_mean(rng):
    a = rng.uniform(size=(5, 6, 3))
    b = rng.uniform(size=(5, 6, 3))
    np.testing.assert_allclose(l1_residual(a, b), np.abs(a - b).sum(axis=2) / 3)
    with pytest.raises(ShapeError):
        l1_residual(a, b[:4])


def dilate_oracle(mask, r):
    h, w = mask.shape
    out = np.ones_like(mask)
    for i in range(h):
        for j in range(w):
            for u in range(max(0, i - r), min(h, i + r + 1)):
                for v in range(max(0, j - r), min(w, j + r + 1)):
                    if mask[u, v] == 0:
                        out[i, j] = 0.0
    return out


@given(st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_dilate_matches_square_oracle(radius, seed):
    m = (np.random.default_rng(seed).uniform(size=(9, 11)) > 0.15).astype(float)
    np.testing.assert_array_equal(dilate(m, radius), dilate_oracle(m, radius))


@given(st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_dilate_only_grows_transient_region(radius, seed):
    m = (np.random.default_rng(seed).uniform(size=(10, 10)) > 0.1).astype(float)
    d = dilate(m, radius)
    assert np.all(d <= m)


def test_dilate_rejects_soft_masks_and_negative_radius():
    with pytest.raises(NonBinaryMaskError):
        dilate(np.full((4, 4), 0.5), 1)
    with pytest.raises(ValueError):
        dilate(np.ones((4, 4)), -1)


def test_minmax_normalize():
    np.testing.assert_allclose(minmax_normalize(np.array([[1.0, 3.0], [2.0, 5.0]])),
                               [[0.0, 0.5], [0.25, 1.0]])
    np.testing.assert_array_equal(minmax_normalize(np.full((2, 3), 7.0)), 0.5)
    with pytest.raises(ValueError):
        minmax_normalize(np.array([[np.nan, 1.0]]))


@given(st.integers(0, 2**31 - 1))
def test_minmax_range(seed):
    r = np.random.default_rng(seed).normal(size=(6, 7))
    n = minmax_normalize(r)
    assert n.min() == 0.0 and n.max() == 1.0


def test_cosine_similarity_oracle_and_zero_guard(rng):
    a = rng.normal(size=(4, 5, 3))
    b = rng.normal(size=(4, 5, 3))
    a[0, 0] = 0
    b[0, 0] = 0
    a[1, 1] = 0
    cos = cosine_similarity_map(a, b)
    for i in range(4):
        for j in range(5):
            na, nb = np.linalg.norm(a[i, j]), np.linalg.norm(b[i, j])
            if na == 0 and nb == 0:
                ref = 1.0
            elif na == 0 or nb == 0:
                ref = 0.0
            else:
                ref = float(a[i, j] @ b[i, j]) / (na * nb)
            assert cos[i, j] == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ShapeError):
        cosine_similarity_map(a, b[:, :, :2])


@given(st.integers(0, 2**31 - 1))
def test_cosine_bounded_and_symmetric(seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(3, 4, 5)), g.normal(size=(3, 4, 5))
    c = cosine_similarity_map(a, b)
    assert np.all(np.abs(c) <= 1.0)
    np.testing.assert_allclose(c, cosine_similarity_map(b, a))


def test_ras1_roundtrip_and_errors(tmp_path, rng):
    a = rng.normal(size=(6, 7, 4)).astype(np.float32)
    p = tmp_path / "a.ras1"
    write_ras1(p, a)
    np.testing.assert_array_equal(read_ras1(p), a)
    np.testing.assert_array_equal(read_ras1(p, (6, 7)), a)
    write_ras1(tmp_path / "b.ras1", a[:, :, 0])
    assert read_ras1(tmp_path / "b.ras1").shape == (6, 7, 1)
    with pytest.raises(DimensionMismatchError) as exc:
        read_ras1(p, (7, 6))
    assert exc.value.expected == (7, 6) and exc.value.got == (6, 7)
    bad = tmp_path / "bad.ras1"
    bad.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(RasterFormatError):
        read_ras1(bad)
    short = tmp_path / "short.ras1"
    short.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(RasterFormatError):
        read_ras1(short)
    a[0, 0, 0] = np.nan
    write_ras1(tmp_path / "nan.ras1", a)
    with pytest.raises(NonFiniteError):
        read_ras1(tmp_path / "nan.ras1")


def test_png_roundtrips(tmp_path, rng):
    img = np.rint(rng.uniform(size=(5, 6, 3)) * 255) / 255
    save_image_png(tmp_path / "i.png", img)
    np.testing.assert_array_equal(load_image_png(tmp_path / "i.png"), img)
    m = (rng.uniform(size=(5, 6)) > 0.5).astype(float)
    save_mask_png(tmp_path / "m.png", m)
    np.testing.assert_array_equal(load_mask_png(tmp_path / "m.png"), m)


def test_mask_png_rejects_gray_levels(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((3, 3), 128, np.uint8)).save(tmp_path / "g.png")
    with pytest.raises(NonBinaryMaskError):
        load_mask_png(tmp_path / "g.png")


def test_depth_map_and_instance_set_contracts():
    d = DepthMap(np.array([[1.0, 4.0], [2.0, 9.0]]), np.array([[1, 1], [1, 0]]))
    assert d.range() == 3.0
    assert DepthMap(np.zeros((2, 2)), np.zeros((2, 2))).range() == 0.0
    with pytest.raises(ShapeError):
        DepthMap(np.zeros((2, 2)), np.zeros((2, 3)))
    masks = np.zeros((2, 3, 3), bool)
    masks[0, 0, 0] = masks[1, 2, 2] = True
    inst = InstanceSet(masks, [5, 9])
    assert inst.union([9]).sum() == 1 and inst.union().sum() == 2
    assert inst.get(5)[0, 0]
    assert not InstanceSet.empty(3, 3).union().any()
    with pytest.raises(ValueError):
        InstanceSet(masks, [1, 1])
    with pytest.raises(ValueError):
        InstanceSet(np.zeros((1, 3, 3), bool), [0])
