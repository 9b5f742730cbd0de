"""Masked photometric reconstruction loss and its image-space gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import as_image, l1_residual, ssim, ssim_backward

LAMBDA_DSSIM = 0.2


@dataclass
class LossTerms:
    total: float
    l1: float
    dssim: float
    grad: np.ndarray  # dL/d(render), (H, W, 3)
    l1_map: np.ndarray
    ssim_map: np.ndarray


def masked_loss(gt, render, mask=None, lambda_dssim: float = LAMBDA_DSSIM,
                need_grad: bool = True) -> LossTerms:
    """(1 - lambda) mean(M * L1) + lambda mean(M * D-SSIM).

    ``mask`` is a keep-polarity weight map (soft values allowed); ``None`` means
    all-keep, which reduces exactly to the unmasked loss.
    """
    gt = as_image(gt)
    render = as_image(render)
    npix = gt.shape[0] * gt.shape[1]
    m = np.ones(gt.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
    l1_map = l1_residual(gt, render)
    s = ssim(gt, render)
    l1 = float(np.mean(m * l1_map))
    dssim = float((np.mean(m) - np.mean(m * s.map)) / 2.0)
    total = (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim
    grad = None
    if need_grad:
        grad = ((1.0 - lambda_dssim) / (3.0 * npix)) * m[:, :, None] * np.sign(render - gt)
        grad += ssim_backward(s, -lambda_dssim * m / (2.0 * npix))
    return LossTerms(total, l1, dssim, grad, l1_map, s.map)


def unmasked_loss(gt, render, lambda_dssim: float = LAMBDA_DSSIM) -> float:
    """Plain photometric loss (1 - lambda) L1 + lambda (1 - SSIM) / 2."""
    l1 = float(np.mean(l1_residual(gt, render)))
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * ssim(gt, render).dssim
