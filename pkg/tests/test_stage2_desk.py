"""Desk-scale Stage II check on a transient-free dataset.

The mask MLP starts near sigmoid(2) and moves at lr 1e-3, so it needs a
desk-length schedule before its masks settle at keep. Short schedules measure
that warm-up rather than the masking itself.
"""

import numpy as np
import pytest

from priorsplat.config import RunConfig
from priorsplat.scenegen import generate
from priorsplat.stage2 import train_stage2

pytestmark = pytest.mark.slow


def test_all_keep_priors_on_clean_data_match_vanilla():
    cfg = RunConfig.from_profile(overrides={"dataset.transients_per_view": 0,
                                            "stage2.depth_reg": False})
    ds = generate(cfg.scene_spec())
    vanilla = train_stage2(ds, cfg.with_overrides(stage2__mask="none"), None)
    guided = train_stage2(ds, cfg, {v.view_id: np.ones(v.shape) for v in ds.views})

    def mean_psnr(res):
        mse = [np.mean((res.renders[v.view_id] - v.gt_image) ** 2) for v in ds.views]
        return float(np.mean([10 * np.log10(1 / e) for e in mse]))

    gap = mean_psnr(guided) - mean_psnr(vanilla)
    print(f"all-keep MLP vs vanilla on clean data: {gap:+.3f} dB")
    assert abs(gap) < 0.2
