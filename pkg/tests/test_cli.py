import math

import numpy as np
import pytest

from conftest import TINY
from priorsplat.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PREREQ,
    MissingColumnError,
    file_sha256,
    main,
    plot_results,
    read_manifest,
    read_stats,
)
from priorsplat.providers import builtin_features
from priorsplat.raster import write_ras1


def write_config(path, **extra):
    vals = {**TINY, **extra}
    lines = []
    for k, v in vals.items():
        v = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "tiny.cfg")
    out = root / "out"
    assert main(["run", "all", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    return cfg, out


def test_show_config_lists_keys(capsys):
    assert main(["show-config"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "stage1.lambda_local = 1.5" in text and "priors.tau_sim = 0.75" in text


def test_bad_configuration_exits_2(tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--set", "dataset.views=0"]) == EXIT_CONFIG
    assert main(["generate", "--out", str(tmp_path), "--set", "nonsense=1"]) == EXIT_CONFIG
    assert main(["generate", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG


def test_generate_is_reproducible_and_skips_when_current(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert "4 views" in capsys.readouterr().out
    assert main(["generate", "--config", str(cfg), "--out", str(b)]) == EXIT_OK
    files = sorted(p.relative_to(a) for p in (a / "dataset").rglob("*")
                   if p.is_file() and p.name != "manifest.txt")
    assert len(files) > 4
    for rel in files:
        assert file_sha256(a / rel) == file_sha256(b / rel)
    capsys.readouterr()
    assert main(["generate", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert "up-to-date" in capsys.readouterr().out


def test_missing_prerequisite_exits_3(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg")
    out = tmp_path / "o"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert main(["run", "stage2", "--config", str(cfg), "--out", str(out)]) == EXIT_PREREQ
    assert "stage1" in capsys.readouterr().err


def test_full_run_writes_results_and_manifests(finished_run, capsys):
    cfg, out = finished_run
    header = (out / "results" / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("view,psnr,ssim")
    man = read_manifest(out / "stage2")
    assert man["phase"] == "stage2" and "input.priors" in man and man["version"]
    assert any(k.startswith("output.mask_") for k in man)
    capsys.readouterr()
    assert main(["run", "all", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert text.count("up-to-date") == 5


def test_upstream_config_change_needs_force(finished_run, tmp_path):
    cfg, out = finished_run
    changed = write_config(tmp_path / "changed.cfg", **{"stage1.lambda_local": 2.0})
    args = ["run", "eval", "--config", str(changed), "--out", str(out)]
    assert main(args) == EXIT_PREREQ
    before = (out / "results" / "metrics.csv").read_bytes()
    assert main(args + ["--force"]) == EXIT_OK
    assert (out / "results" / "metrics.csv").read_bytes() == before


def test_plots_and_schedule_anchors(finished_run):
    _, out = finished_run
    written = plot_results(out)
    names = {p.name for p in written}
    assert {"loss_stage1.png", "loss_stage2.png", "schedule.png", "mask_iou.png"} <= names
    assert any(n.startswith("panel_") for n in names)
    assert all(p.stat().st_size > 0 for p in written)
    st = read_stats(out / "stage2" / "stats.csv")
    beta = TINY["stage2.beta_prior"]
    assert st["w_prior"][0] == 1.0
    assert st["w_prior"][st["iter"] == beta][0] == pytest.approx(math.exp(-1), abs=5e-7)  # stats.csv keeps 6 decimals
    assert main(["plot", "--out", str(out)]) == EXIT_OK


def test_plot_errors(tmp_path):
    assert main(["plot", "--out", str(tmp_path)]) == EXIT_PREREQ
    (tmp_path / "stage2").mkdir()
    (tmp_path / "stage2" / "stats.csv").write_text("iter,loss\n0,1.0\n")
    with pytest.raises(MissingColumnError) as exc:
        plot_results(tmp_path)
    assert exc.value.column == "l1"


def test_ingest_check(finished_run, tmp_path, capsys):
    cfg, out = finished_run
    feats = tmp_path / "feats"
    feats.mkdir()
    for vd in sorted((out / "dataset").glob("view_*")):
        vid = int(vd.name.split("_")[1])
        write_ras1(feats / f"view_{vid:04d}.ras1", builtin_features(np.zeros((40, 48, 3))))
    base = ["ingest-check", "--config", str(cfg), "--out", str(out)]
    assert main(base + ["--set", f"mlp_features.provider=ingest:{feats}"]) == EXIT_OK
    write_ras1(feats / "view_0001.ras1", np.zeros((40, 47, 11)))
    assert main(base + ["--set", f"mlp_features.provider=ingest:{feats}"]) == EXIT_PREREQ
    assert "view_0001" in capsys.readouterr().out
