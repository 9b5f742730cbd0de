"""Command-line orchestration of the pipeline phases.

Layout under the output directory::

    dataset/   generate
    stage1/    scene, renders, keep masks, stats.csv
    priors/    pseudo-masks and per-instance stats
    stage2/    scene, mask MLP, masks, renders, stats.csv
    results/   metrics.csv, stratified.csv, refined masks, ablation.csv, plots/

Each phase directory holds a ``manifest.txt`` with the phase config hash, the
hashes of the upstream manifests it consumed, a version string and hashes of
its outputs. A phase whose manifest still matches is skipped as up-to-date.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import PHASES, RunConfig
from .errors import (
    ConfigError,
    DimensionMismatchError,
    DivergenceError,
    NonFiniteError,
    PrerequisiteError,
    PriorSplatError,
    RasterFormatError,
)
from .evalkit import (
    ABLATION_ROWS,
    ablation_grid,
    evaluate_run,
    save_ablation,
    save_report,
    toggle_overrides,
)
from .priorbuild import build_pseudo_masks, save_priors
from .providers import ingest
from .raster import load_image_png, load_mask_png
from .scenegen import generate, load_dataset, save_dataset
from .splat import load_checkpoint
from .stage1 import save_stage1, train_stage1
from .stage2 import load_stage2, save_stage2, train_stage2

log = logging.getLogger("priorsplat")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PREREQ, EXIT_DIVERGED = 0, 1, 2, 3, 4
PHASE_DIRS = {"generate": "dataset", "stage1": "stage1", "priors": "priors",
              "stage2": "stage2", "eval": "results"}
RUN_PHASES = ("stage1", "priors", "stage2", "eval")
MANIFEST = "manifest.txt"


# -- manifests -----------------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    """``git describe`` of the source checkout, else the package version."""
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            return f"{__version__}+g{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def read_manifest(phase_dir) -> dict | None:
    path = Path(phase_dir) / MANIFEST
    if not path.exists():
        return None
    out = {}
    for line in path.read_text().splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out


def write_manifest(phase_dir, phase: str, config_hash: str, inputs: dict[str, str],
                   outputs: list[Path]) -> None:
    d = Path(phase_dir)
    lines = [f"phase = {phase}", f"version = {version_string()}",
             f"config_hash = {config_hash}"]
    lines += [f"input.{k} = {v}" for k, v in sorted(inputs.items())]
    for p in sorted(set(outputs)):
        lines.append(f"output.{p.relative_to(d).as_posix()} = {file_sha256(p)}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")


def upstream(phase: str) -> list[str]:
    return {"generate": [], "stage1": ["generate"], "priors": ["generate", "stage1"],
            "stage2": ["generate", "stage1", "priors"],
            "eval": ["generate", "stage1", "priors", "stage2"]}[phase]


class Pipeline:
    def __init__(self, config: RunConfig, out: Path, force: bool = False):
        self.config = config
        self.out = Path(out)
        self.force = force
        self._dataset = None

    def dir(self, phase: str) -> Path:
        return self.out / PHASE_DIRS[phase]

    def input_hashes(self, phase: str) -> dict[str, str]:
        """Hashes of upstream manifests, after checking they exist and match."""
        hashes = {}
        for up in upstream(phase):
            man = read_manifest(self.dir(up))
            if man is None:
                raise PrerequisiteError(
                    f"{phase} needs the {up} phase: {self.dir(up) / MANIFEST} is missing "
                    f"(run `priorsplat {'generate' if up == 'generate' else 'run ' + up}` first)")
            want = self.config.phase_hash(up)
            if man.get("config_hash") != want and not self.force:
                raise PrerequisiteError(
                    f"{up} outputs in {self.dir(up)} were made with a different config "
                    f"(hash {man.get('config_hash')} != {want}); rerun {up} or pass --force")
            hashes[up] = file_sha256(self.dir(up) / MANIFEST)
        return hashes

    def up_to_date(self, phase: str, inputs: dict[str, str]) -> bool:
        man = read_manifest(self.dir(phase))
        if man is None or man.get("config_hash") != self.config.phase_hash(phase):
            return False
        if {k[6:]: v for k, v in man.items() if k.startswith("input.")} != inputs:
            return False
        for k, v in man.items():
            if k.startswith("output."):
                p = self.dir(phase) / k[7:]
                if not p.exists() or file_sha256(p) != v:
                    return False
        return True

    def execute(self, phase: str, force_run: bool = False) -> bool:
        """Run ``phase`` unless up-to-date; True when it ran."""
        inputs = self.input_hashes(phase)
        if not force_run and self.up_to_date(phase, inputs):
            print(f"{phase}: up-to-date ({self.dir(phase)})")
            return False
        d = self.dir(phase)
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {d}: {exc}") from exc
        old = read_manifest(d)
        if old is not None:
            # drop the previous run's outputs so stale files cannot linger
            for k in old:
                if k.startswith("output."):
                    (d / k[7:]).unlink(missing_ok=True)
            (d / MANIFEST).unlink()
        t0 = time.perf_counter()
        outputs = getattr(self, f"_run_{phase}")(d)
        write_manifest(d, phase, self.config.phase_hash(phase), inputs, outputs)
        print(f"{phase}: done in {time.perf_counter() - t0:.1f} s ({d})")
        return True

    # phase bodies ---------------------------------------------------------

    def dataset(self):
        if self._dataset is None:
            self._dataset = load_dataset(self.dir("generate"))
        return self._dataset

    def _load_priors(self) -> dict[int, np.ndarray]:
        return {v.view_id: load_mask_png(self.dir("priors") / f"pseudo_{v.view_id:04d}.png")
                for v in self.dataset().views}

    def _run_generate(self, d: Path) -> list[Path]:
        ds = generate(self.config.scene_spec())
        save_dataset(ds, d)
        self._dataset = None
        tpix = sum(int(np.sum(v.transient_mask == 0)) for v in ds.views)
        npix = sum(v.transient_mask.size for v in ds.views)
        print(f"dataset: {len(ds.views)} views of {ds.spec.width}x{ds.spec.height} px, "
              f"{len(ds.static_scene)} static Gaussians, "
              f"{sum(len(v.transient_ids) for v in ds.views)} transient instances, "
              f"transient pixel fraction {tpix / npix:.4f}")
        return _files(d)

    def _run_stage1(self, d: Path) -> list[Path]:
        return save_stage1(train_stage1(self.dataset(), self.config), d)

    def _run_priors(self, d: Path) -> list[Path]:
        ds = self.dataset()
        renders = {v.view_id: load_image_png(self.dir("stage1") / f"render_{v.view_id:04d}.png")
                   for v in ds.views}
        priors = build_pseudo_masks(ds, renders, self.config)
        return save_priors(priors, d)

    def _run_stage2(self, d: Path) -> list[Path]:
        scene = None
        if self.config["stage2.init"] == "warm":
            scene = load_checkpoint(self.dir("stage1") / "scene.gs2d")
        res = train_stage2(self.dataset(), self.config, priors=self._load_priors(),
                           stage1_scene=scene)
        return save_stage2(res, d)

    def _run_eval(self, d: Path) -> list[Path]:
        ds = self.dataset()
        priors = self._load_priors()
        res = load_stage2(self.dir("stage2"), [v.view_id for v in ds.views])
        report = evaluate_run(ds, self.config, res, priors)
        written = save_report(report, d)
        s = report.summary
        print(f"eval: PSNR {s['psnr']:.3f} dB, inside {_fmt_opt(s['psnr_inside'])}, "
              f"outside {_fmt_opt(s['psnr_outside'])}; pseudo IoU {s['pseudo_iou']:.3f}, "
              f"refined IoU {s['refined_iou']:.3f}")
        if self.config["eval.ablation"]:
            reuse = {}
            for name, toggles in ABLATION_ROWS.items():
                if all(self.config[k] == v for k, v in toggle_overrides(toggles).items()):
                    reuse[name] = res
            table = ablation_grid(ds, self.config, priors, reuse=reuse)
            written.append(save_ablation(table, d))
        return written


def _files(d: Path) -> list[Path]:
    return [p for p in d.rglob("*") if p.is_file() and p.name != MANIFEST]


def _fmt_opt(v) -> str:
    return "n/a" if v is None else f"{v:.3f} dB"


# -- plotting ------------------------------------------------------------------


class MissingColumnError(PriorSplatError, KeyError):
    def __init__(self, path, column: str):
        self.path = str(path)
        self.column = column
        super().__init__(f"{self.path}: missing column {column!r}")

    def __str__(self):
        return self.args[0]


def read_stats(path) -> dict[str, np.ndarray]:
    """Columns of a stats CSV as float arrays (empty cells become NaN)."""
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"no results to plot: {path} is missing")
    with path.open() as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise PrerequisiteError(f"no results to plot: {path} has no data rows")
    header = rows[0]
    cols = {}
    for k, name in enumerate(header):
        cols[name] = np.array([float(r[k]) if r[k] != "" else np.nan for r in rows[1:]])
    return cols


def _col(stats, path, name):
    if name not in stats:
        raise MissingColumnError(path, name)
    return stats[name]


def plot_results(out: Path) -> list[Path]:
    """Loss curves, schedule weights, mask IoU and gt/render/mask panels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    pdir = out / "results" / "plots"
    pdir.mkdir(parents=True, exist_ok=True)
    written = []
    for stage in ("stage1", "stage2"):
        path = out / stage / "stats.csv"
        if stage == "stage1" and not path.exists():
            continue
        st = read_stats(path)
        it = _col(st, path, "iter")
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for name in ("loss", "l1", "dssim"):
            ax.plot(it, _col(st, path, name), label=name, lw=0.8)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_title(f"{stage} loss")
        ax.legend()
        p = pdir / f"loss_{stage}.png"
        fig.tight_layout()
        fig.savefig(p, dpi=100)
        plt.close(fig)
        written.append(p)
        if stage != "stage2":
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(it, _col(st, path, "w_prior"), label="prior weight")
        ax.plot(it, _col(st, path, "w_robust"), label="robust weight")
        ax.set_xlabel("iteration")
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
        p = pdir / "schedule.png"
        fig.tight_layout()
        fig.savefig(p, dpi=100)
        plt.close(fig)
        written.append(p)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        iou = _col(st, path, "mask_iou")
        k = max(1, min(100, len(iou) // 20))
        ax.plot(it, iou, lw=0.3, alpha=0.4, label="per iteration")
        ax.plot(it[k - 1:], np.convolve(iou, np.ones(k) / k, "valid"), label=f"mean of {k}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("mask IoU")
        ax.legend()
        p = pdir / "mask_iou.png"
        fig.tight_layout()
        fig.savefig(p, dpi=100)
        plt.close(fig)
        written.append(p)

    ds_dir = out / "dataset"
    s2 = out / "stage2"
    views = sorted(ds_dir.glob("view_*"))[:4]
    for vd in views:
        vid = int(vd.name.split("_")[1])
        render_p = s2 / f"render_{vid:04d}.png"
        mask_p = s2 / f"mask_{vid:04d}.png"
        if not (render_p.exists() and mask_p.exists()):
            continue
        panels = [("gt", load_image_png(vd / "gt.png")), ("render", load_image_png(render_p)),
                  ("mask", load_mask_png(mask_p)), ("gt mask", load_mask_png(vd / "tmask.png"))]
        fig, axes = plt.subplots(1, 4, figsize=(12, 2.6))
        for ax, (title, img) in zip(axes, panels):
            ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1)
            ax.set_title(title)
            ax.axis("off")
        p = pdir / f"panel_{vid:04d}.png"
        fig.tight_layout()
        fig.savefig(p, dpi=100)
        plt.close(fig)
        written.append(p)
    return written


# -- ingest check --------------------------------------------------------------


def ingest_check(config: RunConfig, dataset_dir: Path) -> list[str]:
    """Validate every ``ingest:`` provider against the dataset; list of problems."""
    ds = load_dataset(dataset_dir)
    slots = {"features.provider": [("features", ".ras1"), ("features", "_render.ras1")],
             "mlp_features.provider": [("features", ".ras1")],
             "depth.provider": [("depth", "_depth.ras1")],
             "instances.provider": [("instances", "")]}
    problems = []
    checked = 0
    for key, kinds in slots.items():
        spec = config[key]
        if not spec.startswith("ingest:"):
            continue
        root = Path(spec.split(":", 1)[1])
        for view in ds.views:
            for kind, suffix in kinds:
                p = root / f"view_{view.view_id:04d}{suffix}"
                checked += 1
                if not p.exists():
                    problems.append(f"{key}: missing {p}")
                    continue
                try:
                    val = ingest(p, kind, None)
                    if kind == "instances":
                        if len(val) and val.shape != view.shape:
                            raise DimensionMismatchError(p, view.shape, val.shape)
                    else:
                        arr = val.depth if kind == "depth" else val
                        if arr.shape[:2] != view.shape:
                            raise DimensionMismatchError(p, view.shape, arr.shape[:2])
                except (DimensionMismatchError, NonFiniteError, RasterFormatError) as exc:
                    problems.append(f"{key}: {exc}")
    print(f"ingest-check: {checked} files checked, {len(problems)} problems")
    return problems


# -- entry point ---------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--profile", choices=("desk", "paper"), default="desk")
    common.add_argument("--force", action="store_true",
                        help="rerun even when up-to-date and accept upstream config mismatches")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="priorsplat", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic dataset")
    run = sub.add_parser("run", parents=[common], help="run pipeline phases")
    run.add_argument("phase", choices=RUN_PHASES + ("all",))
    sub.add_parser("plot", parents=[common], help="plot curves and panels of a run")
    sub.add_parser("ingest-check", parents=[common],
                   help="validate ingested provider files against the dataset")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return ap


def _load_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.config is not None:
        return RunConfig.from_file(args.config, args.profile, overrides)
    return RunConfig.from_profile(args.profile, overrides)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load_config(args)
        out = Path(config["out"])
        if args.command == "show-config":
            print(config.dumps(), end="")
            return EXIT_OK
        if args.command == "plot":
            for p in plot_results(out):
                print(p)
            return EXIT_OK
        if args.command == "ingest-check":
            problems = ingest_check(config, out / PHASE_DIRS["generate"])
            for line in problems:
                print(line)
            return EXIT_PREREQ if problems else EXIT_OK
        pipe = Pipeline(config, out, args.force)
        if args.command == "generate":
            pipe.execute("generate", args.force)
            return EXIT_OK
        if args.phase == "all":
            pipe.execute("generate", args.force)
            for phase in RUN_PHASES:
                pipe.execute(phase, args.force)
        else:
            pipe.execute(args.phase, args.force)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PriorSplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "Pipeline", "PHASES", "plot_results", "read_stats", "MissingColumnError",
           "ingest_check", "version_string"]
