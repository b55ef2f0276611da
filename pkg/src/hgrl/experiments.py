"""Experiment protocols behind the CLI: ablation, factor and alpha sweeps, attack robustness.

Every protocol trains through :func:`hgrl.train.train` into its own run
directory, so an interrupted sweep picks up where it stopped and a finished
run is simply reloaded.
"""
from __future__ import annotations

import logging
from pathlib import Path
from statistics import median

import numpy as np

from .config import RunConfig
from .data import attack_grid, build_split, split_seeds
from .train import (_write_csv, build_model, evaluate_model, inference_times, load_checkpoint,
                    load_data, stack, train)

log = logging.getLogger(__name__)

ABLATION_VARIANTS = (
    ("backbone-only", dict(levels=(), loss="lb", fusion="add")),
    ("+GR(Z1)-A", dict(levels=(1,), loss="lb", fusion="add")),
    ("+GR(Z2)-A", dict(levels=(2,), loss="lb", fusion="add")),
    ("+GR(Z3)-A", dict(levels=(3,), loss="lb", fusion="add")),
    ("+GR(Z4)-A", dict(levels=(4,), loss="lb", fusion="add")),
    ("+HGR-A", dict(levels=(1, 2, 3, 4), loss="lb", fusion="add")),
    ("+HGR-A(w/ LS)", dict(levels=(1, 2, 3, 4), loss="ls", fusion="add")),
    ("+HGR-C(w/ LS)", dict(levels=(1, 2, 3, 4), loss="ls", fusion="concat")),
)
FACTOR_SETS = (("s1", (16, 8, 4, 2)), ("s2", (8, 4, 2, 1)), ("s3", (4, 2, 1, 1)))
ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)

ABLATION_HEADER = ("variant", "levels", "fusion", "loss", "f1", "mcc", "f1_per_seed")
RUNS_HEADER = ("name", "seed", "f1", "mcc", "tp", "fp", "tn", "fn")
DOWNSAMPLE_HEADER = ("set", "factors", "nodes_p1", "nodes_p2", "nodes_p3", "nodes_p4",
                     "f1", "mcc", "speed_size", "seconds_per_image")
ALPHA_HEADER = ("alpha", "f1", "mcc", "f1_per_seed")
ROBUSTNESS_HEADER = ("kind", "strength", "f1", "mcc")


def _levels(levels) -> str:
    return ",".join(str(i) for i in levels) or "none"


def node_counts(factors, size: int) -> tuple:
    """Graph size per pyramid level for a square input of side ``size``."""
    return tuple((size // (4 * 2 ** i) // s) ** 2 for i, s in enumerate(factors))


def train_runs(cfg: RunConfig, out: Path, name: str) -> list:
    """Train ``cfg`` once per seed in ``cfg.seeds``; returns (seed, model, test report) triples."""
    _, test_set = load_data(cfg)
    runs = []
    for seed in cfg.seeds:
        run_dir = Path(out) / name / f"seed{seed}"
        model, _ = train(cfg.replace(seed=seed, repeats=1, out=str(run_dir)), run_dir)
        report = evaluate_model(model, test_set)
        log.info("%s seed %d: f1 %.4f mcc %.4f", name, seed, report.f1, report.mcc)
        runs.append((seed, model, report))
    return runs


def _summary(runs) -> tuple:
    f1s = [r.f1 for _, _, r in runs]
    return median(f1s), median(r.mcc for _, _, r in runs), ";".join(f"{v:.6f}" for v in f1s)


def _run_rows(name, runs) -> list:
    return [[name, seed] + report.csv_row("")[1:] for seed, _, report in runs]


def ablate(base: RunConfig, out) -> list:
    """One row per ablation variant with median F1/MCC over the configured seeds."""
    out = Path(out)
    rows, per_run = [], []
    for name, changes in ABLATION_VARIANTS:
        cfg = base.replace(**changes)
        runs = train_runs(cfg, out, _slug(name))
        f1, mcc, per_seed = _summary(runs)
        rows.append((name, _levels(cfg.levels), cfg.fusion, cfg.loss, f"{f1:.6f}", f"{mcc:.6f}", per_seed))
        per_run += _run_rows(name, runs)
    _write_csv(out / "ablation.csv", ABLATION_HEADER, rows)
    _write_csv(out / "ablation_runs.csv", RUNS_HEADER, per_run)
    return rows


def speed_images(cfg: RunConfig) -> np.ndarray:
    """The first ``speed_count`` test seeds rendered at the timing resolution.

    Generated before any clock starts. The network is fully convolutional, so
    models trained at ``image_size`` run unchanged at ``speed_size``.
    """
    _, seeds = split_seeds(cfg.data_seed, cfg.n_train, cfg.n_test)
    return stack(build_split(list(seeds)[:cfg.speed_count], cfg.speed_size))[0]


def sweep_downsample(base: RunConfig, out) -> list:
    """Accuracy and per-image inference time for each down-sampling factor set.

    Timing uses the first seed's model of each set; the three models are
    timed in interleaved passes over the same images.
    """
    out = Path(out)
    rows, per_run, summaries, timed = [], [], [], []
    for name, factors in FACTOR_SETS:
        cfg = base.replace(factors=factors)
        runs = train_runs(cfg, out, name)
        summaries.append(_summary(runs))
        timed.append(runs[0][1])
        per_run += _run_rows(name, runs)
    seconds = inference_times(timed, speed_images(base), base.speed_passes)
    for (name, factors), (f1, mcc, _), sec in zip(FACTOR_SETS, summaries, seconds):
        rows.append((name, "-".join(map(str, factors)), *node_counts(factors, base.image_size),
                     f"{f1:.6f}", f"{mcc:.6f}", base.speed_size, f"{sec:.6g}"))
    _write_csv(out / "sweep_downsample.csv", DOWNSAMPLE_HEADER, rows)
    _write_csv(out / "sweep_downsample_runs.csv", RUNS_HEADER, per_run)
    return rows


def sweep_alpha(base: RunConfig, out, grid=ALPHA_GRID) -> list:
    out = Path(out)
    rows, per_run = [], []
    for alpha in grid:
        cfg = base.replace(alpha=alpha, loss="ls")
        runs = train_runs(cfg, out, f"alpha{alpha}")
        f1, mcc, per_seed = _summary(runs)
        rows.append((alpha, f"{f1:.6f}", f"{mcc:.6f}", per_seed))
        per_run += _run_rows(f"alpha={alpha}", runs)
    _write_csv(out / "sweep_alpha.csv", ALPHA_HEADER, rows)
    _write_csv(out / "sweep_alpha_runs.csv", RUNS_HEADER, per_run)
    return rows


def robustness(cfg: RunConfig, models, out) -> list:
    """F1/MCC on attacked test images for every attack grid point; masks are never touched.

    With several models the main CSV holds the per-point median and the
    per-model rows go to robustness_runs.csv.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _, test_set = load_data(cfg)
    rows, per_run = [], []
    for spec in attack_grid():
        reports = [evaluate_model(m, test_set, attack=spec, seed=cfg.seed) for m in models]
        f1 = median(r.f1 for r in reports)
        mcc = median(r.mcc for r in reports)
        rows.append((spec.kind, spec.strength, f"{f1:.6f}", f"{mcc:.6f}"))
        per_run += [(k, spec.kind, spec.strength, f"{r.f1:.6f}", f"{r.mcc:.6f}")
                    for k, r in enumerate(reports)]
    _write_csv(out / "robustness.csv", ROBUSTNESS_HEADER, rows)
    if len(models) > 1:
        _write_csv(out / "robustness_runs.csv", ("model",) + ROBUSTNESS_HEADER, per_run)
    return rows


def load_model(cfg: RunConfig, checkpoint):
    model = build_model(cfg)
    load_checkpoint(checkpoint, model)
    return model


def _slug(name: str) -> str:
    keep = "".join(c if c.isalnum() else "-" for c in name.lower())
    return "-".join(p for p in keep.split("-") if p)
