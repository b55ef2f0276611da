"""Acceptance suite: each criterion prints one PASS/FAIL line.

Criteria 4 to 7 train models. Runs land under ``$HGRL_ACCEPT_DIR`` (default
``runs/acceptance``); a finished run is reloaded instead of retrained, so a
second invocation only re-evaluates. Delete the directory for a cold run
(about two hours on a 4-core CPU).
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest
from hgrl import tensor as T
from hgrl.cli import main as cli_main
from hgrl.config import RunConfig
from hgrl.data import ATTACK_GRIDS, AttackSpec
from hgrl.experiments import ablate, robustness, sweep_downsample, train_runs
from hgrl.graph import grid_coords, normalize_adjacency, spatial_adjacency
from hgrl.hgc import GraphConv2, gcn_layer
from hgrl.metrics import composite_loss, dice_loss, evaluate
from hgrl.model import HGCNNet
from hgrl.nn import init_parameters
from hgrl.train import build_model, evaluate_model, load_checkpoint, load_data, train
from hgrl.transform import BranchHead, GraphToCNN

ROOT = Path(os.environ.get("HGRL_ACCEPT_DIR", "runs/acceptance"))
SEEDS = range(20)
RESULTS = {}


def report(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} [{detail}]"
    RESULTS[n] = line
    print(line)
    assert ok, line


def default_config(**changes) -> RunConfig:
    return RunConfig(**changes)


# -- 1. gradients -----------------------------------------------------------------

def _ops(rng, dtype):
    """(name, fn, inputs) for every differentiable op, each reduced to a scalar."""
    def t(*shape, shift=0.0):
        return T.Tensor((rng.standard_normal(shape) + shift).astype(dtype))

    def w(*shape):
        return rng.standard_normal(shape).astype(dtype)

    w34, w2345 = w(3, 4), w(2, 3, 4, 5)
    state = T.BatchNormState(3)
    state.running_mean[:] = rng.standard_normal(3)
    state.running_var[:] = rng.uniform(0.5, 2.0, 3)
    mask = (rng.random((2, 1, 8, 8)) < 0.3).astype(dtype)
    a_hat = normalize_adjacency(spatial_adjacency(grid_coords(2, 3))).astype(dtype)
    gcn = GraphConv2(4)
    to_cnn = GraphToCNN(4)
    head = BranchHead(4)
    for m in (gcn, to_cnn, head):
        init_parameters(m, int(rng.integers(1 << 30)))
    w_2x1x4x5 = w(2, 1, 4, 5)
    w_3x5 = w(3, 5)
    w_6x4 = w(6, 4)
    w_4x2x3 = w(4, 2, 3)
    w_2x5x4 = w(2, 5, 4)
    w_2x3x5 = w(2, 3, 5)
    w_2x4x5x6 = w(2, 4, 5, 6)
    w_2x4x3x3 = w(2, 4, 3, 3)
    w_2x3x7x9 = w(2, 3, 7, 9)
    w_2x6x5 = w(2, 6, 5)
    w_2x6x4 = w(2, 6, 4)
    w_2x4x6x8 = w(2, 4, 6, 8)
    s = T.tsum
    return [
        ("add", lambda a, b: s((a + b) * w34), [t(3, 4), t(4)]),
        ("sub", lambda a, b: s((a - b) * w34), [t(3, 4), t(3, 1)]),
        ("mul", lambda a, b: s(a * b * w34), [t(3, 4), t(3, 4)]),
        ("div", lambda a, b: s(a / b * w34), [t(3, 4), t(3, 4, shift=4.0)]),
        ("sum", lambda a: s(T.tsum(a, axis=1, keepdims=True) * w_2x1x4x5), [t(2, 3, 4, 5)]),
        ("mean", lambda a: s(T.mean(a, axis=(0, 2)) * w_3x5), [t(2, 3, 4, 5)]),
        ("relu", lambda a: s(T.relu(a) * w2345), [t(2, 3, 4, 5)]),
        ("sigmoid", lambda a: s(T.sigmoid(a) * w2345), [t(2, 3, 4, 5)]),
        ("softmax", lambda a: s(T.softmax(a, axis=1) * w2345), [t(2, 3, 4, 5)]),
        ("reshape", lambda a: s(T.reshape(a, (6, 4)) * w_6x4), [t(2, 3, 4)]),
        ("transpose", lambda a: s(T.transpose(a, (2, 0, 1)) * w_4x2x3), [t(2, 3, 4)]),
        ("concat", lambda a, b: s(T.concat([a, b], axis=1) * w_2x5x4), [t(2, 3, 4), t(2, 2, 4)]),
        ("matmul", lambda a, b: s(T.matmul(a, b) * w_2x3x5), [t(2, 3, 4), t(4, 5)]),
        ("conv3x3", lambda x, k: s(T.conv2d(x, k, stride=1, padding=1) * w_2x4x5x6),
         [t(2, 3, 5, 6), t(4, 3, 3, 3)]),
        ("conv3x3/2+bias", lambda x, k, b: s(T.conv2d(x, k, b, stride=2, padding=1) * w_2x4x3x3),
         [t(2, 3, 5, 6), t(4, 3, 3, 3), t(4)]),
        ("conv1x1/2", lambda x, k: s(T.conv2d(x, k, stride=2) * w_2x4x3x3),
         [t(2, 3, 5, 6), t(4, 3, 1, 1)]),
        ("batchnorm-train", lambda x, g, b: s(T.batch_norm(x, g, b, T.BatchNormState(3), True) * w2345[:, :3, :3]),
         [t(2, 3, 3, 5), t(3), t(3)]),
        ("batchnorm-eval", lambda x, g, b: s(T.batch_norm(x, g, b, state, False) * w2345[:, :3, :3]),
         [t(2, 3, 3, 5), t(3), t(3)]),
        ("upsample", lambda x: s(T.bilinear_upsample(x, (7, 9)) * w_2x3x7x9), [t(2, 3, 3, 4)]),
        ("dice", lambda x: dice_loss(T.sigmoid(x), mask), [t(2, 1, 8, 8)]),
        ("composite", lambda x, y: composite_loss(T.sigmoid(x), T.sigmoid(y), mask, 0.3),
         [t(2, 1, 8, 8), t(2, 1, 8, 8)]),
        ("gcn-layer", lambda x, m: s(gcn_layer(a_hat, x, m, "relu") * w_2x6x5), [t(2, 6, 4), t(4, 5)]),
        ("hgc", lambda x, m0, m1: s(gcn(a_hat, x) * w_2x6x4), [t(2, 6, 4), gcn.m0, gcn.m1]),
        ("graph-to-cnn", lambda f, p, k: s(to_cnn(f, p, (6, 8)) * w_2x4x6x8),
         [t(2, 6, 4), t(2, 4, 2, 3), to_cnn.conv.weight]),
        ("branch-head", lambda z1, z2, k: dice_loss(head([z1, z2], (8, 8)), mask),
         [t(2, 4, 4, 4), t(2, 4, 2, 2), head.conv.weight]),
    ]


def _network_check(seed: int, dtype) -> float:
    rng = np.random.default_rng(seed)
    net = HGCNNet(seed=seed)
    img = rng.random((2, 3, 64, 64)).astype(dtype)
    mask = (rng.random((2, 1, 64, 64)) < 0.3).astype(dtype)
    params = [p for _, p in net.named_parameters()]
    chosen = [params[i] for i in rng.choice(len(params), size=4, replace=False)]

    def fn(*_):
        out = net(img)
        return composite_loss(out["branch"], T.sigmoid(out["logits"]), mask, 0.5)

    return T.grad_check(fn, chosen, eps=1e-6, n_samples=2, seed=seed)


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = {32: 0.0, 64: 0.0}
    where = {}
    for bits, dtype in ((32, np.float32), (64, np.float64)):
        with T.default_dtype(dtype):
            for seed in SEEDS:
                rng = np.random.default_rng(seed)
                for name, fn, inputs in _ops(rng, dtype):
                    err = T.grad_check(fn, inputs, eps=1e-6, n_samples=8, seed=seed)
                    if err > worst[bits]:
                        worst[bits], where[bits] = err, name
                err = _network_check(seed, dtype)
                if err > worst[bits]:
                    worst[bits], where[bits] = err, "full-network"
    took = time.perf_counter() - t0
    ok = worst[32] < 1e-3 and worst[64] < 1e-6 and took < 120
    report(1, "gradient suite", ok,
           f"32-bit max {worst[32]:.2e} ({where.get(32)}), 64-bit max {worst[64]:.2e} "
           f"({where.get(64)}), {len(SEEDS)} seeds, {took:.0f}s")


# -- 2. adjacency -----------------------------------------------------------------

def test_criterion_2_adjacency():
    rng = np.random.default_rng(0)
    worst_asym, worst_rho, cases = 0.0, 0.0, 0
    for _ in range(60):
        h = int(rng.integers(1, 11))
        w = int(rng.integers(1, 100 // h + 1))
        a = spatial_adjacency(grid_coords(h, w), float(rng.uniform(0.3, 5.0)))
        for adj in (a, a * rng.uniform(0.0, 1.0, a.shape) * (a > 0)):
            adj = np.triu(adj, 1) + np.triu(adj, 1).T
            a_hat = normalize_adjacency(adj)
            worst_asym = max(worst_asym, float(np.abs(a_hat - a_hat.T).max()))
            worst_rho = max(worst_rho, float(np.abs(np.linalg.eigvalsh(a_hat)).max()))
            cases += 1
    two = normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))
    exact = bool(np.all(two == 0.5))
    ok = worst_asym == 0.0 and worst_rho <= 1 + 1e-6 and exact
    report(2, "adjacency suite", ok,
           f"{cases} graphs N<=100, max asymmetry {worst_asym:.1e}, spectral radius max {worst_rho:.9f}, "
           f"2-node case exact={exact}")


# -- 3. loss and metric oracle ------------------------------------------------------

def _brute(pred, gt):
    tp = fp = tn = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p >= 0.5:
            tp, fp = (tp + 1, fp) if g else (tp, fp + 1)
        else:
            fn, tn = (fn + 1, tn) if g else (fn, tn + 1)
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / den ** 0.5 if den else 0.0
    dice = 1 - (2 * tp + 1.0) / ((tp + fp) + (tp + fn) + 1.0)
    return (tp, fp, tn, fn), f1, mcc, dice


def test_criterion_3_loss_metric_oracle():
    rng = np.random.default_rng(0)
    mismatches, in_range = 0, True
    with T.default_dtype(np.float64):
        for _ in range(200):
            gt = (rng.random((8, 8)) < rng.uniform(0.05, 0.6)).astype(np.float64)
            pred = (rng.random((8, 8)) < rng.uniform(0.05, 0.6)).astype(np.float64)
            counts, f1, mcc, dice = _brute(pred, gt)
            r = evaluate(pred, gt)
            d = dice_loss(pred, gt).item()
            mismatches += ((r.tp, r.fp, r.tn, r.fn) != counts) + (r.f1 != f1) + (r.mcc != mcc) + (d != dice)
            in_range &= 0.0 <= d <= 1.0
    gt = (rng.random((8, 8)) < 0.3).astype(np.float32)
    pc, pb = rng.random((8, 8)).astype(np.float32), rng.random((8, 8)).astype(np.float32)
    l_b = composite_loss(pc, pb, gt, 0.0).item()
    l_c = composite_loss(pc, pb, gt, 1.0).item()
    affine = max(abs(composite_loss(pc, pb, gt, a).item() - (l_b + a * (l_c - l_b)))
                 for a in (0.0, 0.25, 0.5, 0.75, 1.0))
    ok = mismatches == 0 and in_range and affine < 1e-7
    report(3, "loss/metric oracle", ok,
           f"200 mask pairs, {mismatches} mismatches, dice in [0,1]={in_range}, affine dev {affine:.1e}")


# -- 4. training ------------------------------------------------------------------

def _hgr_c_runs(repeats: int):
    cfg = default_config(repeats=repeats)
    return train_runs(cfg, ROOT / "ablation", "hgr-c-w-ls")


@pytest.mark.slow
def test_criterion_4_training():
    run_dir = ROOT / "ablation" / "hgr-c-w-ls" / "seed0"
    cold = not (run_dir / "best.ckpt").exists()
    t0 = time.perf_counter()
    _hgr_c_runs(1)
    took = time.perf_counter() - t0
    lines = (run_dir / "train.csv").read_text().splitlines()
    final_f1 = float(lines[-1].split(",")[2])
    best_f1 = max(float(r.split(",")[2]) for r in lines[1:])
    ok = lines[0] == "epoch,loss,f1,mcc" and len(lines) == 31 and final_f1 >= 0.70 and took < 1800
    report(4, "training acceptance", ok,
           f"final-epoch F1 {final_f1:.4f} (best {best_f1:.4f}) >= 0.70, "
           f"{'trained' if cold else 'reloaded'} in {took:.0f}s")


# -- 5. ablation ------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_ablation():
    rows = ablate(default_config(repeats=3), ROOT / "ablation")
    f1 = {r[0]: float(r[4]) for r in rows}
    base = f1["backbone-only"]
    singles = {k: v for k, v in f1.items() if k.startswith("+GR(")}
    full_ok = f1["+HGR-C(w/ LS)"] > base
    singles_ok = all(v >= base - 0.01 for v in singles.values())
    detail = ", ".join(f"{k} {v:.4f}" for k, v in f1.items())
    report(5, "ablation direction", len(rows) == 8 and full_ok and singles_ok,
           f"median of 3 seeds: {detail}")


# -- 6. speed ordering ------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_speed():
    rows = sweep_downsample(default_config(), ROOT / "sweep_downsample")
    sec = [float(r[-1]) for r in rows]
    ok = len(rows) == 3 and sec[0] < sec[1] < sec[2]
    report(6, "speed ordering", ok,
           " < ".join(f"{r[0]} {float(r[-1]) * 1000:.0f}ms" for r in rows) + f" at {rows[0][-2]}px")


# -- 7. robustness ----------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_robustness():
    runs = _hgr_c_runs(3)
    cfg = default_config()
    models = [m for _, m, _ in runs]
    out = ROOT / "robustness"
    rows = robustness(cfg, models, out)
    _, test_set = load_data(cfg)
    null_dev = max(abs(evaluate_model(m, test_set, attack=AttackSpec(kind, grid[0]), seed=cfg.seed).f1 - r.f1)
                   for (_, m, r) in runs for kind, grid in ATTACK_GRIDS.items())
    covered = {(r[0], float(r[1])) for r in rows} == {(k, float(s)) for k, g in ATTACK_GRIDS.items() for s in g}
    trends = {kind: [float(r[2]) for r in rows if r[0] == kind] for kind in ("gaussian-blur", "mean-blur")}
    monotone = all(all(b <= a for a, b in zip(seq, seq[1:])) for seq in trends.values())
    ok = null_dev <= 1e-6 and covered and len(rows) == sum(map(len, ATTACK_GRIDS.values())) and monotone
    detail = "; ".join(f"{k} " + "/".join(f"{v:.3f}" for v in seq) for k, seq in trends.items())
    report(7, "robustness harness", ok,
           f"null-attack max dev {null_dev:.1e}, {len(rows)} grid points, median blur F1 {detail}")


# -- 8. reproducibility -----------------------------------------------------------

def test_criterion_8_reproducibility(tmp_path):
    cfg = RunConfig(epochs=2, n_train=48, n_test=12, batch_size=8)
    files = ("train.csv", "best.ckpt", "last.ckpt", "config.txt")
    blobs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        train(cfg, d, resume=False)
        blobs.append([(d / f).read_bytes() for f in files])
    same = blobs[0] == blobs[1]
    # checkpoint round trip through a fresh model and through the CLI
    _, test_set = load_data(cfg)
    model, _ = train(cfg, tmp_path / "run0")
    before = evaluate_model(model, test_set)
    fresh = build_model(cfg)
    load_checkpoint(tmp_path / "run0" / "best.ckpt", fresh)
    after = evaluate_model(fresh, test_set)
    cfg_file = tmp_path / "cfg.txt"
    cfg_file.write_text((tmp_path / "run0" / "config.txt").read_text())
    evals = []
    for k in range(2):
        out = tmp_path / f"eval{k}"
        code = cli_main(["eval", "--config", str(cfg_file), "--out", str(out),
                         "--checkpoint", str(tmp_path / "run0" / "best.ckpt")])
        evals.append((code, (out / "eval.csv").read_bytes()))
    ok = same and before == after and evals[0] == evals[1] and evals[0][0] == 0
    report(8, "reproducibility", ok,
           f"rerun bytes identical={same}, round-trip scores identical={before == after}, "
           f"CLI eval CSV identical={evals[0] == evals[1]}")

