"""Training loop, evaluation and checkpointing."""
from __future__ import annotations

import csv
import functools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, format_config
from .data import GenParams, apply_attack, augment, build_split, split_seeds
from .metrics import EvalReport, composite_loss, confusion, dice_loss
from .model import HGCNNet

log = logging.getLogger(__name__)

TRAIN_CSV_HEADER = ("epoch", "loss", "f1", "mcc")
EVAL_BATCH = 50


class TrainingError(RuntimeError):
    """Raised when optimization diverges."""


class Adam:
    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self, names) -> dict:
        out = {"optim.t": np.array([self.t], dtype=np.int64)}
        for name, m, v in zip(names, self.m, self.v):
            out[f"optim.m.{name}"] = m
            out[f"optim.v.{name}"] = v
        return out

    def load(self, state: dict, names) -> None:
        self.t = int(state["optim.t"][0])
        for i, name in enumerate(names):
            self.m[i][:] = state[f"optim.m.{name}"]
            self.v[i][:] = state[f"optim.v.{name}"]


def build_model(cfg: RunConfig) -> HGCNNet:
    return HGCNNet(levels=cfg.levels, factors=cfg.factors, sigma=cfg.sigma, fusion=cfg.fusion,
                   eq4_stride=cfg.eq4_stride, softmax_axis=cfg.softmax_axis, input_mode=cfg.input_mode,
                   seed=cfg.seed)


@functools.lru_cache(maxsize=4)
def _dataset(data_seed: int, n_train: int, n_test: int, size: int) -> tuple:
    train_seeds, test_seeds = split_seeds(data_seed, n_train, n_test)
    params = GenParams()
    return tuple(build_split(train_seeds, size, params)), tuple(build_split(test_seeds, size, params))


def load_data(cfg: RunConfig) -> tuple:
    return _dataset(cfg.data_seed, cfg.n_train, cfg.n_test, cfg.image_size)


def stack(samples) -> tuple:
    images = np.stack([s.image for s in samples]).astype(T.get_default_dtype())
    masks = np.stack([s.mask for s in samples])[:, None].astype(T.get_default_dtype())
    return images, masks


def compute_loss(model: HGCNNet, cfg: RunConfig, images, masks) -> T.Tensor:
    out = model(images)
    final = T.sigmoid(out["logits"])
    if cfg.loss == "lb" or out["branch"] is None:
        return dice_loss(final, masks)
    return composite_loss(out["branch"], final, masks, cfg.alpha)


def predict(model: HGCNNet, images: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    model.eval()
    parts = [model.predict(images[i:i + batch]) for i in range(0, len(images), batch)]
    return np.concatenate(parts)


def evaluate_model(model: HGCNNet, samples, attack=None, seed: int = 0) -> EvalReport:
    """Pooled confusion counts over ``samples``, optionally after an attack on the images."""
    images, masks = stack(samples)
    if attack is not None:
        images = np.stack([apply_attack(img, attack, seed + i)
                           for i, img in enumerate(images)]).astype(images.dtype)
    return confusion(predict(model, images), masks)


def inference_times(models, images: np.ndarray, passes: int = 3, batch: int = 1) -> list:
    """Mean wall-clock seconds per image for each model over ``passes`` warm passes.

    Passes are interleaved across models so that slow drift in machine load
    lands on every model alike.
    """
    for model in models:
        predict(model, images[:batch], batch)  # warm-up: fills the adjacency cache
    totals = [0.0] * len(models)
    for _ in range(passes):
        for k, model in enumerate(models):
            t0 = time.perf_counter()
            predict(model, images, batch)
            totals[k] += time.perf_counter() - t0
    return [t / (passes * len(images)) for t in totals]


def inference_time(model: HGCNNet, images: np.ndarray, passes: int = 3, batch: int = 1) -> float:
    return inference_times([model], images, passes, batch)[0]


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)  # (epoch, loss, f1, mcc)
    infer_seconds: list = field(default_factory=list)
    best_f1: float = -1.0
    best_epoch: int = -1


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt_row(epoch, loss, report) -> tuple:
    return (str(epoch), f"{loss:.6f}", f"{report.f1:.6f}", f"{report.mcc:.6f}")


def save_checkpoint(path, model: HGCNNet, extra: dict | None = None) -> None:
    arrays = model.state_dict()
    arrays.update(extra or {})
    T.save_arrays(path, arrays)


def load_checkpoint(path, model: HGCNNet) -> dict:
    state = T.load_arrays(path)
    model.load_state_dict(state)
    return state


def train(cfg: RunConfig, out_dir=None, resume: bool = True) -> tuple:
    """Train one model; writes train.csv, config.txt, last.ckpt and best.ckpt.

    Returns the model restored to its best-F1 state and the run record.
    """
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_text = format_config(cfg)
    train_set, test_set = load_data(cfg)
    model = build_model(cfg)
    names = [n for n, _ in model.named_parameters()]
    opt = Adam(model.parameters(), cfg.lr)
    record = RunRecord()
    start = 0

    last = out / "last.ckpt"
    if resume and last.exists() and (out / "config.txt").exists() \
            and (out / "config.txt").read_text() == cfg_text:
        state = load_checkpoint(last, model)
        opt.load(state, names)
        start = int(state["meta.epoch"][0]) + 1
        record.best_f1 = float(state["meta.best_f1"][0])
        record.best_epoch = int(state["meta.best_epoch"][0])
        with open(out / "train.csv", newline="") as fh:
            record.rows = [tuple(r) for r in list(csv.reader(fh))[1:start + 1]]
        log.info("resuming %s at epoch %d", out, start)
    (out / "config.txt").write_text(cfg_text)

    test_images, test_masks = stack(test_set)
    n = len(train_set)
    for epoch in range(start, cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            batch = [train_set[i] for i in idx]
            if cfg.augment:
                batch = [augment(s, seed=[cfg.seed, epoch, int(i)], noise_max=cfg.aug_noise)
                         for s, i in zip(batch, idx)]
            images, masks = stack(batch)
            model.zero_grad()
            loss = compute_loss(model, cfg, images, masks)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss {float(loss.data)} at epoch {epoch}, "
                                    f"batch starting {b0}; lr={opt.lr:g}")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        t0 = time.perf_counter()
        report = confusion(predict(model, test_images), test_masks)
        record.infer_seconds.append((time.perf_counter() - t0) / len(test_images))
        record.rows.append(_fmt_row(epoch, float(np.mean(losses)), report))
        if report.f1 > record.best_f1:
            record.best_f1, record.best_epoch = report.f1, epoch
            save_checkpoint(out / "best.ckpt", model)
        meta = {"meta.epoch": np.array([epoch], dtype=np.int64),
                "meta.best_f1": np.array([record.best_f1]),
                "meta.best_epoch": np.array([record.best_epoch], dtype=np.int64)}
        meta.update(opt.state(names))
        save_checkpoint(last, model, meta)
        _write_csv(out / "train.csv", TRAIN_CSV_HEADER, record.rows)
        log.info("epoch %d loss %.4f f1 %.4f mcc %.4f", epoch, np.mean(losses), report.f1, report.mcc)

    load_checkpoint(out / "best.ckpt", model)
    return model, record
