"""Dice losses and pixel-level F1 / MCC."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError

DICE_SMOOTH = 1.0
CSV_HEADER = ("config", "f1", "mcc", "tp", "fp", "tn", "fn")


def dice_loss(pred, gt, smooth: float = DICE_SMOOTH) -> T.Tensor:
    """1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps) over the whole tensor."""
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    if pred.shape != gt.shape:
        raise T.DimensionError(f"dice_loss: prediction {pred.shape} vs mask {gt.shape}")
    inter = T.tsum(pred * gt)
    denom = T.tsum(pred) + T.tsum(gt) + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def composite_loss(branch_pred, final_pred, gt, alpha: float) -> T.Tensor:
    """alpha * L_C(branch) + (1 - alpha) * L_B(final)."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    l_b = dice_loss(final_pred, gt)
    if alpha == 0.0:
        return l_b
    return alpha * dice_loss(branch_pred, gt) + (1.0 - alpha) * l_b


@dataclass
class EvalReport:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    @property
    def mcc(self) -> float:
        tp, fp, tn, fn = self.tp, self.fp, self.tn, self.fn
        denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        if denom == 0:
            return 0.0
        return (tp * tn - fp * fn) / math.sqrt(denom)

    def __add__(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.tp + other.tp, self.fp + other.fp,
                          self.tn + other.tn, self.fn + other.fn)

    def csv_row(self, config_id: str) -> list:
        return [config_id, f"{self.f1:.6f}", f"{self.mcc:.6f}", self.tp, self.fp, self.tn, self.fn]


def confusion(pred, gt, threshold: float = 0.5) -> EvalReport:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise T.DimensionError(f"evaluate: prediction {pred.shape} vs mask {gt.shape}")
    p = pred >= threshold
    g = gt > 0.5
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return EvalReport(tp, fp, p.size - tp - fp - fn, fn)


def evaluate(pred, gt, threshold: float = 0.5) -> EvalReport:
    """Pooled confusion counts; F1 and MCC are properties of the report."""
    return confusion(pred, gt, threshold)
