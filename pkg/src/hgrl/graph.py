"""Grid-graph construction over down-sampled pyramid maps."""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError
from .nn import ConvBNReLU, Module


def _log2(s: int) -> int:
    if s < 1 or s & (s - 1):
        raise ConfigError(f"down-sampling factor must be 1 or a power of two, got {s}")
    return s.bit_length() - 1


class Downsample(Module):
    """log2(s) stages of 3x3 stride-2 conv + batch norm + relu; s = 1 is the identity."""

    def __init__(self, channels: int, factor: int):
        self.factor = factor
        self.stages = [ConvBNReLU(channels, channels, 3, stride=2) for _ in range(_log2(factor))]

    def forward(self, p):
        H, W = p.shape[-2:]
        if H % self.factor or W % self.factor:
            raise ConfigError(f"map {H}x{W} not divisible by factor {self.factor}")
        for stage in self.stages:
            p = stage(p)
        return p


def grid_coords(h: int, w: int) -> np.ndarray:
    """(row, col) of every cell in row-major order."""
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.stack([rows, cols], axis=1)


def spatial_adjacency(coords: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Gaussian affinity of grid distances, zero diagonal.

    This is the single place that decides how distance becomes edge weight.
    """
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = (diff.astype(np.float64) ** 2).sum(-1)
    a = np.exp(-d2 / (2.0 * sigma ** 2))
    np.fill_diagonal(a, 0.0)
    return a


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = np.asarray(a, dtype=np.float64)
    a_tilde = a + np.eye(a.shape[0])
    d = a_tilde.sum(axis=1)
    # one rounding per entry; the product d_i d_j commutes, so the result is exactly symmetric
    return a_tilde / np.sqrt(np.outer(d, d))


@dataclass
class GridGraph:
    height: int
    width: int
    coords: np.ndarray
    adjacency: np.ndarray
    norm_adjacency: np.ndarray
    node_features: T.Tensor  # [B, N, C]

    @property
    def node_count(self) -> int:
        return self.height * self.width


_cache: dict = {}
_cache_lock = threading.Lock()


def cached_norm_adjacency(h: int, w: int, sigma: float, dtype) -> tuple:
    key = (h, w, float(sigma), np.dtype(dtype).str)
    with _cache_lock:
        hit = _cache.get(key)
        if hit is None:
            coords = grid_coords(h, w)
            a = spatial_adjacency(coords, sigma)
            hit = (coords, a, normalize_adjacency(a).astype(dtype))
            _cache[key] = hit
    return hit


def flatten_nodes(p) -> T.Tensor:
    """[B, C, H, W] -> [B, H*W, C], nodes in row-major cell order."""
    B, C, H, W = p.shape
    return T.transpose(T.reshape(p, (B, C, H * W)), (0, 2, 1))


def unflatten_nodes(f, h: int, w: int) -> T.Tensor:
    """Inverse of :func:`flatten_nodes`."""
    B, N, C = f.shape
    if N != h * w:
        raise T.DimensionError(f"{N} nodes cannot fill a {h}x{w} grid")
    return T.reshape(T.transpose(f, (0, 2, 1)), (B, C, h, w))


def build_graph(p, sigma: float = 1.0) -> GridGraph:
    p = T.as_tensor(p)
    _, _, h, w = p.shape
    coords, a, a_hat = cached_norm_adjacency(h, w, sigma, p.data.dtype)
    return GridGraph(h, w, coords, a, a_hat, flatten_nodes(p))
