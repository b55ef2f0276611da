"""Synthetic manipulated images, training augmentations and the attack suite."""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import fft, ndimage

from .config import ConfigError
from .tensor import bilinear_matrix

KINDS = ("copy-move", "splice", "removal")


class GenerationError(RuntimeError):
    """Raised when a sample cannot satisfy its area constraints."""


@dataclass
class GenParams:
    min_frac: float = 0.02
    max_frac: float = 0.25
    noise_range: tuple = (0.012, 0.018)
    donor_noise: tuple = ((0.002, 0.005), (0.03, 0.045))
    subpixel: tuple = (0.3, 0.7)
    pattern_amp: float = 0.025
    max_tries: int = 200


@dataclass
class ManipSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1], multiples of 1/255
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    kind: str
    seed: int
    base: np.ndarray | None = field(default=None, repr=False)
    info: dict = field(default_factory=dict, repr=False)

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.mean())


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


# 2x2 colour-filter-like template; any non-zero shift mod 2 changes the R and B planes
_TEMPLATE = np.array([
    [[1, 0], [0, 0]],
    [[0, 1], [1, 0]],
    [[0, 0], [0, 1]],
], dtype=np.float64)
_TEMPLATE -= _TEMPLATE.mean(axis=(1, 2), keepdims=True)


def _sensor_pattern(size: int, phase=(0, 0)) -> np.ndarray:
    reps = size // 2 + 1
    tiled = np.tile(_TEMPLATE, (1, reps, reps))
    return tiled[:, phase[0]:phase[0] + size, phase[1]:phase[1] + size]


def base_image(rng: np.random.Generator, size: int, params: GenParams, phase=(0, 0),
               noise: float | None = None) -> np.ndarray:
    """Smooth gradients, a few flat shapes, white noise and a faint periodic trace."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.empty((3, size, size))
    for c in range(3):
        a, bx, by = rng.uniform(0.25, 0.75), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)
        img[c] = a + bx * (xx - 0.5) + by * (yy - 0.5)
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.05, 0.95, size=3)
        alpha = rng.uniform(0.5, 1.0)
        region = _random_shape(rng, size, rng.uniform(0.01, 0.2))
        img[:, region] = (1 - alpha) * img[:, region] + alpha * color[:, None]
    if noise is None:
        noise = rng.uniform(*params.noise_range)
    img += rng.normal(0.0, noise, size=img.shape)
    img += params.pattern_amp * rng.uniform(0.8, 1.2) * _sensor_pattern(size, phase)
    return quantize(img)


def _random_shape(rng: np.random.Generator, size: int, frac: float) -> np.ndarray:
    """Boolean ellipse or rectangle covering roughly ``frac`` of the image."""
    yy, xx = np.mgrid[0:size, 0:size]
    area = frac * size * size
    aspect = rng.uniform(0.5, 2.0)
    cy, cx = rng.uniform(0, size, size=2)
    if rng.random() < 0.5:
        ry = np.sqrt(area * aspect / np.pi)
        rx = area / (np.pi * ry)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    h = np.sqrt(area * aspect)
    w = area / h
    return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)


def _sample_mask(rng, size: int, params: GenParams, margin: int = 0) -> np.ndarray:
    for _ in range(params.max_tries):
        mask = _random_shape(rng, size, rng.uniform(params.min_frac, params.max_frac))
        if margin:
            inner = np.zeros_like(mask)
            inner[margin:size - margin, margin:size - margin] = True
            mask &= inner
        frac = mask.mean()
        if params.min_frac <= frac <= params.max_frac:
            return mask
    raise GenerationError(f"no mask with area in [{params.min_frac}, {params.max_frac}] "
                          f"after {params.max_tries} tries")


def _odd_shift(rng, lo: int, hi: int) -> tuple:
    while True:
        dy, dx = (int(v) * rng.choice([-1, 1]) for v in rng.integers(lo, hi, size=2))
        if dy % 2 or dx % 2:
            return dy, dx


def _shift_fits(mask: np.ndarray, dy: float, dx: float) -> bool:
    ys, xs = np.nonzero(mask)
    n = mask.shape[0]
    return (np.floor(ys.min() - dy) >= 0 and np.ceil(ys.max() - dy) < n
            and np.floor(xs.min() - dx) >= 0 and np.ceil(xs.max() - dx) < n)


def resample_source(img: np.ndarray, ys, xs, dy: float, dx: float) -> np.ndarray:
    """Bilinear samples of ``img`` at (ys - dy, xs - dx); fractional offsets smooth the noise."""
    coords = np.stack([ys - dy, xs - dx])
    return np.stack([ndimage.map_coordinates(img[c].astype(np.float64), coords, order=1)
                     for c in range(img.shape[0])])


def local_mean_fill(img: np.ndarray, mask: np.ndarray, iters: int = 60) -> np.ndarray:
    """Fill masked pixels by repeatedly averaging their 3x3 neighbourhood."""
    out = img.astype(np.float64).copy()
    ring = ndimage.binary_dilation(mask, iterations=2) & ~mask
    for c in range(3):
        out[c][mask] = out[c][ring].mean() if ring.any() else out[c].mean()
    for _ in range(iters):
        smooth = ndimage.uniform_filter(out, size=(1, 3, 3), mode="reflect")
        out[:, mask] = smooth[:, mask]
    return out


def generate(kind: str, seed: int, size: int = 64, params: GenParams | None = None) -> ManipSample:
    """Deterministic manipulated image plus ground-truth mask for one seed."""
    params = params or GenParams()
    if kind not in KINDS:
        raise ConfigError(f"unknown manipulation kind {kind!r}")
    if size % 32:
        raise ConfigError(f"image size {size} must be divisible by 32")
    rng = np.random.default_rng([seed, zlib.crc32(kind.encode())])
    base = base_image(rng, size, params)
    img = base.copy()
    if kind == "copy-move":
        for _ in range(params.max_tries):
            mask = _sample_mask(rng, size, params)
            dy, dx = _odd_shift(rng, size // 8, size // 2)
            dy += float(np.sign(dy) * rng.uniform(*params.subpixel))
            dx += float(np.sign(dx) * rng.uniform(*params.subpixel))
            if _shift_fits(mask, dy, dx):
                break
        else:
            raise GenerationError("no copy-move placement keeps the source inside the image")
        ys, xs = np.nonzero(mask)
        img[:, ys, xs] = quantize(resample_source(base, ys, xs, dy, dx))
        info = {"shift": (dy, dx)}
    elif kind == "splice":
        mask = _sample_mask(rng, size, params)
        phase = tuple(int(v) for v in rng.permutation([[0, 1], [1, 0], [1, 1]])[0])
        band = params.donor_noise[int(rng.integers(len(params.donor_noise)))]
        donor_noise = rng.uniform(*band)
        donor = base_image(rng, size, params, phase=phase, noise=donor_noise)
        img[:, mask] = donor[:, mask]
        info = {"donor_noise": donor_noise, "phase": phase}
    else:
        mask = _sample_mask(rng, size, params, margin=2)
        img = quantize(local_mean_fill(base, mask))
        img[:, ~mask] = base[:, ~mask]
        info = {}
    return ManipSample(img.astype(np.float32), mask.astype(np.uint8), kind, seed, base, info)


def build_split(seeds, size: int = 64, params: GenParams | None = None) -> list:
    """Samples for consecutive seeds, kinds cycling copy-move, splice, removal."""
    return [generate(KINDS[i % len(KINDS)], int(s), size, params) for i, s in enumerate(seeds)]


def split_seeds(data_seed: int, n_train: int, n_test: int) -> tuple:
    """Disjoint seed ranges for the train and test splits."""
    base = data_seed * 1_000_000
    return (range(base, base + n_train), range(base + 500_000, base + 500_000 + n_test))


# -- augmentation ---------------------------------------------------------------

def hflip(img: np.ndarray, mask: np.ndarray) -> tuple:
    return img[..., ::-1].copy(), mask[..., ::-1].copy()


def augment(sample: ManipSample, seed: int, noise_max: float = 0.005) -> ManipSample:
    """Random subset of flip, rotation, pad+crop and additive noise.

    Geometric steps move image and mask together and never resample between
    pixel centres, so the mask stays binary.
    """
    rng = np.random.default_rng(seed)
    img, mask = sample.image, sample.mask
    if rng.random() < 0.5:
        img, mask = hflip(img, mask)
    if rng.random() < 0.5:
        img, mask = img[:, ::-1].copy(), mask[::-1].copy()
    if rng.random() < 0.5:
        k = int(rng.integers(1, 4))
        img, mask = np.rot90(img, k, axes=(1, 2)).copy(), np.rot90(mask, k).copy()
    if rng.random() < 0.5:
        size = mask.shape[0]
        pad = int(rng.integers(1, size // 8 + 1))
        img = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        mask = np.pad(mask, pad, mode="reflect")
        oy, ox = rng.integers(0, 2 * pad + 1, size=2)
        img = img[:, oy:oy + size, ox:ox + size].copy()
        mask = mask[oy:oy + size, ox:ox + size].copy()
    if rng.random() < 0.5:
        img = quantize(img + rng.normal(0.0, rng.uniform(0.0, noise_max), size=img.shape))
    return ManipSample(img.astype(np.float32), mask, sample.kind, sample.seed)


# -- attacks ----------------------------------------------------------------------

ATTACK_GRIDS = {
    "jpeg": (100, 90, 80, 70, 60, 50),
    "resize": (1.0, 0.9, 0.8, 0.7, 0.6, 0.5),
    "gaussian-blur": (1, 3, 5, 7),
    "mean-blur": (1, 3, 5, 7),
    "rotation": (0, 5, 10, 15, 30),
    "noise": (0.0, 0.01, 0.02, 0.05),
}
NULL_STRENGTH = {kind: grid[0] for kind, grid in ATTACK_GRIDS.items()}

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    strength: float

    def __post_init__(self):
        if self.kind not in ATTACK_GRIDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.strength not in ATTACK_GRIDS[self.kind]:
            raise ConfigError(f"{self.kind} strength {self.strength} not in {ATTACK_GRIDS[self.kind]}")

    @property
    def is_null(self) -> bool:
        return self.strength == NULL_STRENGTH[self.kind]


def attack_grid() -> list:
    return [AttackSpec(kind, s) for kind, grid in ATTACK_GRIDS.items() for s in grid]


def quality_table(quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(np.floor((LUMA_TABLE * scale + 50.0) / 100.0), 1.0)


def jpeg_proxy(img: np.ndarray, quality: int) -> np.ndarray:
    """Quantize 8x8 block DCT coefficients of every channel with the scaled luma table."""
    C, H, W = img.shape
    if H % 8 or W % 8:
        raise ConfigError(f"jpeg proxy needs sides divisible by 8, got {H}x{W}")
    q = quality_table(quality)
    x = np.round(img.astype(np.float64) * 255.0) - 128.0
    blocks = x.reshape(C, H // 8, 8, W // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / q) * q
    rec = fft.idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(C, H, W) + 128.0
    return quantize(rec / 255.0)


def _resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    ry = bilinear_matrix(h, img.shape[1], np.float64)
    rx = bilinear_matrix(w, img.shape[2], np.float64)
    return ry @ img.astype(np.float64) @ rx.T


def _gaussian_kernel(k: int) -> np.ndarray:
    sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
    x = np.arange(k) - (k - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def apply_attack(img: np.ndarray, spec: AttackSpec, seed: int = 0) -> np.ndarray:
    """Degrade ``img`` [3, H, W]; output keeps the input size so masks stay aligned."""
    if spec.is_null:
        return img.copy()
    kind, s = spec.kind, spec.strength
    H, W = img.shape[1:]
    if kind == "jpeg":
        return jpeg_proxy(img, int(s))
    if kind == "resize":
        small = _resize(img, max(1, round(H * s)), max(1, round(W * s)))
        out = _resize(small, H, W)
    elif kind == "gaussian-blur":
        g = _gaussian_kernel(int(s))
        out = ndimage.convolve1d(img.astype(np.float64), g, axis=1, mode="reflect")
        out = ndimage.convolve1d(out, g, axis=2, mode="reflect")
    elif kind == "mean-blur":
        out = ndimage.uniform_filter(img.astype(np.float64), size=(1, int(s), int(s)), mode="reflect")
    elif kind == "rotation":
        out = ndimage.rotate(img.astype(np.float64), s, axes=(1, 2), reshape=False, order=1,
                             mode="reflect")
    else:
        rng = np.random.default_rng([seed, zlib.crc32(f"{kind}:{s}".encode())])
        out = img + rng.normal(0.0, s, size=img.shape)
    return quantize(out)


# -- on-disk format ------------------------------------------------------------------

MANIFEST_FIELDS = ("filename", "kind", "seed", "mask_fraction")


def save_dataset(samples, directory) -> Path:
    """Write ``<stem>.ppm`` images, ``<stem>_mask.pgm`` masks and ``manifest.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for s in samples:
            stem = f"{s.kind}_{s.seed}"
            rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(rgb, "RGB").save(d / f"{stem}.ppm")
            Image.fromarray(s.mask * 255, "L").save(d / f"{stem}_mask.pgm")
            writer.writerow([f"{stem}.ppm", s.kind, s.seed, f"{s.mask_fraction:.6f}"])
    return d


def load_dataset(directory) -> list:
    d = Path(directory)
    samples = []
    with open(d / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rgb = np.asarray(Image.open(d / row["filename"]).convert("RGB"), dtype=np.float32)
            mask_name = row["filename"][:-4] + "_mask.pgm"
            mask = (np.asarray(Image.open(d / mask_name)) > 127).astype(np.uint8)
            samples.append(ManipSample(rgb.transpose(2, 0, 1) / 255.0, mask, row["kind"],
                                       int(row["seed"])))
    return samples
