"""Small residual encoder with a feature pyramid, and the fusing decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .config import ConfigError
from .nn import Conv2d, ConvBNReLU, Module

STRIDES = (4, 8, 16, 32)
STAGE_WIDTHS = (16, 32, 64, 128)
PYRAMID_WIDTH = 32
RESIDUAL_GAIN = 10.0
INPUT_MODES = ("rgb", "residual", "both")


def noise_residual(image: np.ndarray, gain: float = RESIDUAL_GAIN) -> np.ndarray:
    """Fixed high-pass view: each channel minus its 3x3 box mean, scaled up.

    Manipulation traces live in the noise floor, a few grey levels deep, and
    a freshly initialised encoder latches onto image content instead.
    """
    image = np.asarray(image)
    smooth = ndimage.uniform_filter(image, size=(1,) * (image.ndim - 2) + (3, 3), mode="reflect")
    return ((image - smooth) * gain).astype(image.dtype)


@dataclass
class FeaturePyramid:
    levels: list  # P1..P4, each [B, C, H_i, W_i]
    strides: tuple = STRIDES

    def __getitem__(self, i: int):
        """1-based level access, P[1] is the finest map."""
        return self.levels[i - 1]

    @property
    def batch(self) -> int:
        return self.levels[0].shape[0]


class ResidualBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        self.conv1 = ConvBNReLU(cin, cout, 3, stride)
        self.conv2 = ConvBNReLU(cout, cout, 3, 1, act=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = ConvBNReLU(cin, cout, 1, stride, act=False)

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return T.relu(self.conv2(self.conv1(x)) + skip)


class Encoder(Module):
    """Stem at stride 2, then four two-block residual stages each entered at stride 2."""

    def __init__(self, widths=STAGE_WIDTHS, out_width: int = PYRAMID_WIDTH, input_mode: str = "both"):
        if input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}, got {input_mode!r}")
        self.input_mode = input_mode
        self.stem = ConvBNReLU(6 if input_mode == "both" else 3, widths[0], 3, stride=2)
        self.stages = []
        cin = widths[0]
        for w in widths:
            self.stages.append(_Seq([ResidualBlock(cin, w, 2), ResidualBlock(w, w, 1)]))
            cin = w
        self.lateral = [Conv2d(w, out_width, 1, bias=True) for w in widths]

    def forward(self, image) -> FeaturePyramid:
        _, _, H, W = image.shape
        if H % 32 or W % 32:
            raise ConfigError(f"input size {H}x{W} must be divisible by 32")
        x = self.stem(self.prepare(image))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        # top-down pathway, coarsest first
        p = self.lateral[3](feats[3])
        levels = [p]
        for i in (2, 1, 0):
            lat = self.lateral[i](feats[i])
            p = lat + T.bilinear_upsample(p, lat.shape[-2:])
            levels.append(p)
        return FeaturePyramid(levels[::-1])


    def prepare(self, image) -> T.Tensor:
        """Stem input for the configured mode; the image itself never needs a gradient."""
        if self.input_mode == "rgb":
            return T.as_tensor(image)
        data = image.data if isinstance(image, T.Tensor) else np.asarray(image)
        res = noise_residual(data)
        if self.input_mode == "residual":
            return T.Tensor(res)
        return T.Tensor(np.concatenate([data, res], axis=1))


class _Seq(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Decoder(Module):
    """Top-down decoder; level-i graph maps are fused right after the stage-i upsample.

    ``fused_levels`` lists the levels that will receive a graph map, which
    only matters for concat fusion since it owns a width-restoring conv per level.
    """

    def __init__(self, width: int = PYRAMID_WIDTH, fusion: str = "add", fused_levels=()):
        if fusion not in ("add", "concat"):
            raise ConfigError(f"fusion must be 'add' or 'concat', got {fusion!r}")
        self.fusion = fusion
        self.blocks = {i: ConvBNReLU(width, width, 3) for i in (1, 2, 3, 4)}
        self.merge = {}
        if fusion == "concat":
            self.merge = {i: Conv2d(2 * width, width, 3, bias=True) for i in fused_levels}
        self.head = Conv2d(width, 1, 1, bias=True)

    def fuse(self, level: int, x, z):
        if z is None:
            return x
        if z.shape != x.shape:
            raise T.DimensionError(f"level {level}: graph map {z.shape} vs decoder stage {x.shape}")
        if self.fusion == "add":
            return x + z
        return self.merge[level](T.concat([x, z], axis=1))

    def forward(self, pyramid: FeaturePyramid, z: dict, out_size) -> T.Tensor:
        x = self.blocks[4](self.fuse(4, pyramid[4], z.get(4)))
        for i in (3, 2, 1):
            u = T.bilinear_upsample(x, pyramid[i].shape[-2:])
            u = self.fuse(i, u, z.get(i))
            x = self.blocks[i](u + pyramid[i])
        return T.bilinear_upsample(self.head(x), out_size)


def extract_pyramid(encoder: Encoder, image) -> FeaturePyramid:
    return encoder(T.as_tensor(image))


def decode_fuse_predict(decoder: Decoder, pyramid: FeaturePyramid, z: dict, out_size) -> T.Tensor:
    return decoder(pyramid, z, out_size)
