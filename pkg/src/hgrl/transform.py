"""Map graph representations back to convolutional space."""
from __future__ import annotations

from . import tensor as T
from .graph import unflatten_nodes
from .nn import BatchNorm2d, Conv2d, Module


class GraphToCNN(Module):
    """Z = up(BN(conv1x1(F' + P'))), F' being F reshaped onto the P' grid."""

    def __init__(self, channels: int, stride: int = 2):
        self.conv = Conv2d(channels, channels, 1, stride=stride)
        self.bn = BatchNorm2d(channels)

    def forward(self, f, p_prime, target_size) -> T.Tensor:
        _, _, h, w = p_prime.shape
        f_map = unflatten_nodes(f, h, w)
        if f_map.shape != p_prime.shape:
            raise T.DimensionError(f"graph map {f_map.shape} vs down-sampled map {p_prime.shape}")
        z = self.bn(self.conv(f_map + p_prime))
        return T.bilinear_upsample(z, target_size)


class BranchHead(Module):
    """Graph-branch mask: upsample every Z_i to input size, sum, 1x1 conv, sigmoid."""

    def __init__(self, channels: int):
        self.conv = Conv2d(channels, 1, 1, bias=True)

    def forward(self, zs, out_size) -> T.Tensor:
        total = None
        for z in zs:
            up = T.bilinear_upsample(z, out_size)
            total = up if total is None else total + up
        return T.sigmoid(self.conv(total))


def graph_to_cnn(module: GraphToCNN, f, p_prime, target_size) -> T.Tensor:
    return module(f, p_prime, target_size)


def hgrl_predict(head: BranchHead, zs, out_size) -> T.Tensor:
    return head(zs, out_size)
