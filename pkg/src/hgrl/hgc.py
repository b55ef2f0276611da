"""Two-layer graph convolution applied independently to each pyramid level."""
from __future__ import annotations

from . import tensor as T
from .nn import Module, param


def gcn_layer(a_hat, x, weight, act: str = "relu", axis: int = -1) -> T.Tensor:
    """act(A_hat @ X @ M), batched over the leading axis of ``x`` [B, N, C_in]."""
    a_hat, x, weight = T.as_tensor(a_hat), T.as_tensor(x), T.as_tensor(weight)
    n = x.shape[-2]
    if a_hat.shape != (n, n):
        raise T.DimensionError(f"adjacency {a_hat.shape} does not match {n} nodes")
    if weight.shape[0] != x.shape[-1]:
        raise T.DimensionError(f"weight {weight.shape} does not accept {x.shape[-1]} input channels")
    # A (X M) is cheaper than (A X) M whenever C_out <= C_in; both are exact
    h = T.matmul(a_hat, T.matmul(x, weight))
    return T.activation(h, act, axis=axis)


class GraphConv2(Module):
    """Per-level weights M0 [C, C_h] and M1 [C_h, C]."""

    def __init__(self, channels: int, hidden: int | None = None, softmax_axis: str = "channel"):
        hidden = hidden or channels
        self.m0 = param(channels, hidden)
        self.m1 = param(hidden, channels)
        if softmax_axis not in ("channel", "node"):
            raise ValueError(f"softmax_axis must be 'channel' or 'node', got {softmax_axis!r}")
        self.softmax_axis = softmax_axis

    def forward(self, a_hat, x):
        h = gcn_layer(a_hat, x, self.m0, "relu")
        axis = -1 if self.softmax_axis == "channel" else -2
        return gcn_layer(a_hat, h, self.m1, "softmax", axis=axis)


def hgc_forward(graphs, layers) -> list:
    """Graph representation F_i = softmax(A relu(A P' M0) M1) for every level."""
    if len(graphs) != len(layers):
        raise T.DimensionError(f"{len(graphs)} graphs but {len(layers)} parameter sets")
    return [layer(T.Tensor(g.norm_adjacency), g.node_features) for g, layer in zip(graphs, layers)]
