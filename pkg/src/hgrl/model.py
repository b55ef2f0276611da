"""Full network: backbone branch plus the hierarchical graph branch."""
from __future__ import annotations

from . import tensor as T
from .backbone import PYRAMID_WIDTH, Decoder, Encoder
from .config import ConfigError
from .graph import Downsample, build_graph
from .hgc import GraphConv2, hgc_forward
from .nn import Module, init_parameters
from .transform import BranchHead, GraphToCNN

DEFAULT_FACTORS = (8, 4, 2, 1)


class GraphBranch(Module):
    """Down-sample, build grid graphs, 2-layer GCN, map back to conv space."""

    def __init__(self, levels, factors=DEFAULT_FACTORS, sigma: float = 1.0, eq4_stride: int = 2,
                 width: int = PYRAMID_WIDTH, softmax_axis: str = "channel"):
        self.levels = tuple(sorted(levels))
        self.factors = tuple(factors)
        self.sigma = sigma
        self.down = {i: Downsample(width, self.factors[i - 1]) for i in self.levels}
        self.gcn = {i: GraphConv2(width, softmax_axis=softmax_axis) for i in self.levels}
        self.to_cnn = {i: GraphToCNN(width, eq4_stride) for i in self.levels}
        self.head = BranchHead(width)

    def forward(self, pyramid):
        p_prime = {i: self.down[i](pyramid[i]) for i in self.levels}
        graphs = [build_graph(p_prime[i], self.sigma) for i in self.levels]
        reps = hgc_forward(graphs, [self.gcn[i] for i in self.levels])
        return {i: self.to_cnn[i](f, p_prime[i], pyramid[i].shape[-2:])
                for i, f in zip(self.levels, reps)}


class HGCNNet(Module):
    def __init__(self, levels=(1, 2, 3, 4), factors=DEFAULT_FACTORS, sigma: float = 1.0,
                 fusion: str = "concat", eq4_stride: int = 2, softmax_axis: str = "channel",
                 input_mode: str = "both", seed: int = 0):
        levels = tuple(sorted(set(levels)))
        if any(i not in (1, 2, 3, 4) for i in levels):
            raise ConfigError(f"graph levels must be drawn from 1..4, got {levels}")
        if len(factors) != 4:
            raise ConfigError(f"need four down-sampling factors, got {factors}")
        self.encoder = Encoder(input_mode=input_mode)
        self.branch = GraphBranch(levels, factors, sigma, eq4_stride,
                                  softmax_axis=softmax_axis) if levels else None
        self.decoder = Decoder(fusion=fusion, fused_levels=levels)
        init_parameters(self, seed)

    def forward(self, image, with_branch: bool = True) -> dict:
        """Returns final-mask logits and, when the graph branch is on, its probability map.

        ``with_branch=False`` skips the branch head, which only feeds the training loss.
        """
        image = T.as_tensor(image)
        out_size = image.shape[-2:]
        pyramid = self.encoder(image)
        z = self.branch(pyramid) if self.branch is not None else {}
        logits = self.decoder(pyramid, z, out_size)
        branch = self.branch.head(list(z.values()), out_size) if z and with_branch else None
        return {"logits": logits, "branch": branch, "z": z, "pyramid": pyramid}

    def predict(self, image):
        """Probability map of the final mask, no tape."""
        with T.no_grad():
            return T.sigmoid(self(image, with_branch=False)["logits"]).data
