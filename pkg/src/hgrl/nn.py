"""Layer containers on top of the tensor engine."""
from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor


class Module:
    training = True

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item
            elif isinstance(value, dict):
                for k in sorted(value):
                    if isinstance(value[k], Module):
                        yield f"{key}.{k}", value[k]

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield f"{prefix}{key}.running_mean", value.running_mean
                yield f"{prefix}{key}.running_var", value.running_var
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise T.DimensionError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = state[name].astype(p.data.dtype, copy=True)
        for name, b in bufs.items():
            b[:] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=T.get_default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = False):
        self.weight = param(cout, cin, k, k)
        self.bias = param(cout) if bias else None
        self.stride = stride
        self.padding = k // 2

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.weight = param(channels)
        self.weight.data[:] = 1.0
        self.bias = param(channels)
        self.state = BatchNormState(channels)

    def forward(self, x):
        return T.batch_norm(x, self.weight, self.bias, self.state, self.training)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, act: bool = True):
        self.conv = Conv2d(cin, cout, k, stride)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x):
        x = self.bn(self.conv(x))
        return T.relu(x) if self.act else x


def init_parameters(module: Module, seed: int) -> None:
    """Kaiming-uniform fan-in initialization, seeded per parameter name.

    Seeding by name keeps a layer's initial weights identical across model
    variants that share it, whatever else is switched on or off.
    """
    for name, p in module.named_parameters():
        if p.ndim < 2:
            continue  # biases and norm affine params keep their defaults
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        fan_in = int(np.prod(p.shape[1:])) if p.ndim == 4 else p.shape[0]
        bound = np.sqrt(6.0 / fan_in)
        p.data = rng.uniform(-bound, bound, size=p.shape).astype(p.data.dtype)
