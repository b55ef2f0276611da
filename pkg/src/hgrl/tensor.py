"""Minimal dense tensor engine with reverse-mode differentiation.

Every op builds its output from numpy arrays and, when any input requires a
gradient, attaches a closure that maps the output gradient back onto the
inputs. ``Tensor.backward`` walks the recorded graph in reverse topological
order.
"""
from __future__ import annotations

import contextlib
import struct
import threading

import numpy as np

_DEFAULT_DTYPE = np.float32
_grad_enabled = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the precision used for new tensors (e.g. 64-bit oracles)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def is_grad_enabled() -> bool:
    return getattr(_grad_enabled, "on", True)


@contextlib.contextmanager
def no_grad():
    old = is_grad_enabled()
    _grad_enabled.on = False
    try:
        yield
    finally:
        _grad_enabled.on = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation ---------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` of every upstream tensor that requires it.

        Without an explicit seed gradient the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis), 1.0 / n)


# -- activations -------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for {x.ndim}-d tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def activation(x, kind: str, axis: int = -1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


# -- shape ops -----------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


# -- convolution ---------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B,C,H,W] with ``w`` [C',C,k,k]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    if kh != kw or kh not in (1, 3):
        raise DimensionError(f"conv2d: unsupported kernel size {kh}x{kw}")
    if stride not in (1, 2):
        raise DimensionError(f"conv2d: unsupported stride {stride}")
    k = kh
    Ho, Wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: input {H}x{W} too small for k={k}, pad={padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # cols: [B, Ho, Wo, C, k, k]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = w.data.reshape(Co, C * k * k)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, Co, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # [k, k, B, C, Ho, Wo] so each tap is one contiguous block
            gcols = np.ascontiguousarray(
                (g2 @ wmat).reshape(B, Ho, Wo, C, k, k).transpose(4, 5, 0, 3, 1, 2))
            if k == 1 and stride == 1:
                gxp = gcols[0, 0]
            else:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, backward)


# -- normalization -------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BatchNormState:
    """Running statistics of a batch-norm layer (not differentiated)."""

    def __init__(self, channels: int, dtype=None):
        dtype = dtype or _DEFAULT_DTYPE
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool,
               eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization over every axis except axis 1."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    if state.running_mean.shape[0] != C or gamma.shape[0] != C:
        raise DimensionError(f"batch_norm: {C} channels vs state width {state.running_mean.shape[0]}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // C
        unbiased = var * n / max(n - 1, 1)
        state.running_mean[:] = (1 - momentum) * state.running_mean + momentum * mu
        state.running_var[:] = (1 - momentum) * state.running_var + momentum * unbiased
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu.reshape(bshape)) * inv.reshape(bshape)).astype(x.data.dtype, copy=False)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.data.size // C
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


# -- resampling ------------------------------------------------------------------

def bilinear_matrix(n_out: int, n_in: int, dtype=None) -> np.ndarray:
    """1-d interpolation weights with aligned corners, shape [n_out, n_in]."""
    dtype = dtype or _DEFAULT_DTYPE
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m.astype(dtype)


def bilinear_upsample(x, size) -> Tensor:
    """Resize the trailing two axes of ``x`` to ``size`` = (H, W)."""
    x = as_tensor(x)
    Ho, Wo = size
    H, W = x.shape[-2:]
    if Ho < H or Wo < W:
        raise DimensionError(f"bilinear_upsample: target {size} smaller than source {(H, W)}")
    if (Ho, Wo) == (H, W):
        return x
    ry = bilinear_matrix(Ho, H, x.data.dtype)
    rx = bilinear_matrix(Wo, W, x.data.dtype)
    out = ry @ x.data @ rx.T
    return _make(out, (x,), lambda g: (ry.T @ g @ rx,))


# -- verification ----------------------------------------------------------------

def grad_check(fn, inputs, eps: float = 1e-4, n_samples: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps the tensors in ``inputs`` to a scalar tensor. The analytic
    gradient is taken at the tensors' own precision; the finite differences
    are evaluated in 64-bit on copies of the inputs, so the oracle does not
    inherit 32-bit round-off. ``n_samples`` limits the check to that many
    random coordinates per input.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    originals = [t.data for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        with default_dtype(np.float64), no_grad():
            probes = [Tensor(o.astype(np.float64)) for o in originals]
            for t, p in zip(inputs, probes):
                t.data = p.data
            for idx, t in enumerate(inputs):
                flat = t.data.reshape(-1)
                coords = np.arange(flat.size)
                if n_samples is not None and n_samples < flat.size:
                    coords = rng.choice(flat.size, size=n_samples, replace=False)
                for c in coords:
                    old = flat[c]
                    flat[c] = old + eps
                    fp = float(fn(*inputs).data)
                    flat[c] = old - eps
                    fm = float(fn(*inputs).data)
                    flat[c] = old
                    fd = (fp - fm) / (2 * eps)
                    an = analytic[idx].reshape(-1)[c]
                    worst = max(worst, abs(an - fd) / max(1.0, abs(fd)))
    finally:
        for t, o in zip(inputs, originals):
            t.data = o
    return worst


# -- checkpoint format -------------------------------------------------------------

CHECKPOINT_MAGIC = b"HGRLCKPT"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_arrays(path, arrays: dict) -> None:
    """Write ``name -> array`` pairs as a versioned little-endian binary file.

    Layout: magic, u32 version, u32 count, then per entry u16 name length,
    utf-8 name, u8 dtype code, u8 ndim, u32 extents, raw values.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            dt = arr.dtype.newbyteorder("<")
            if dt not in _DTYPE_CODES:
                raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_arrays(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                                  offset=pos).reshape(shape).copy()
        pos += nbytes
    return out
