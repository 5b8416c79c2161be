"""Reverse-mode automatic differentiation over dense numpy tensors.

Storage is float32 by default with float64 accumulation for sums, means,
norms, and the cross-entropy log-sum-exp; building a graph from float64
tensors runs every op in 64-bit, which is what the finite-difference gradient
checks use. Matrix products run in the storage dtype so they stay on the BLAS
fast path.

Each op is registered in ``REGISTRY`` with its backward rule; the gradient
check suite iterates that registry, so adding an op without a check fails
loudly rather than silently.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import (
    CorruptFile,
    InvalidProbability,
    NonScalarLoss,
    ShapeMismatch,
)
from .seeding import derive_rng

DEFAULT_DTYPE = np.float32


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A dense array plus an optional gradient and a link into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx: tuple | None = None  # (op, input tensors, saved dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable  # (saved, *arrays, **params) -> array
    backward: Callable  # (saved, grad) -> tuple of arrays or None


REGISTRY: dict[str, OpDef] = {}


def _register(name: str, forward: Callable, backward: Callable) -> OpDef:
    op = OpDef(name, forward, backward)
    REGISTRY[name] = op
    return op


def _apply(op: OpDef, tensors: tuple[Tensor, ...], **params) -> Tensor:
    saved: dict = {}
    out_data = op.forward(saved, *[t.data for t in tensors], **params)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in tensors))
    if out.requires_grad:
        out._ctx = (op, tensors, saved)
    return out


def backward(loss: Tensor) -> None:
    """Populate grad buffers of every requires-grad tensor reachable from a
    scalar loss. Gradients accumulate across calls; use zero_grad to reset."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for t in node._ctx[1]:
                if t.requires_grad and id(t) not in seen:
                    stack.append((t, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._ctx is None or node.grad is None:
            continue
        op, inputs, saved = node._ctx
        grads = op.backward(saved, node.grad)
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
        node._ctx = None  # free the tape as we go


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# elementwise and reduction ops
# --------------------------------------------------------------------------

def _fwd_add(saved, a, b):
    return a + b


_register("add", _fwd_add, lambda saved, g: (g, g))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return _apply(REGISTRY["add"], (a, b))


def _fwd_bias_add(saved, x, b):
    saved["ndim"] = x.ndim
    if x.ndim == 2:
        return x + b[None, :]
    return x + b[None, :, None, None]


def _bwd_bias_add(saved, g):
    axes = (0,) if saved["ndim"] == 2 else (0, 2, 3)
    gb = g.sum(axis=axes, dtype=np.float64)
    return g, gb


_register("bias_add", _fwd_bias_add, _bwd_bias_add)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Channel bias: (N, D) + (D,) or (N, C, H, W) + (C,)."""
    if b.data.ndim != 1:
        raise ShapeMismatch(f"bias must be 1-D, got {b.shape}")
    if x.data.ndim == 2 and x.shape[1] == b.shape[0]:
        return _apply(REGISTRY["bias_add"], (x, b))
    if x.data.ndim == 4 and x.shape[1] == b.shape[0]:
        return _apply(REGISTRY["bias_add"], (x, b))
    raise ShapeMismatch(f"bias_add: {x.shape} vs {b.shape}")


def _fwd_mul(saved, a, b):
    saved["a"], saved["b"] = a, b
    return a * b


_register("mul", _fwd_mul, lambda saved, g: (g * saved["b"], g * saved["a"]))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    return _apply(REGISTRY["mul"], (a, b))


def _fwd_scale(saved, x, factor):
    saved["factor"] = factor
    return x * x.dtype.type(factor)


_register("scale", _fwd_scale, lambda saved, g: (g * saved["factor"],))


def scale(x: Tensor, factor: float) -> Tensor:
    return _apply(REGISTRY["scale"], (x,), factor=factor)


def _fwd_sum(saved, x):
    saved["shape"], saved["dtype"] = x.shape, x.dtype
    return np.sum(x, dtype=np.float64).astype(x.dtype)


_register(
    "sum",
    _fwd_sum,
    lambda saved, g: (np.broadcast_to(g, saved["shape"]).astype(saved["dtype"]),),
)


def tsum(x: Tensor) -> Tensor:
    return _apply(REGISTRY["sum"], (x,))


def _fwd_mean(saved, x):
    saved["shape"], saved["dtype"], saved["n"] = x.shape, x.dtype, x.size
    return (np.sum(x, dtype=np.float64) / x.size).astype(x.dtype)


_register(
    "mean",
    _fwd_mean,
    lambda saved, g: (
        np.broadcast_to(g / saved["n"], saved["shape"]).astype(saved["dtype"]),
    ),
)


def tmean(x: Tensor) -> Tensor:
    return _apply(REGISTRY["mean"], (x,))


def _fwd_relu(saved, x):
    saved["mask"] = x > 0
    return np.where(saved["mask"], x, x.dtype.type(0))


_register("relu", _fwd_relu, lambda saved, g: (g * saved["mask"],))


def relu(x: Tensor) -> Tensor:
    return _apply(REGISTRY["relu"], (x,))


def _fwd_flatten(saved, x):
    saved["shape"] = x.shape
    return x.reshape(x.shape[0], -1)


_register(
    "flatten", _fwd_flatten, lambda saved, g: (g.reshape(saved["shape"]),)
)


def flatten(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeMismatch(f"flatten needs a batch axis, got {x.shape}")
    return _apply(REGISTRY["flatten"], (x,))


def _fwd_reshape(saved, x, shape):
    saved["shape"] = x.shape
    return x.reshape(shape)


_register("reshape", _fwd_reshape, lambda saved, g: (g.reshape(saved["shape"]),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    target = int(np.prod(shape))
    if target != x.data.size and -1 not in shape:
        raise ShapeMismatch(f"reshape {x.shape} -> {shape}")
    return _apply(REGISTRY["reshape"], (x,), shape=shape)


def _fwd_dropout(saved, x, p, train, seed):
    if train and p > 0.0:
        keep = derive_rng(seed, "dropout-mask").random(x.shape) >= p
        saved["scaled_mask"] = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
        return x * saved["scaled_mask"]
    saved["scaled_mask"] = None
    return x


def _bwd_dropout(saved, g):
    m = saved["scaled_mask"]
    return (g if m is None else g * m,)


_register("dropout", _fwd_dropout, _bwd_dropout)


def dropout(x: Tensor, p: float, train: bool, seed: int = 0) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout p must be in [0, 1), got {p}")
    return _apply(REGISTRY["dropout"], (x,), p=p, train=train, seed=seed)


def _fwd_l2_normalize_rows(saved, x):
    norms = np.sqrt(np.sum(x.astype(np.float64) ** 2, axis=1, keepdims=True))
    safe = np.where(norms == 0.0, 1.0, norms)
    out = (x / safe).astype(x.dtype)
    saved["out"], saved["norms"] = out, safe
    return out


def _bwd_l2_normalize_rows(saved, g):
    y, norms = saved["out"], saved["norms"]
    inner = np.sum(g * y, axis=1, keepdims=True, dtype=np.float64)
    return ((g - y * inner) / norms,)


_register("l2_normalize_rows", _fwd_l2_normalize_rows, _bwd_l2_normalize_rows)


def l2_normalize_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"l2_normalize_rows expects (N, D), got {x.shape}")
    return _apply(REGISTRY["l2_normalize_rows"], (x,))


# --------------------------------------------------------------------------
# linear algebra and spatial ops
# --------------------------------------------------------------------------

def _fwd_matmul(saved, a, b):
    saved["a"], saved["b"] = a, b
    return a @ b


_register(
    "matmul",
    _fwd_matmul,
    lambda saved, g: (g @ saved["b"].T, saved["a"].T @ g),
)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return _apply(REGISTRY["matmul"], (a, b))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = x[
                :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
            ]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, padding, oh, ow):
    n, c, h, w = x_shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            out[
                :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
            ] += cols[:, :, ki, kj]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _fwd_conv2d(saved, x, w, stride, padding):
    n = x.shape[0]
    k, _, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = np.matmul(w.reshape(k, -1), cols)  # (N, K, OH*OW)
    saved.update(cols=cols, x_shape=x.shape, w=w, stride=stride, padding=padding,
                 oh=oh, ow=ow)
    return out.reshape(n, k, oh, ow)


def _bwd_conv2d(saved, g):
    cols, w = saved["cols"], saved["w"]
    k, c, kh, kw = w.shape
    n = g.shape[0]
    gmat = np.ascontiguousarray(g.reshape(n, k, -1))
    # per-sample GEMMs keep BLAS on strided views instead of copying cols
    grad_w_mat = np.zeros((k, c * kh * kw), dtype=w.dtype)
    for i in range(n):
        grad_w_mat += gmat[i] @ cols[i].T
    grad_cols = np.matmul(w.reshape(k, -1).T, gmat)
    grad_x = _col2im(
        grad_cols, saved["x_shape"], kh, kw, saved["stride"], saved["padding"],
        saved["oh"], saved["ow"],
    )
    return grad_x, grad_w_mat.reshape(w.shape)


_register("conv2d", _fwd_conv2d, _bwd_conv2d)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW convolution with a (K, C, kh, kw) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: {x.shape} with kernel {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(
            f"conv2d channels: input {x.shape[1]} vs kernel {w.shape[1]}"
        )
    h, wd = x.shape[2], x.shape[3]
    if h + 2 * padding < w.shape[2] or wd + 2 * padding < w.shape[3]:
        raise ShapeMismatch(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    return _apply(REGISTRY["conv2d"], (x, w), stride=stride, padding=padding)


def _pool_views(x, k, oh, ow):
    """The k*k shifted strided views covering each pooling window."""
    return [
        x[:, :, ki : ki + k * oh : k, kj : kj + k * ow : k]
        for ki in range(k)
        for kj in range(k)
    ]


def _fwd_maxpool2d(saved, x, kernel):
    n, c, h, w = x.shape
    k = kernel
    oh, ow = h // k, w // k
    views = _pool_views(x, k, oh, ow)
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    saved.update(x=x, x_shape=x.shape, kernel=k, out=out)
    return out


def _bwd_maxpool2d(saved, g):
    n, c, h, w = saved["x_shape"]
    k = saved["kernel"]
    oh, ow = h // k, w // k
    out = saved["out"]
    grad_x = np.zeros(saved["x_shape"], dtype=g.dtype)
    # route gradient to the first window position attaining the max
    taken = np.zeros(out.shape, dtype=bool)
    for xv, gv in zip(_pool_views(saved["x"], k, oh, ow), _pool_views(grad_x, k, oh, ow)):
        hit = (xv == out) & ~taken
        gv += g * hit
        taken |= hit
    return (grad_x,)


_register("maxpool2d", _fwd_maxpool2d, _bwd_maxpool2d)


def maxpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial extents must divide the kernel."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects NCHW, got {x.shape}")
    if x.shape[2] % kernel or x.shape[3] % kernel:
        raise ShapeMismatch(
            f"maxpool2d: extents {x.shape[2:]}, kernel {kernel} must divide"
        )
    return _apply(REGISTRY["maxpool2d"], (x,), kernel=kernel)


def _fwd_global_avg_pool(saved, x):
    saved["x_shape"] = x.shape
    return np.mean(x, axis=(2, 3), dtype=np.float64).astype(x.dtype)


def _bwd_global_avg_pool(saved, g):
    n, c, h, w = saved["x_shape"]
    return (np.broadcast_to(g[:, :, None, None] / (h * w), saved["x_shape"]),)


_register("global_avg_pool", _fwd_global_avg_pool, _bwd_global_avg_pool)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool expects NCHW, got {x.shape}")
    return _apply(REGISTRY["global_avg_pool"], (x,))


def _fwd_softmax_cross_entropy(saved, logits, labels):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    softmax = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    losses = np.log(ez.sum(axis=1)) - z[np.arange(n), labels]
    saved.update(softmax=softmax, labels=labels, n=n)
    return np.asarray(losses.mean(), dtype=logits.dtype)


def _bwd_softmax_cross_entropy(saved, g):
    softmax, labels, n = saved["softmax"], saved["labels"], saved["n"]
    grad = softmax.copy()
    grad[np.arange(n), labels] -= 1.0
    return (grad * (g / n), None)


_register(
    "softmax_cross_entropy", _fwd_softmax_cross_entropy, _bwd_softmax_cross_entropy
)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between logits (N, K) and integer labels (N,)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch(
            f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}"
        )
    saved: dict = {}
    op = REGISTRY["softmax_cross_entropy"]
    out_data = op.forward(saved, logits.data, labels)
    out = Tensor(out_data, requires_grad=logits.requires_grad)
    if out.requires_grad:
        out._ctx = (op, (logits,), saved)
    return out


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

class SGD:
    """Plain stochastic gradient descent over named or listed parameters."""

    def __init__(self, params: Iterable[Tensor] | Mapping[str, Tensor], lr: float):
        self.params = list(params.values() if isinstance(params, Mapping) else params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is None or not p.requires_grad:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeMismatch(f"grad {p.grad.shape} vs param {p.data.shape}")
            p.data = p.data - p.data.dtype.type(self.lr) * p.grad

    def zero_grad(self) -> None:
        zero_grad(self.params)


class Adam:
    """Adam with per-parameter first/second moment state."""

    def __init__(
        self,
        params: Iterable[Tensor] | Mapping[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params.values() if isinstance(params, Mapping) else params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None or not p.requires_grad:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeMismatch(f"grad {p.grad.shape} vs param {p.data.shape}")
            g = p.grad
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - p.data.dtype.type(self.lr) * update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# --------------------------------------------------------------------------
# checkpoint format (KINJ1)
# --------------------------------------------------------------------------

_CKPT_MAGIC = b"KINJ1"
_CKPT_VERSION = 1


def save_checkpoint(params: Mapping[str, Tensor | np.ndarray], path: str | Path) -> None:
    """Binary little-endian checkpoint: magic, version, count, records, then a
    trailing 64-bit BLAKE2b checksum of everything before it."""
    buf = bytearray(_CKPT_MAGIC)
    buf += struct.pack("<II", _CKPT_VERSION, len(params))
    for name, value in params.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        data = np.ascontiguousarray(data, dtype="<f4")
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded)) + encoded
        buf += struct.pack("<I", data.ndim)
        buf += struct.pack(f"<{data.ndim}I", *data.shape)
        buf += data.tobytes()
    digest = hashlib.blake2b(bytes(buf), digest_size=8).digest()
    Path(path).write_bytes(bytes(buf) + digest)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < len(_CKPT_MAGIC) + 8 + 8 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CorruptFile(f"{path}: not a KINJ1 checkpoint")
    body, digest = raw[:-8], raw[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    off = len(_CKPT_MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, body, off)
        off += size
        return values

    version, count = take("<II")
    if version != _CKPT_VERSION:
        raise CorruptFile(f"{path}: unsupported version {version}")
    params: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = take("<I")
            name = body[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = take("<I")
            shape = take(f"<{rank}I")
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            params[name] = data.copy()
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: truncated or malformed record") from exc
    if off != len(body):
        raise CorruptFile(f"{path}: trailing bytes after last record")
    return params
