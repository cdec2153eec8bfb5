"""Dense-tensor reverse-mode differentiation for the residual 1D CNN.

Values are numpy arrays; sequence activations use the layout
``[batch, length, channels]``. Every op returns a :class:`Node` whose
backward closure pushes the upstream gradient into its parents.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import as_strided

from .eeg_io import atomic_write_bytes

Tensor = np.ndarray

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph: ops return detached nodes and keep no buffers."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, value, parents=(), op="const", backward=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


class Param:
    """Trainable (or buffer) tensor plus its Adam moment estimates."""

    def __init__(self, value, name="", trainable=True):
        self.name = name
        self.trainable = trainable
        self.node = Node(np.asarray(value), op=f"param:{name}", requires_grad=trainable)
        self.m = np.zeros_like(self.node.value)
        self.v = np.zeros_like(self.node.value)
        self.t = 0

    @property
    def value(self):
        return self.node.value

    @value.setter
    def value(self, arr):
        self.node.value = arr

    @property
    def grad(self):
        g = self.node.grad
        return np.zeros_like(self.node.value) if g is None else g

    def zero_grad(self):
        self.node.grad = None

    def astype(self, dtype):
        self.node.value = self.node.value.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, Param):
        return x.node
    return Node(np.asarray(x))


def _make(value, parents, op, backward):
    if not _grad_enabled:
        return Node(value, op=op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Node(value, op=op)
    return Node(value, parents, op, backward, requires_grad=True)


def backward(loss: Node, params=None) -> None:
    """Populate ``.grad`` on every node reachable from the scalar ``loss``.

    Gradients of reachable nodes (and of ``params``, if given) are reset
    first, so repeated calls do not accumulate across steps.
    """
    loss = as_node(loss)
    if loss.value.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {loss.value.shape}")
    if params is not None:
        for p in params:
            p.zero_grad()

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- elementwise and structural ops --------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.value + b.value, (a, b), "add", _bw)


def relu(x) -> Node:
    x = as_node(x)
    out = np.maximum(x.value, 0)

    def _bw(g):
        x._accumulate(g * (x.value > 0))

    return _make(out, (x,), "relu", _bw)


def sum_all(x) -> Node:
    x = as_node(x)

    def _bw(g):
        x._accumulate(np.broadcast_to(g, x.shape).astype(x.value.dtype))

    return _make(np.asarray(x.value.sum()), (x,), "sum", _bw)


def flatten(x) -> Node:
    x = as_node(x)
    shape = x.shape

    def _bw(g):
        x._accumulate(g.reshape(shape))

    return _make(x.value.reshape(shape[0], -1), (x,), "flatten", _bw)


def pad_channels(x, channels: int) -> Node:
    """Append zero channels so the last axis has size ``channels``."""
    x = as_node(x)
    c = x.shape[-1]
    if channels < c:
        raise ValueError(f"pad_channels: cannot shrink {c} -> {channels}")
    if channels == c:
        return x
    pad = [(0, 0)] * (x.value.ndim - 1) + [(0, channels - c)]

    def _bw(g):
        x._accumulate(g[..., :c])

    return _make(np.pad(x.value, pad), (x,), "pad_channels", _bw)


# -- convolution and pooling ---------------------------------------------------


def same_padding(length: int, width: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out_len, pad_left, pad_right)`` for "same" padding."""
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + width - length, 0)
    return out_len, total // 2, total - total // 2


def _windows(xp, out_len, width, stride):
    b, _, c = xp.shape
    s0, s1, s2 = xp.strides
    return as_strided(xp, (b, out_len, width, c), (s0, s1 * stride, s1, s2), writeable=False)


def conv1d(x, kernel, bias, stride: int = 1) -> Node:
    """Cross-correlation with "same" padding, computed with real FFTs.

    x: [B, L, C_in], kernel: [W, C_in, C_out], bias: [C_out]
    -> [B, ceil(L / stride), C_out]

    All three products (output, kernel gradient, input gradient) are linear
    correlations/convolutions no longer than the padded input, so one FFT
    length ``n >= L + pad`` avoids wrap-around in each.
    """
    x, kernel, bias = as_node(x), as_node(kernel), as_node(bias)
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    b, length, c_in = x.shape
    width, k_in, c_out = kernel.shape
    if k_in != c_in:
        raise ValueError(f"conv1d: input has {c_in} channels, kernel expects {k_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
    out_len, left, right = same_padding(length, width, stride)
    padded = length + left + right
    span = stride * (out_len - 1) + 1
    n = sfft.next_fast_len(padded, real=True)
    xf = sfft.rfft(x.value, n, axis=1)
    if left:
        # shift instead of padding: pad on the left == delay by `left` samples
        xf = xf * _delay(n, left, xf.dtype)[None, :, None]
    kf = sfft.rfft(kernel.value, n, axis=0)
    yf = np.matmul(xf.transpose(1, 0, 2), kf.conj())
    full = sfft.irfft(yf, n, axis=0)
    out = full[:span:stride].transpose(1, 0, 2) + bias.value
    out = np.ascontiguousarray(out, dtype=x.value.dtype)

    def _bw(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1)))
        if not (kernel.requires_grad or x.requires_grad):
            return
        gd = np.zeros((b, span, c_out), dtype=g.dtype)
        gd[:, ::stride, :] = g
        gf = sfft.rfft(gd, n, axis=1).transpose(1, 0, 2)
        if kernel.requires_grad:
            dk = sfft.irfft(np.matmul(xf.transpose(1, 2, 0), gf.conj()), n, axis=0)[:width]
            kernel._accumulate(dk.astype(kernel.value.dtype, copy=False))
        if x.requires_grad:
            dxp = sfft.irfft(np.matmul(gf, kf.transpose(0, 2, 1)), n, axis=0)
            dx = dxp[left : left + length].transpose(1, 0, 2)
            x._accumulate(np.ascontiguousarray(dx, dtype=x.value.dtype))

    return _make(out, (x, kernel, bias), "conv1d", _bw)


def _delay(n, shift, dtype):
    k = np.arange(n // 2 + 1)
    return np.exp(-2j * np.pi * k * shift / n).astype(dtype)


def maxpool1d(x, width: int, stride: int) -> Node:
    """Max over windows with -inf "same" padding; ties route to the first index."""
    x = as_node(x)
    if width < 1 or stride < 1:
        raise ValueError("maxpool1d: width and stride must be >= 1")
    b, length, c = x.shape
    out_len, left, right = same_padding(length, width, stride)
    xp = np.pad(x.value, ((0, 0), (left, right), (0, 0)), constant_values=-np.inf)
    win = _windows(xp, out_len, width, stride)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def _bw(g):
        dxp = np.zeros_like(xp)
        span = stride * (out_len - 1) + 1
        for k in range(width):
            dxp[:, k : k + span : stride, :] += np.where(arg == k, g, 0)
        x._accumulate(dxp[:, left : left + length, :])

    return _make(np.ascontiguousarray(out), (x,), "maxpool1d", _bw)


# -- normalization, dropout, dense ---------------------------------------------


def batchnorm(x, gamma, beta, running_mean, running_var, training: bool, momentum=0.1, eps=1e-5) -> Node:
    """Per-channel normalization over every axis but the last.

    In training mode batch statistics are used and the running buffers
    (``Param`` objects with ``trainable=False``) are updated in place.
    """
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    axes = tuple(range(x.value.ndim - 1))
    if not training and not (_grad_enabled and (x.requires_grad or gamma.requires_grad or beta.requires_grad)):
        # inference: one fused scale-and-shift
        scale = gamma.value / np.sqrt(running_var.value + eps)
        shift = beta.value - running_mean.value * scale
        return Node((x.value * scale + shift).astype(x.value.dtype, copy=False), op="batchnorm")
    if training:
        n = x.value.size // x.shape[-1]
        mean = x.value.mean(axis=axes)
        centered = x.value - mean
        var = (centered * centered).mean(axis=axes)
        unbiased = var * n / max(n - 1, 1)
        running_mean.value = ((1 - momentum) * running_mean.value + momentum * mean).astype(running_mean.value.dtype)
        running_var.value = ((1 - momentum) * running_var.value + momentum * unbiased).astype(running_var.value.dtype)
    else:
        mean = running_mean.value
        var = running_var.value
        centered = x.value - mean
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.value + beta.value

    def _bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.value
            if training:
                m = x.value.size // x.shape[-1]
                dx = (inv_std / m) * (
                    m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
                )
            else:
                dx = dxhat * inv_std
            x._accumulate(dx.astype(x.value.dtype, copy=False))

    return _make(out.astype(x.value.dtype, copy=False), (x, gamma, beta), "batchnorm", _bw)


def dropout_rng(seed: int, step: int, layer: int) -> np.random.Generator:
    """Counter-based generator: the mask depends only on (seed, step, layer)."""
    key = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, step, layer]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Node:
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_node(x)
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.shape) >= rate).astype(x.value.dtype) * x.value.dtype.type(scale)

    def _bw(g):
        x._accumulate(g * mask)

    return _make(x.value * mask, (x,), "dropout", _bw)


def dense(x, weights, bias) -> Node:
    x, weights, bias = as_node(x), as_node(weights), as_node(bias)
    if x.value.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"dense: bias shape {bias.shape} != ({weights.shape[1]},)")

    def _bw(g):
        if weights.requires_grad:
            weights._accumulate(x.value.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weights.value.T)

    return _make(x.value @ weights.value + bias.value, (x, weights, bias), "dense", _bw)


# -- softmax / loss ------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[Node, np.ndarray]:
    """Mean negative log-likelihood and the softmax probabilities."""
    logits = as_node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} != ({b},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    probs = np.exp(z - logsum[:, None])
    rows = np.arange(b)
    loss = np.asarray(-(z[rows, labels] - logsum).mean())

    def _bw(g):
        d = probs.copy()
        d[rows, labels] -= 1
        logits._accumulate((d * (g / b)).astype(logits.value.dtype, copy=False))

    return _make(loss, (logits,), "softmax_xent", _bw), probs


# -- optimizer -----------------------------------------------------------------


def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        p.t += 1
        p.m = beta1 * p.m + (1 - beta1) * g
        p.v = beta2 * p.v + (1 - beta2) * g * g
        m_hat = p.m / (1 - beta1**p.t)
        v_hat = p.v / (1 - beta2**p.t)
        p.value = (p.value - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype, copy=False)


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f4", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out


# -- gradient checking ---------------------------------------------------------


def numerical_grad(f, arr: np.ndarray, eps=1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f())
        flat[i] = orig - eps
        down = float(f())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor_ratio=1e-3) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor = floor_ratio * max|n|`` keeps entries that are exactly zero (where
    central differences only resolve round-off) from dominating the ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    floor = max(floor_ratio * float(np.abs(n).max()), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())
