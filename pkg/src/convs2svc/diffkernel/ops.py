"""Differentiable primitives.

Activations use a (batch, channel, time) layout. Ops accept plain numpy
arrays wherever an operand is a constant; those never receive gradients.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return make(a.value + b.value, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return make(a.value - b.value, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.value, b.shape))

    return make(a.value * b.value, (a, b), backward, "mul")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.value)
        full[index] = g
        a.accumulate(full)

    return make(np.array(a.value[index]), (a,), backward, "getitem")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(np.broadcast_to(g, a.shape))

    return make(np.asarray(a.value.sum()), (a,), backward, "sum")


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(g[tuple(sl)])

    return make(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward, "concat")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.value)

    def backward(g):
        a.accumulate(g * s * (1.0 - s))

    return make(s, (a,), backward, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return make(a.value @ b.value, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    def backward(g):
        a.accumulate(np.swapaxes(g, -1, -2))

    return make(np.ascontiguousarray(np.swapaxes(a.value, -1, -2)), (a,), backward, "transpose")


def conv1d(x, w, bias=None, dilation: int = 1, causal: bool = False) -> Tensor:
    """Dilated 1-D convolution that preserves the time length.

    x: (b, i, n), w: (o, i, k), bias: (o,). Causal mode left-pads by
    dilation*(k-1), which equals padding both sides and dropping the same
    number of trailing outputs. Non-causal mode pads symmetrically and needs
    an odd kernel.
    """
    x, w = as_tensor(x), as_tensor(w)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d x and w, got {x.shape}, {w.shape}")
    b, i, n = x.shape
    o, wi, k = w.shape
    if wi != i:
        raise ShapeError(f"conv1d channel mismatch: x has {i}, w expects {wi}")
    if n < 1:
        raise ShapeError("conv1d on zero-length input")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv1d bias shape {bias.shape} != ({o},)")
    if dilation < 1:
        raise ShapeError("dilation must be positive")
    span = dilation * (k - 1)
    if causal:
        left, right = span, 0
    else:
        if k % 2 == 0:
            raise ShapeError("non-causal conv1d needs an odd kernel")
        left = right = span // 2

    if k == 1:
        cols = x.value
    else:
        xp = np.zeros((b, i, n + left + right), dtype=x.value.dtype)
        xp[:, :, left:left + n] = x.value
        cols = np.stack([xp[:, :, j * dilation:j * dilation + n] for j in range(k)], axis=2)
        cols = cols.reshape(b, i * k, n)
    w2 = w.value.reshape(o, i * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.value[None, :, None]

    def backward(g):
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
            w.accumulate(gw.reshape(o, i, k))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g)
            if k == 1:
                x.accumulate(gcols)
                return
            gcols = gcols.reshape(b, i, k, n)
            gxp = np.zeros((b, i, n + left + right), dtype=g.dtype)
            for j in range(k):
                gxp[:, :, j * dilation:j * dilation + n] += gcols[:, :, j]
            x.accumulate(gxp[:, :, left:left + n])

    parents = (x, w) if bias is None else (x, w, bias)
    return make(out, parents, backward, "conv1d")


def gated_residual(h: Tensor, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """h[:, :o] * sigmoid(h[:, o:]) + x[:, :o] with o = h.channels / 2.

    The residual keeps the first o channels of x, so x may carry extra
    appended channels (speaker embeddings). ``mask`` (b, 1, n) zeroes padded
    frames of the result.
    """
    o = h.shape[1] // 2
    if h.shape[1] != 2 * o or x.shape[1] < o:
        raise ShapeError(f"gated_residual shapes {h.shape}, {x.shape}")
    lin = h.value[:, :o]
    gate = _sigmoid(h.value[:, o:])
    out = lin * gate + x.value[:, :o]
    if mask is not None:
        out *= mask

    def backward(g):
        if mask is not None:
            g = g * mask
        if h.requires_grad:
            gh = np.empty_like(h.value)
            gh[:, :o] = g * gate
            gh[:, o:] = g * lin * gate * (1.0 - gate)
            h.accumulate(gh)
        if x.requires_grad:
            if x.shape[1] == o:
                x.accumulate(g)
            else:
                gx = np.zeros_like(x.value)
                gx[:, :o] = g
                x.accumulate(gx)

    return make(out, (h, x), backward, "gated_residual")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.value.dtype) / (1.0 - p)

    def backward(g):
        x.accumulate(g * keep)

    return make(x.value * keep, (x,), backward, "dropout")


def append_embedding(x: Tensor, table: Tensor, index: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Append table[index[b]] broadcast along time to item b of x."""
    x, table = as_tensor(x), as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    b, c, n = x.shape
    if index.shape != (b,):
        raise ShapeError(f"embedding index shape {index.shape} != ({b},)")
    e = table.shape[1]
    emb = np.broadcast_to(table.value[index][:, :, None], (b, e, n))
    if mask is not None:
        emb = emb * mask
    out = np.concatenate([x.value, emb], axis=1)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g[:, :c])
        if table.requires_grad:
            ge = g[:, c:]
            if mask is not None:
                ge = ge * mask
            gt = np.zeros_like(table.value)
            np.add.at(gt, index, ge.sum(axis=2))
            table.accumulate(gt)

    return make(out, (x, table), backward, "append_embedding")


def softmax_columns(s, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the second-to-last axis (each column sums to one).

    ``mask`` broadcastable to s marks admissible rows; excluded entries are
    exactly zero and carry no gradient.
    """
    s = as_tensor(s)
    z = s.value
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape).astype(bool)
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=-2, keepdims=True)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=-2, keepdims=True)

    def backward(g):
        s.accumulate(p * (g - (g * p).sum(axis=-2, keepdims=True)))

    return make(p, (s,), backward, "softmax_columns")


def weighted_l1(a, b, feature_weights: np.ndarray, frame_weights: np.ndarray | None = None) -> Tensor:
    """Sum of alpha_i * w_n * |a - b| over features and frames.

    For (d, n) inputs the result is a scalar; for (batch, d, n) inputs one
    value per item is returned. ``frame_weights`` is (n,) or (batch, n) and
    carries masks and 1/length normalizers.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"weighted_l1 shape mismatch {a.shape} vs {b.shape}")
    feature_weights = np.asarray(feature_weights, dtype=a.value.dtype)
    if feature_weights.shape != (a.shape[-2],):
        raise ShapeError(f"feature weights {feature_weights.shape} do not match dim {a.shape[-2]}")
    diff = a.value - b.value
    wt = feature_weights[:, None]
    if frame_weights is not None:
        frame_weights = np.asarray(frame_weights, dtype=a.value.dtype)
        wt = wt * frame_weights[..., None, :]
    wt = np.broadcast_to(wt, diff.shape)
    out = (np.abs(diff) * wt).sum(axis=(-2, -1))

    def backward(g):
        gd = np.sign(diff) * wt * np.asarray(g)[..., None, None]
        if a.requires_grad:
            a.accumulate(gd)
        if b.requires_grad:
            b.accumulate(-gd)

    return make(out, (a, b), backward, "weighted_l1")


def weighted_sum(a, weights: np.ndarray) -> Tensor:
    """sum(a * weights) over the last two axes (one value per leading index)."""
    a = as_tensor(a)
    weights = np.broadcast_to(np.asarray(weights, dtype=a.value.dtype), a.shape)
    out = (a.value * weights).sum(axis=(-2, -1))

    def backward(g):
        a.accumulate(weights * np.asarray(g)[..., None, None])

    return make(out, (a,), backward, "weighted_sum")
