"""Batch / instance normalization, optionally conditioned on a speaker index."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NormStateError, ShapeError
from .tensor import ParamStore, Tensor, as_tensor, make

NORM_MODES = ("batch", "conditional-batch", "instance", "conditional-instance", "none")
EPS = 1e-5
MOMENTUM = 0.1


@dataclass
class NormParams:
    """Affine parameters and running statistics of one normalization layer.

    Conditional modes keep one gamma/beta row per speaker, shape (K, C);
    plain modes use shape (C,).
    """

    gamma: Tensor | None
    beta: Tensor | None
    running_mean: Tensor | None
    running_var: Tensor | None
    updates: Tensor | None
    mode: str
    channels: int

    @property
    def conditional(self) -> bool:
        return self.mode.startswith("conditional")

    @classmethod
    def create(cls, store: ParamStore, name: str, channels: int, mode: str, n_speakers: int = 1):
        if mode not in NORM_MODES:
            raise ValueError(f"unknown norm mode {mode!r}")
        if mode == "none":
            return cls(None, None, None, None, None, mode, channels)
        shape = (n_speakers, channels) if mode.startswith("conditional") else (channels,)
        gamma = store.parameter(f"{name}.gamma", np.ones(shape))
        beta = store.parameter(f"{name}.beta", np.zeros(shape))
        rm = rv = updates = None
        if mode.endswith("batch"):
            rm = store.buffer(f"{name}.running_mean", np.zeros(channels))
            rv = store.buffer(f"{name}.running_var", np.ones(channels))
            updates = store.buffer(f"{name}.updates", np.zeros(1))
        return cls(gamma, beta, rm, rv, updates, mode, channels)


def batch_norm(x, p: NormParams, speaker=None, training: bool = False,
               mask: np.ndarray | None = None) -> Tensor:
    """Normalize x (b, d, n) per channel, then apply the (speaker's) affine map.

    Batch modes pool statistics over batch and time in training and use the
    running averages otherwise; instance modes always pool over time per item.
    ``mask`` (b, 1, n) excludes padded frames from the statistics and zeroes
    them in the output.
    """
    x = as_tensor(x)
    if p.mode == "none":
        return x
    if x.ndim != 3 or x.shape[1] != p.channels:
        raise ShapeError(f"norm expects (b, {p.channels}, n), got {x.shape}")
    b, d, n = x.shape
    if p.conditional:
        if speaker is None:
            raise ShapeError("conditional normalization needs a speaker index")
        speaker = np.broadcast_to(np.asarray(speaker, dtype=np.int64), (b,))
        gamma = p.gamma.value[speaker][:, :, None]
        beta = p.beta.value[speaker][:, :, None]
    else:
        gamma = p.gamma.value[None, :, None]
        beta = p.beta.value[None, :, None]
    m = np.ones((b, 1, n), dtype=x.value.dtype) if mask is None else np.asarray(mask, dtype=x.value.dtype)

    per_item = p.mode.endswith("instance")
    axes = (2,) if per_item else (0, 2)
    use_batch_stats = training or per_item
    if use_batch_stats:
        count = np.maximum(m.sum(axis=axes, keepdims=True), 1.0)
        mu = (x.value * m).sum(axis=axes, keepdims=True) / count
        centered = (x.value - mu) * m
        var = (centered ** 2).sum(axis=axes, keepdims=True) / count
        inv = 1.0 / np.sqrt(var + EPS)
        xhat = centered * inv
        if training and not per_item:
            rm, rv = p.running_mean.value, p.running_var.value
            rm *= 1.0 - MOMENTUM
            rm += MOMENTUM * mu.reshape(d)
            rv *= 1.0 - MOMENTUM
            rv += MOMENTUM * var.reshape(d)
            p.updates.value += 1
    else:
        if p.updates.value[0] == 0:
            raise NormStateError(f"{p.gamma.name}: eval-mode batch norm before any statistics update")
        inv = (1.0 / np.sqrt(p.running_var.value + EPS))[None, :, None]
        xhat = (x.value - p.running_mean.value[None, :, None]) * inv * m
    out = (gamma * xhat + beta) * m

    def backward(g):
        g = g * m
        if p.gamma.requires_grad or p.beta.requires_grad:
            gg = (g * xhat).sum(axis=2)
            gb = g.sum(axis=2)
            if p.conditional:
                tg = np.zeros_like(p.gamma.value)
                tb = np.zeros_like(p.beta.value)
                np.add.at(tg, speaker, gg)
                np.add.at(tb, speaker, gb)
            else:
                tg, tb = gg.sum(axis=0), gb.sum(axis=0)
            p.gamma.accumulate(tg)
            p.beta.accumulate(tb)
        if x.requires_grad:
            gx = g * gamma
            if use_batch_stats:
                mean_g = gx.sum(axis=axes, keepdims=True) / count
                mean_gx = (gx * xhat).sum(axis=axes, keepdims=True) / count
                x.accumulate(inv * (gx - mean_g - xhat * mean_gx) * m)
            else:
                x.accumulate(gx * inv)

    parents = (x, p.gamma, p.beta)
    return make(out, parents, backward, "batch_norm")
