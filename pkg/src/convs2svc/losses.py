"""Training objectives.

Batched losses return one value per item so that padded batches can be
weighted and masked per utterance. Lengths are true (unpadded) frame counts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor
from .errors import ConfigError, ShapeError


@dataclass
class LossWeights:
    rec: float = 1.0        # lambda_r
    dal: float = 2000.0     # lambda_d
    oal: float = 2000.0     # lambda_o
    iml: float = 1.0        # lambda_i
    nu: float = 0.3
    rho: float = 0.3

    def validate(self) -> "LossWeights":
        if min(self.rec, self.dal, self.oal, self.iml) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.nu <= 0 or self.rho <= 0:
            raise ConfigError("nu and rho must be positive")
        return self


def guided_weight_matrix(n: int, m: int, nu: float) -> np.ndarray:
    """w[n, m] = 1 - exp(-(n/N - m/M)^2 / (2 nu^2)) with 1-based n and m."""
    if n < 1 or m < 1:
        raise ShapeError("weight matrix needs positive sizes")
    rows = np.arange(1, n + 1) / n
    cols = np.arange(1, m + 1) / m
    diff = rows[:, None] - cols[None, :]
    return -np.expm1(-(diff ** 2) / (2.0 * nu ** 2))


def _lengths(a: Tensor, src_len, trg_len):
    b, n, m = a.shape
    src_len = np.full(b, n) if src_len is None else np.asarray(src_len)
    trg_len = np.full(b, m) if trg_len is None else np.asarray(trg_len)
    return src_len, trg_len


def _padded_weights(b, n, m, rows, cols, nu, scale):
    w = np.zeros((b, n, m))
    for i in range(b):
        w[i, :rows[i], :cols[i]] = guided_weight_matrix(int(rows[i]), int(cols[i]), nu) * scale[i]
    return w


def dal(a, nu: float, src_len=None, trg_len=None) -> Tensor:
    """Diagonal attention loss (1/NM) * sum(W(nu) * A)."""
    a = dk.as_tensor(a)
    single = a.ndim == 2
    if single:
        a = _expand(a)
    src_len, trg_len = _lengths(a, src_len, trg_len)
    b, n, m = a.shape
    w = _padded_weights(b, n, m, src_len, trg_len, nu, 1.0 / (src_len * trg_len))
    out = dk.weighted_sum(a, w.astype(a.dtype))
    return _squeeze(out) if single else out


def oal(a, rho: float, src_len=None, trg_len=None) -> Tensor:
    """Orthogonal attention loss (1/N^2) * sum(W_NxN(rho) * A A^T).

    Columns beyond the target length are dropped before forming A A^T.
    """
    a = dk.as_tensor(a)
    single = a.ndim == 2
    if single:
        a = _expand(a)
    src_len, trg_len = _lengths(a, src_len, trg_len)
    b, n, m = a.shape
    if np.any(trg_len < m):
        col_mask = (np.arange(m)[None, :] < trg_len[:, None]).astype(a.dtype)[:, None, :]
        a = dk.mul(a, col_mask)
    gram = dk.matmul(a, dk.transpose(a))
    w = _padded_weights(b, n, n, src_len, src_len, rho, 1.0 / (src_len.astype(float) ** 2))
    out = dk.weighted_sum(gram, w.astype(a.dtype))
    return _squeeze(out) if single else out


def _expand(a: Tensor) -> Tensor:
    return dk.getitem(a, (None,))


def _squeeze(t: Tensor) -> Tensor:
    return dk.getitem(t, 0)


def dec_loss(y, x, feature_weights, trg_len=None) -> Tensor:
    """(1/M) ||Y[:, :M-1] - X[:, 1:M]||, with X the zero-prefixed target stream."""
    y, x = dk.as_tensor(y), dk.as_tensor(x)
    single = y.ndim == 2
    yv = y if not single else _expand(y)
    xv = x.value if not single else x.value[None]
    b, d, m = yv.shape
    trg_len = np.full(b, m) if trg_len is None else np.asarray(trg_len)
    shifted = np.zeros_like(xv)
    shifted[:, :, :-1] = xv[:, :, 1:]
    idx = np.arange(m)[None, :]
    frame_w = (idx < (trg_len[:, None] - 1)) / trg_len[:, None]
    out = dk.weighted_l1(yv, shifted, feature_weights, frame_w)
    return _squeeze(out) if single else out


def rec_loss(y_rec, x, feature_weights, trg_len=None) -> Tensor:
    """(1/M) ||Y~ - X|| over the valid target frames."""
    y_rec, x = dk.as_tensor(y_rec), dk.as_tensor(x)
    single = y_rec.ndim == 2
    yv = y_rec if not single else _expand(y_rec)
    xv = x.value if not single else x.value[None]
    b, d, m = yv.shape
    trg_len = np.full(b, m) if trg_len is None else np.asarray(trg_len)
    idx = np.arange(m)[None, :]
    frame_w = (idx < trg_len[:, None]) / trg_len[:, None]
    out = dk.weighted_l1(yv, xv, feature_weights, frame_w)
    return _squeeze(out) if single else out


@dataclass
class LossBreakdown:
    total: float
    dec: float
    rec: float
    dal: float
    oal: float

    def as_dict(self) -> dict:
        return {"total": self.total, "dec": self.dec, "rec": self.rec, "dal": self.dal, "oal": self.oal}


def total_loss(outputs, batch, weights: LossWeights, feature_weights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of all terms, averaged over batch items.

    Items with equal source and target speaker (identity mapping) are scaled
    by ``weights.iml``; ``batch.item_weight`` carries that factor.
    """
    l_dec = dec_loss(outputs.decoded, batch.trg, feature_weights, batch.trg_len)
    l_rec = rec_loss(outputs.reconstructed, batch.trg, feature_weights, batch.trg_len)
    l_dal = dal(outputs.attention, weights.nu, batch.src_len, batch.trg_len)
    l_oal = oal(outputs.attention, weights.rho, batch.src_len, batch.trg_len)
    per_item = dk.add(dk.add(l_dec, dk.mul(l_rec, weights.rec)),
                      dk.add(dk.mul(l_dal, weights.dal), dk.mul(l_oal, weights.oal)))
    item_w = np.asarray(batch.item_weight, dtype=per_item.dtype) / len(batch.item_weight)
    total = dk.sum_all(dk.mul(per_item, item_w))
    breakdown = LossBreakdown(float(total.value), float(l_dec.value.mean()), float(l_rec.value.mean()),
                              float(l_dal.value.mean()), float(l_oal.value.mean()))
    return total, breakdown
