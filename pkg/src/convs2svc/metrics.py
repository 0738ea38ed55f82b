"""Objective evaluation: DTW, mel-cepstral distortion, log-F0 correlation and
local duration ratio, plus an aggregate report.

All functions take unstacked (r=1) sequences. Path indices are 0-based.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError, ShapeError
from .features import FeatureSequence, feature_weights

log = logging.getLogger(__name__)

MCD_FACTOR = 10.0 / math.log(10.0)
LDR_WINDOW = 33


@dataclass
class DtwPath:
    """Monotone alignment; column 0 indexes the first sequence, column 1 the second."""

    pairs: np.ndarray   # (J, 2) int
    cost: float

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64)
        if self.pairs.ndim != 2 or self.pairs.shape[1] != 2 or len(self.pairs) == 0:
            raise ShapeError("a DTW path is a non-empty (J, 2) index array")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def p(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def q(self) -> np.ndarray:
        return self.pairs[:, 1]

    def is_valid(self, n: int, m: int) -> bool:
        steps = np.diff(self.pairs, axis=0)
        ok_steps = all(tuple(s) in {(1, 0), (0, 1), (1, 1)} for s in steps)
        return ok_steps and tuple(self.pairs[0]) == (0, 0) and tuple(self.pairs[-1]) == (n - 1, m - 1)


def _as_frames(x) -> np.ndarray:
    arr = x.mcc if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a (dim, frames) array, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise DataError("cannot align an empty sequence")
    return arr


def dtw_from_cost(cost: np.ndarray) -> DtwPath:
    """Minimal cumulative-cost path through a local cost matrix.

    Ties prefer the diagonal predecessor, then (i-1, j), then (i, j-1).
    """
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        prev = acc[i - 1]
        # the (i, j-1) term makes each row a running minimum; resolve it in a scan
        diag_up = np.minimum(prev[:-1], prev[1:]) + cost[i - 1]
        row = acc[i]
        for j in range(1, m + 1):
            row[j] = min(diag_up[j - 1], row[j - 1] + cost[i - 1, j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        candidates = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        best = min(c[0] for c in candidates)
        for value, ni, nj in candidates:
            if value == best:
                i, j = ni, nj
                break
        path.append((i - 1, j - 1))
    return DtwPath(np.array(path[::-1]), float(acc[n, m]))


def dtw_align(a, b) -> DtwPath:
    """Align MCC sequences (dim, N) and (dim, M) under Euclidean frame cost."""
    a, b = _as_frames(a), _as_frames(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"feature dims differ: {a.shape[0]} vs {b.shape[0]}")
    return dtw_from_cost(cdist(a.T, b.T))


def mcd(x_hat, x) -> np.ndarray | float:
    """Mel-cepstral distortion in dB, skipping the 0th (energy) coefficient.

    Works per frame on (28,) vectors or column-wise on (28, T) arrays.
    """
    x_hat, x = np.asarray(x_hat, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ShapeError(f"MCD operands differ in shape: {x_hat.shape} vs {x.shape}")
    diff = x_hat[1:] - x[1:]
    out = MCD_FACTOR * np.sqrt(2.0 * np.sum(diff ** 2, axis=0))
    return float(out) if np.ndim(out) == 0 else out


def mcd_along_path(converted, reference, path: DtwPath | None = None) -> float:
    c, r = _as_frames(converted), _as_frames(reference)
    path = dtw_align(c, r) if path is None else path
    return float(np.mean(mcd(c[:, path.p], r[:, path.q])))


def _resample_to_reference(conv: FeatureSequence, path: DtwPath, n_ref: int):
    """Average log F0 and AND the V/UV flags of converted frames mapped to each reference frame."""
    sums = np.zeros(n_ref)
    counts = np.zeros(n_ref)
    voiced = np.ones(n_ref, dtype=bool)
    np.add.at(sums, path.q, conv.logf0[path.p])
    np.add.at(counts, path.q, 1)
    np.logical_and.at(voiced, path.q, conv.voiced()[path.p])
    return sums / counts, voiced


def lfc(converted: FeatureSequence, reference: FeatureSequence, path: DtwPath | None = None) -> float:
    """Pearson correlation of jointly voiced, DTW-aligned log-F0 contours."""
    path = dtw_align(converted, reference) if path is None else path
    f0, v = _resample_to_reference(converted, path, reference.length)
    keep = v & reference.voiced()
    if keep.sum() < 2:
        raise DataError(f"only {int(keep.sum())} jointly voiced frames; LFC needs at least 2")
    a, b = f0[keep], reference.logf0[keep]
    a, b = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if denom == 0.0:
        raise DataError("log-F0 contour is constant over the voiced frames; correlation undefined")
    return float(np.dot(a, b) / denom)


def local_slopes(path: DtwPath, window: int = LDR_WINDOW) -> np.ndarray:
    """Least-squares slope of converted index against reference index.

    ``path`` comes from ``dtw_align(converted, reference)``. One slope is
    returned per full window of ``window`` consecutive path points; a value
    above 1 means the converted utterance is locally longer than the reference.
    """
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and at least 3")
    x = path.q.astype(np.float64)   # reference frames
    y = path.p.astype(np.float64)   # converted frames
    if len(x) < window:
        return np.empty(0)

    def wsum(v):
        c = np.concatenate([[0.0], np.cumsum(v)])
        return c[window:] - c[:-window]
    sx, sy, sxx, sxy = wsum(x), wsum(y), wsum(x * x), wsum(x * y)
    num = window * sxy - sx * sy
    den = window * sxx - sx * sx
    with np.errstate(divide="ignore", invalid="ignore"):
        return num / den


def ldr(converted, reference, path: DtwPath | None = None, window: int = LDR_WINDOW) -> float | None:
    """Median local duration ratio of one utterance, or None if the path is too short."""
    path = dtw_align(converted, reference) if path is None else path
    s = local_slopes(path, window)
    s = s[np.isfinite(s)]
    if len(s) == 0:
        log.warning("path of %d points is shorter than the %d-point LDR window; skipped", len(path), window)
        return None
    return float(np.median(s))


def ldr_deviation(ratios) -> float:
    """Mean |LDR - 1| in percent over utterances with a defined LDR."""
    vals = np.array([v for v in ratios if v is not None], dtype=np.float64)
    if len(vals) == 0:
        raise DataError("no utterance had a path long enough for LDR")
    return float(np.mean(np.abs(vals - 1.0)) * 100.0)


def weighted_l1(a: np.ndarray, b: np.ndarray, r: int = 1, n_mcc: int = 28) -> float:
    """Frame-averaged weighted L1 distance between equally shaped sequences."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    w = feature_weights(r, n_mcc)[:a.shape[0]]
    return float(np.sum(w[:, None] * np.abs(a - b)) / a.shape[1])


def aligned_weighted_l1(converted: np.ndarray, target: np.ndarray, path: DtwPath | None = None,
                        n_mcc: int = 28) -> float:
    """Weighted L1 averaged over the pairs of a DTW path (MCC channels drive the alignment)."""
    converted, target = np.asarray(converted, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if path is None:
        path = dtw_align(converted[:n_mcc], target[:n_mcc])
    return weighted_l1(converted[:, path.p], target[:, path.q], 1, n_mcc)


def path_from_pairs(pairs) -> DtwPath:
    return DtwPath(np.asarray(pairs), float("nan"))


@dataclass
class UtteranceScores:
    name: str
    mcd: float
    lfc: float | None
    ldr: float | None


def evaluate_pair(name: str, converted: FeatureSequence, reference: FeatureSequence) -> UtteranceScores:
    path = dtw_align(converted, reference)
    try:
        corr = lfc(converted, reference, path)
    except DataError as exc:
        log.warning("%s: LFC undefined (%s)", name, exc)
        corr = None
    return UtteranceScores(name, mcd_along_path(converted, reference, path), corr,
                           ldr(converted, reference, path))


def _summary(values) -> dict:
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if len(vals) == 0:
        return {"mean": None, "ci95": None, "n": 0}
    half = 1.96 * vals.std() / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
    return {"mean": float(vals.mean()), "ci95": float(half), "n": int(len(vals))}


def evaluation_report(scores: list[UtteranceScores]) -> dict:
    """Per-utterance values and corpus means with normal-approximation 95% intervals."""
    ldrs = [s.ldr for s in scores]
    dev = [None if v is None else abs(v - 1.0) * 100.0 for v in ldrs]
    return {
        "utterances": [{"name": s.name, "mcd_db": s.mcd, "lfc": s.lfc, "ldr": s.ldr} for s in scores],
        "mcd_db": _summary([s.mcd for s in scores]),
        "lfc": _summary([s.lfc for s in scores]),
        "ldr_median": _summary(ldrs),
        "ldr_deviation_pct": _summary(dev),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"
