"""Conversion procedures: autoregressive (plain and forward attention), real-time,
and output moment matching.

Inputs are model-ready sequences: normalized, interpolated and stacked, shape
(D, N), without position encodings (those are added here, exactly as in
training batches).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .errors import DataError, ModeError, ShapeError
from .features import FeatureSequence, SpeakerProfile, denormalize, position_encoding, reduced_window
from .metrics import local_slopes, path_from_pairs
from .model import ConvS2SModel

EARLY_STOP_STEPS = 5


@dataclass
class ForwardAttentionConfig:
    """Window around the previous attention peak, in reduced frames."""

    n0: int = 7     # backward
    n1: int = 13    # forward

    def __post_init__(self):
        if self.n0 < 1 or self.n1 < 1:
            raise ValueError("forward-attention windows must be at least one frame")

    @classmethod
    def from_ms(cls, frame_period: float, r: int, back_ms: float = 160.0,
                ahead_ms: float = 320.0) -> "ForwardAttentionConfig":
        return cls(reduced_window(back_ms, frame_period, r), reduced_window(ahead_ms, frame_period, r))

    def window(self, peak: int, n: int) -> tuple[int, int]:
        """Inclusive 0-based index range kept around ``peak``."""
        lo = max(0, peak - self.n0 + 1)
        hi = min(n - 1, peak + self.n1 - 1)
        assert lo <= peak <= hi
        return lo, hi


@dataclass
class ConversionResult:
    decoded: np.ndarray         # Y, (D, M)
    reconstructed: np.ndarray   # Y~, (D, M)
    attention: np.ndarray       # (N, M + 1) for autoregressive modes, identity for real-time
    use_reconstructor: bool = True

    @property
    def output(self) -> np.ndarray:
        return self.reconstructed if self.use_reconstructor else self.decoded

    @property
    def length(self) -> int:
        return self.decoded.shape[1]


def default_max_steps(n: int) -> int:
    return int(math.ceil(1.5 * n)) + 10


def _check_input(model: ConvS2SModel, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"conversion input must be (D, N), got {x.shape}")
    if x.shape[1] == 0:
        raise DataError("cannot convert an empty utterance")
    if x.shape[0] != model.config.feature_dim:
        raise ShapeError(f"input dim {x.shape[0]} != model feature dim {model.config.feature_dim}")
    return x


def _speakers(model: ConvS2SModel, src_spk, trg_spk):
    src_cond = model.specs["src_enc"].conditioned
    trg_cond = model.specs["trg_enc"].conditioned
    if trg_cond and trg_spk is None:
        raise ModeError(f"{model.mode} conversion needs a target speaker")
    if src_cond and src_spk is None:
        raise ModeError(f"{model.mode} conversion needs a source speaker")
    src = np.array([src_spk]) if src_cond else None
    trg = np.array([trg_spk]) if trg_cond else None
    return src, trg


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _restrict(a: np.ndarray, peak: int, fa: ForwardAttentionConfig) -> np.ndarray:
    lo, hi = fa.window(peak, len(a))
    out = np.zeros_like(a)
    out[lo:hi + 1] = a[lo:hi + 1]
    total = out.sum()
    if not total > 0:
        # all kept weights underflowed; fall back to the previous peak
        out[peak] = 1.0
        return out
    return out / total


def convert(model: ConvS2SModel, x, src_spk=None, trg_spk=None, max_steps: int | None = None,
            forward_attention: ForwardAttentionConfig | None = None,
            use_reconstructor: bool = True, early_stop: int = EARLY_STOP_STEPS) -> ConversionResult:
    """Autoregressive conversion with teacher-free feedback of decoded frames.

    The decoder output at step m is appended to the target stream, which
    starts with a zero frame. Generation stops after ``max_steps`` frames or
    once the attention peak has rested on the last source frame for
    ``early_stop`` consecutive steps. A final attention column over the full
    stream gives the reconstructor input, so Y~ and Y have equal length.
    """
    x = _check_input(model, x)
    if model.mode == "realtime":
        raise ModeError("real-time models convert with convert_realtime")
    d, n = x.shape
    max_steps = default_max_steps(n) if max_steps is None else int(max_steps)
    if max_steps < 1:
        raise ValueError("max_steps must be positive")
    src_spk, trg_spk = _speakers(model, src_spk, trg_spk)
    dtype = model.dtype
    pe = position_encoding(d, max_steps + 1).astype(dtype)
    scale = 1.0 / math.sqrt(model.key_dim)

    with dk.no_grad():
        src = (x + position_encoding(d, n)).astype(dtype)[None]
        k, v = model.src_encode(src, None, src_spk)
        keys, values = k.value[0], v.value[0]
        stream = np.zeros((d, max_steps + 1), dtype=dtype)
        cols: list[np.ndarray] = []
        peak, resting = None, 0

        def attend_last(length):
            q = model.trg_encode((stream[:, :length] + pe[:, :length])[None], None, trg_spk)
            a = _softmax(keys.T @ q.value[0, :, -1] * scale)
            if forward_attention is not None and peak is not None:
                a = _restrict(a, peak, forward_attention)
            return a

        steps = 0
        for m in range(max_steps):
            a = attend_last(m + 1)
            cols.append(a)
            r = values @ np.stack(cols, axis=1)
            y = model.trg_decode(r[None], None, trg_spk).value[0, :, -1]
            stream[:, m + 1] = y
            steps = m + 1
            peak = int(np.argmax(a))
            resting = resting + 1 if peak == n - 1 else 0
            if resting >= early_stop:
                break
        cols.append(attend_last(steps + 1))
        attention = np.stack(cols, axis=1)
        r = values @ attention
        y_rec = model.trg_reconstruct(r[None], None, trg_spk).value[0, :, 1:]
    return ConversionResult(stream[:, 1:steps + 1].copy(), y_rec, attention, use_reconstructor)


def convert_forward(model: ConvS2SModel, x, fa: ForwardAttentionConfig, src_spk=None, trg_spk=None,
                    max_steps: int | None = None, use_reconstructor: bool = True) -> ConversionResult:
    """Conversion with each attention column confined around the previous peak."""
    return convert(model, x, src_spk, trg_spk, max_steps, fa, use_reconstructor)


def convert_realtime(model: ConvS2SModel, x, src_spk=None, trg_spk=None,
                     use_reconstructor: bool = True) -> ConversionResult:
    """Frame-synchronous conversion with the attention fixed to the identity."""
    if model.mode != "realtime":
        raise ModeError(f"convert_realtime needs a real-time model, got mode {model.mode!r}")
    x = _check_input(model, x)
    d, n = x.shape
    src_spk, trg_spk = _speakers(model, src_spk, trg_spk)
    with dk.no_grad():
        src = (x + position_encoding(d, n)).astype(model.dtype)[None]
        _, v = model.src_encode(src, None, src_spk)
        y = model.trg_decode(v.value, None, trg_spk).value[0]
        y_rec = model.trg_reconstruct(v.value, None, trg_spk).value[0]
    return ConversionResult(y, y_rec, np.eye(n, dtype=model.dtype), use_reconstructor)


def moment_match(y: FeatureSequence, profile: SpeakerProfile) -> FeatureSequence:
    """Match voiced-frame mean/std of a normalized output to the target, then denormalize.

    In normalized space the target statistics are zero mean and unit std, so
    each MCC and log-F0 channel is standardized over its voiced frames. The
    V/UV channel is thresholded at 0.5.
    """
    if y.r != 1:
        raise ShapeError("moment matching expects an unstacked sequence")
    voiced = y.voiced()
    if not voiced.any():
        raise DataError("no voiced frames in generated features")
    rows = y.n_mcc + 1
    data = np.asarray(y.data, dtype=np.float64).copy()
    mean = data[:rows, voiced].mean(axis=1, keepdims=True)
    std = data[:rows, voiced].std(axis=1, keepdims=True)
    std = np.where(std > 1e-8, std, 1.0)
    data[:rows] = (data[:rows] - mean) / std
    data[rows + 1] = voiced.astype(np.float64)
    out = denormalize(y.with_data(data), profile)
    out.data[y.n_mcc, ~voiced] = 0.0    # unvoiced frames carry no log F0
    return out


def attention_peaks(a: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(a), axis=0)


def attention_path_slope(a: np.ndarray, window: int | None = None) -> float:
    """Median source-frames-per-output-frame slope of the attention peak path.

    Slopes are least-squares fits over sliding windows of columns (odd length,
    a quarter of the path by default), so staircase paths are not quantized.
    """
    peaks = attention_peaks(a)
    m = len(peaks)
    if m < 3:
        raise DataError("need at least three attention columns for a slope")
    w = max(3, m // 4) if window is None else min(window, m)
    w = w if w % 2 else w - 1
    path = path_from_pairs(np.stack([peaks, np.arange(m)], axis=1))
    return float(np.median(local_slopes(path, max(3, w))))
