"""Acoustic feature sequences: normalization, stacking, position encodings, I/O.

A frame holds ``n_mcc`` mel-cepstral coefficients followed by log F0, coded
aperiodicity and the voiced/unvoiced flag. Sequences are stored (dim, frames).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

N_MCC = 28
FSEQ_MAGIC = b"FSQ1"
STD_FLOOR = 1e-6


def base_dim(n_mcc: int = N_MCC) -> int:
    return n_mcc + 3


def logf0_index(n_mcc: int = N_MCC) -> int:
    return n_mcc


def ap_index(n_mcc: int = N_MCC) -> int:
    return n_mcc + 1


def vuv_index(n_mcc: int = N_MCC) -> int:
    return n_mcc + 2


@dataclass
class FeatureSequence:
    data: np.ndarray
    frame_period: float = 8.0
    r: int = 1
    n_mcc: int = N_MCC
    # number of real (unpadded) base frames; set by stack_reduce
    orig_length: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ShapeError(f"feature data must be 2-d, got shape {self.data.shape}")
        if self.dim != base_dim(self.n_mcc) * self.r:
            raise ShapeError(f"dim {self.dim} != {base_dim(self.n_mcc)} x r={self.r}")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def reduced(self) -> bool:
        return self.r > 1

    @property
    def mcc(self) -> np.ndarray:
        self._require_base()
        return self.data[:self.n_mcc]

    @property
    def logf0(self) -> np.ndarray:
        self._require_base()
        return self.data[logf0_index(self.n_mcc)]

    @property
    def vuv(self) -> np.ndarray:
        self._require_base()
        return self.data[vuv_index(self.n_mcc)]

    def voiced(self) -> np.ndarray:
        return self.vuv > 0.5

    def _require_base(self):
        if self.r != 1:
            raise ShapeError("channel accessors need an unstacked (r=1) sequence")

    def with_data(self, data: np.ndarray) -> "FeatureSequence":
        return replace(self, data=data)


@dataclass
class SpeakerProfile:
    """Voiced-frame mean and std of the MCCs and log F0 of one speaker."""

    speaker_id: int
    name: str
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise DataError("profile mean/std must be matching 1-d arrays")
        if not np.all(self.std > 0):
            raise DataError(f"profile {self.name}: std must be positive")

    def to_dict(self) -> dict:
        return {"id": self.speaker_id, "name": self.name,
                "mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerProfile":
        return cls(int(d["id"]), str(d["name"]), np.array(d["mean"]), np.array(d["std"]))


def interpolate_logf0(seq: FeatureSequence) -> FeatureSequence:
    """Fill unvoiced log-F0 frames by linear interpolation, holding the edges."""
    voiced = seq.voiced()
    if not voiced.any():
        raise DataError("cannot interpolate log F0 of an all-unvoiced utterance")
    data = seq.data.copy()
    idx = np.arange(seq.length)
    k = logf0_index(seq.n_mcc)
    data[k, ~voiced] = np.interp(idx[~voiced], idx[voiced], data[k, voiced])
    return seq.with_data(data)


def _normalized_rows(seq: FeatureSequence, profile: SpeakerProfile) -> int:
    n = seq.n_mcc + 1
    if profile.mean.shape != (n,):
        raise DataError(f"profile has {profile.mean.shape[0]} features, sequence needs {n}")
    return n


def normalize(seq: FeatureSequence, profile: SpeakerProfile) -> FeatureSequence:
    """(x - mu) / sigma on MCCs and log F0; aperiodicity and V/UV untouched."""
    n = _normalized_rows(seq, profile)
    seq._require_base()
    data = seq.data.astype(np.float64, copy=True)
    data[:n] = (data[:n] - profile.mean[:, None]) / profile.std[:, None]
    return seq.with_data(data)


def denormalize(seq: FeatureSequence, profile: SpeakerProfile) -> FeatureSequence:
    n = _normalized_rows(seq, profile)
    seq._require_base()
    data = seq.data.astype(np.float64, copy=True)
    data[:n] = data[:n] * profile.std[:, None] + profile.mean[:, None]
    return seq.with_data(data)


def stack_reduce(seq: FeatureSequence, r: int) -> FeatureSequence:
    """Stack r consecutive frames into one, zero-padding the tail.

    The stacked vector is [frame_1; frame_2; ...; frame_r], so feature i of
    sub-frame j lands at row j * base_dim + i.
    """
    if r <= 0:
        raise ValueError("reduction factor must be positive")
    seq._require_base()
    d, n = seq.data.shape
    m = -(-n // r)
    padded = np.zeros((d, m * r), dtype=seq.data.dtype)
    padded[:, :n] = seq.data
    stacked = padded.reshape(d, m, r).transpose(2, 0, 1).reshape(r * d, m)
    return FeatureSequence(stacked, seq.frame_period * r, r, seq.n_mcc, orig_length=n)


def unstack(seq: FeatureSequence, length: int | None = None) -> FeatureSequence:
    """Invert :func:`stack_reduce`; ``length`` trims the zero padding."""
    r = seq.r
    d = base_dim(seq.n_mcc)
    m = seq.length
    frames = seq.data.reshape(r, d, m).transpose(1, 2, 0).reshape(d, m * r)
    if length is None:
        length = seq.orig_length if seq.orig_length is not None else m * r
    return FeatureSequence(frames[:, :length], seq.frame_period / r, 1, seq.n_mcc)


def position_encoding(dim: int, length: int, start: int = 0) -> np.ndarray:
    """Interleaved sinusoidal encoding, shape (dim, length)."""
    pos = np.arange(start, start + length, dtype=np.float64)[None, :]
    i = np.arange(dim)
    rate = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)[:, None]
    angle = pos * rate
    return np.where((i % 2 == 0)[:, None], np.sin(angle), np.cos(angle))


def add_position_encoding(seq: FeatureSequence) -> FeatureSequence:
    return seq.with_data(seq.data + position_encoding(seq.dim, seq.length))


def compute_speaker_stats(sequences, speaker_id: int = 0, name: str = "") -> SpeakerProfile:
    """Population mean/std over the voiced frames of a speaker's utterances."""
    sequences = list(sequences)
    if not sequences:
        raise DataError(f"no utterances for speaker {name or speaker_id}")
    n = sequences[0].n_mcc + 1
    cols = [s.data[:n, s.voiced()] for s in sequences]
    voiced = np.concatenate(cols, axis=1)
    if voiced.shape[1] == 0:
        raise DataError(f"speaker {name or speaker_id} has no voiced frames")
    mean = voiced.mean(axis=1)
    std = np.maximum(voiced.std(axis=1), STD_FLOOR)
    return SpeakerProfile(speaker_id, name, mean, std)


def feature_weights(r: int = 1, n_mcc: int = N_MCC) -> np.ndarray:
    """Per-row weights of the weighted L1 norm, alpha_i / r for stacked rows."""
    alpha = np.concatenate([np.full(n_mcc, 1.0 / n_mcc), [1.0 / 10, 1.0 / 50, 1.0 / 50]])
    return np.tile(alpha, r) / r


def prepare(seq: FeatureSequence, profile: SpeakerProfile, r: int) -> FeatureSequence:
    """Raw frames -> interpolated, normalized, stacked model input (no PE)."""
    return stack_reduce(normalize(interpolate_logf0(seq), profile), r)


def write_fseq(path, seq_or_data, frame_period: float | None = None) -> None:
    """Write the FSQ1 container: magic, u32 dim, u32 length, f64 period, f32 frames."""
    if isinstance(seq_or_data, FeatureSequence):
        data, fp = seq_or_data.data, seq_or_data.frame_period
    else:
        data, fp = np.asarray(seq_or_data), frame_period
    if fp is None:
        raise ValueError("frame period required")
    dim, length = data.shape
    payload = np.ascontiguousarray(data.T, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FSEQ_MAGIC + struct.pack("<IId", dim, length, float(fp)) + payload)


def read_fseq_raw(path) -> tuple[np.ndarray, float]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != FSEQ_MAGIC:
        raise DataError(f"{path}: not an FSQ1 file")
    dim, length, fp = struct.unpack("<IId", raw[4:20])
    body = raw[20:]
    if len(body) != 4 * dim * length:
        raise DataError(f"{path}: expected {4 * dim * length} payload bytes, found {len(body)}")
    frames = np.frombuffer(body, dtype="<f4").reshape(length, dim)
    return frames.T.astype(np.float64), fp


def read_fseq(path, n_mcc: int = N_MCC) -> FeatureSequence:
    data, fp = read_fseq_raw(path)
    d = base_dim(n_mcc)
    if data.shape[0] % d:
        raise DataError(f"{path}: dim {data.shape[0]} is not a multiple of {d}")
    return FeatureSequence(data, fp, data.shape[0] // d, n_mcc)


def reduced_window(ms: float, frame_period: float, r: int) -> int:
    """Nearest whole number of reduced frames spanning ``ms`` (half rounds up)."""
    return max(1, int(math.floor(ms / (frame_period * r) + 0.5)))
