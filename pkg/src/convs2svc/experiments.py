"""Shared helpers for experiment scripts and the acceptance suite:
corpus setup, training, conversion and oracle-based scoring.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import corpus as corpus_mod
from . import diffkernel as dk
from .features import FeatureSequence, interpolate_logf0, normalize, prepare, unstack
from .inference import ForwardAttentionConfig, attention_path_slope, convert, convert_realtime
from .losses import LossWeights, dal
from .metrics import aligned_weighted_l1, weighted_l1
from .model import ConvS2SModel, ModelConfig
from .trainer import ParallelSet, TrainConfig, TrainResult, collate, train


@dataclass
class Setup:
    corpus: corpus_mod.Corpus
    profiles: list
    r: int
    train_set: ParallelSet
    eval_set: ParallelSet
    eval_sentences: list[str]

    @property
    def n_speakers(self) -> int:
        return len(self.corpus.speakers)


def build_setup(spec: corpus_mod.SyntheticSpec, r: int = 3, train_fraction: float = 0.8,
                split_seed: int = 0) -> Setup:
    corpus = corpus_mod.generate(spec)
    corpus.split = corpus_mod.split(corpus.sentences, train_fraction, split_seed)
    profiles = corpus_mod.corpus_profiles(corpus)
    evals = corpus.sentences_in("eval")
    return Setup(corpus, profiles, r, corpus_mod.build_parallel_set(corpus, profiles, r),
                 corpus_mod.build_parallel_set(corpus, profiles, r, evals), evals)


def normalized_frames(setup: Setup, sentence: str, speaker: int) -> np.ndarray:
    """Interpolated, normalized, unstacked (r=1) frames of one utterance."""
    seq = setup.corpus.sequence(sentence, speaker)
    return normalize(interpolate_logf0(seq), setup.profiles[speaker]).data


def model_input(setup: Setup, sentence: str, speaker: int) -> FeatureSequence:
    return prepare(setup.corpus.sequence(sentence, speaker), setup.profiles[speaker], setup.r)


def output_frames(setup: Setup, stacked: np.ndarray) -> np.ndarray:
    seq = FeatureSequence(np.asarray(stacked, dtype=np.float64), r=setup.r,
                          n_mcc=setup.corpus.spec.n_mcc)
    return unstack(seq).data


def oracle_resampled_source(setup: Setup, sentence: str, src: int, trg: int) -> np.ndarray:
    """Source frames carried onto the target time axis along the oracle warp.

    Where several source frames map to one target frame their mean is used.
    """
    x = normalized_frames(setup, sentence, src)
    path = setup.corpus.oracle_warp(sentence, src, trg)
    m = setup.corpus.sequence(sentence, trg).length
    out = np.zeros((x.shape[0], m))
    counts = np.zeros(m)
    np.add.at(out.T, path[:, 1], x[:, path[:, 0]].T)
    np.add.at(counts, path[:, 1], 1)
    return out / counts


@dataclass
class ConversionScore:
    sentence: str
    src: int
    trg: int
    converted_l1: float
    baseline_l1: float
    slope: float
    true_ratio: float
    attention: np.ndarray | None = None


def score_conversion(model: ConvS2SModel, setup: Setup, sentence: str, src: int, trg: int,
                     fa: ForwardAttentionConfig | None = None) -> ConversionScore:
    x = model_input(setup, sentence, src).data
    src_arg = src if model.specs["src_enc"].conditioned else None
    trg_arg = trg if model.specs["trg_enc"].conditioned else None
    if model.mode == "realtime":
        res = convert_realtime(model, x, src_arg, trg_arg)
    else:
        res = convert(model, x, src_arg, trg_arg, forward_attention=fa)
    y = output_frames(setup, res.output)
    target = normalized_frames(setup, sentence, trg)
    conv = aligned_weighted_l1(y, target, n_mcc=setup.corpus.spec.n_mcc)
    base = weighted_l1(oracle_resampled_source(setup, sentence, src, trg), target)
    n = model_input(setup, sentence, src).length
    m = model_input(setup, sentence, trg).length
    slope = attention_path_slope(res.attention) if res.attention.shape[1] > 1 else float("nan")
    return ConversionScore(sentence, src, trg, conv, base, slope, n / m, res.attention)


def score_pairs(model, setup: Setup, pairs, sentences=None, fa=None) -> list[ConversionScore]:
    sentences = setup.eval_sentences if sentences is None else sentences
    return [score_conversion(model, setup, s, a, b, fa) for s in sentences for a, b in pairs]


def cross_pairs(k: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(k) for b in range(k) if a != b]


def mean_attention_stats(model: ConvS2SModel, setup: Setup, weights: LossWeights,
                         pairs, sentences=None) -> dict:
    """Teacher-forced attention statistics on held-out utterances (eval mode).

    Returns the mean DAL value and the mean column entropy of A over the
    valid target columns.
    """
    sentences = setup.eval_sentences if sentences is None else sentences
    dals, ents = [], []
    with dk.no_grad():
        for s in sentences:
            for a, b in pairs:
                batch = collate(setup.eval_set, [(s, a, b)], model.dtype, weights.iml)
                out = model.forward(batch, training=False)
                att = out.attention.value[0].astype(np.float64)
                dals.append(float(dal(att, weights.nu).value))
                p = np.clip(att, 1e-30, 1.0)
                ents.append(float(np.mean(-(att * np.log(p)).sum(axis=0))))
    return {"dal": float(np.mean(dals)), "entropy": float(np.mean(ents))}


def run_training(setup: Setup, model_cfg: ModelConfig, train_cfg: TrainConfig, weights: LossWeights,
                 **kwargs) -> TrainResult:
    return train(setup.train_set, model_cfg, train_cfg, weights, **kwargs)


def summarize(scores: list[ConversionScore]) -> dict:
    conv = np.array([s.converted_l1 for s in scores])
    base = np.array([s.baseline_l1 for s in scores])
    slope_err = np.array([abs(s.slope / s.true_ratio - 1) for s in scores if math.isfinite(s.slope)])
    return {
        "converted_l1": float(conv.mean()),
        "baseline_l1": float(base.mean()),
        "win_rate": float(np.mean(conv < base)),
        "median_slope_error": float(np.median(slope_err)) if len(slope_err) else float("nan"),
        "n": len(scores),
    }
