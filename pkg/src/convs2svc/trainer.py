"""Mini-batching, Adam, the training loop and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffkernel import no_grad
from .errors import CheckpointError, ConfigError, DataError, NumericalError, TrainingDiverged
from .features import feature_weights, position_encoding
from .losses import LossWeights, total_loss
from .model import ConvS2SModel, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    iterations: int = 2000
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0
    bucket_tolerance: float = 0.25
    src_speaker: int = 0      # pairwise mode only
    trg_speaker: int = 1
    checkpoint_every: int = 500
    log_every: int = 100

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or self.batch_size <= 0:
            raise ConfigError("learning rate and batch size must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        return self


@dataclass
class ParallelSet:
    """Prepared utterances keyed by (sentence id, speaker index).

    Each array is a normalized, stacked (D, N) sequence without position
    encodings.
    """

    utterances: dict[tuple[str, int], np.ndarray]
    sentences: list[str]
    n_speakers: int
    frame_period: float = 24.0
    speaker_names: list[str] = field(default_factory=list)

    def get(self, sentence: str, speaker: int) -> np.ndarray:
        try:
            return self.utterances[(sentence, speaker)]
        except KeyError:
            raise DataError(f"sentence {sentence!r} missing for speaker {speaker}") from None

    def mean_length(self, sentence: str) -> float:
        lens = [a.shape[1] for (s, _), a in self.utterances.items() if s == sentence]
        return float(np.mean(lens))


@dataclass
class Batch:
    src: np.ndarray          # (b, D, N) with position encodings
    src_mask: np.ndarray     # (b, 1, N)
    src_len: np.ndarray
    trg: np.ndarray          # (b, D, M) zero frame + target, no encodings
    trg_in: np.ndarray       # trg + position encodings (target encoder input)
    trg_mask: np.ndarray
    trg_len: np.ndarray      # includes the zero frame
    src_spk: np.ndarray
    trg_spk: np.ndarray
    item_weight: np.ndarray
    sentences: list[str]


def collate(pset: ParallelSet, items, dtype=np.float64, iml: float = 1.0) -> Batch:
    """Pad (sentence, src speaker, trg speaker) triples into one batch."""
    if not items:
        raise DataError("empty batch")
    srcs = [pset.get(s, a) for s, a, _ in items]
    trgs = [pset.get(s, b) for s, _, b in items]
    d = srcs[0].shape[0]
    b = len(items)
    src_len = np.array([x.shape[1] for x in srcs])
    trg_len = np.array([y.shape[1] + 1 for y in trgs])
    n, m = src_len.max(), trg_len.max()
    src = np.zeros((b, d, n), dtype=dtype)
    trg = np.zeros((b, d, m), dtype=dtype)
    trg_in = np.zeros((b, d, m), dtype=dtype)
    pe_n, pe_m = position_encoding(d, n), position_encoding(d, m)
    for i, (x, y) in enumerate(zip(srcs, trgs)):
        src[i, :, :x.shape[1]] = x + pe_n[:, :x.shape[1]]
        trg[i, :, 1:y.shape[1] + 1] = y
        trg_in[i, :, :trg_len[i]] = trg[i, :, :trg_len[i]] + pe_m[:, :trg_len[i]]
    src_mask = (np.arange(n)[None, :] < src_len[:, None]).astype(dtype)[:, None, :]
    trg_mask = (np.arange(m)[None, :] < trg_len[:, None]).astype(dtype)[:, None, :]
    src_spk = np.array([a for _, a, _ in items], dtype=np.int64)
    trg_spk = np.array([bb for _, _, bb in items], dtype=np.int64)
    item_weight = np.where(src_spk == trg_spk, iml, 1.0) if iml != 1.0 else np.ones(b)
    return Batch(src, src_mask, src_len, trg, trg_in, trg_mask, trg_len,
                 src_spk, trg_spk, item_weight, [s for s, _, _ in items])


def sample_items(pset: ParallelSet, batch_size: int, rng: np.random.Generator, mode: str,
                 src_speaker: int = 0, trg_speaker: int = 1, tolerance: float = 0.25):
    """Draw a length-bucketed list of (sentence, src, trg) triples.

    Pairwise mode always uses the configured speaker pair; the multi-speaker
    modes draw source and target speakers independently and uniformly, so
    identity pairs appear with probability 1/K.
    """
    lengths = _length_table(pset)
    anchor = pset.sentences[rng.integers(len(pset.sentences))]
    lo, hi = lengths[anchor] * (1 - tolerance), lengths[anchor] * (1 + tolerance)
    pool = [s for s in pset.sentences if lo <= lengths[s] <= hi]
    picks = rng.choice(len(pool), size=batch_size, replace=len(pool) < batch_size)
    items = []
    for p in picks:
        if mode == "pairwise":
            a, b = src_speaker, trg_speaker
        else:
            a, b = rng.integers(pset.n_speakers, size=2)
        items.append((pool[int(p)], int(a), int(b)))
    return items


def _length_table(pset: ParallelSet) -> dict[str, float]:
    cached = getattr(pset, "_lengths", None)
    if cached is None:
        cached = {s: pset.mean_length(s) for s in pset.sentences}
        object.__setattr__(pset, "_lengths", cached)
    return cached


def make_batch(pset: ParallelSet, batch_size: int, rng: np.random.Generator, mode: str = "pairwise",
               src_speaker: int = 0, trg_speaker: int = 1, iml: float = 1.0,
               tolerance: float = 0.25, dtype=np.float64) -> Batch:
    items = sample_items(pset, batch_size, rng, mode, src_speaker, trg_speaker, tolerance)
    return collate(pset, items, dtype, iml)


class Adam:
    """Bias-corrected Adam over one flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, dtype=np.float64):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self._scratch = np.empty(size, dtype=dtype)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        if not np.isfinite(grads).all():
            bad = int((~np.isfinite(grads)).sum())
            raise NumericalError(f"Adam step aborted: {bad} non-finite gradient entries")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grads
        self.v *= b2
        tmp = self._scratch
        np.multiply(grads, grads, out=tmp)
        tmp *= 1 - b2
        self.v += tmp
        # params -= lr * m_hat / (sqrt(v_hat) + eps), built in place
        np.divide(self.v, 1 - b2 ** self.t, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(self.m, tmp, out=tmp)
        tmp *= self.lr / (1 - b1 ** self.t)
        params -= tmp


def adam_step(params: np.ndarray, grads: np.ndarray, moments: Adam) -> np.ndarray:
    moments.step(params, grads)
    return params


def clip_gradients(grads: np.ndarray, max_norm: float) -> float:
    norm = float(np.sqrt(np.dot(grads, grads)))
    if max_norm > 0 and norm > max_norm:
        grads *= max_norm / norm
    return norm


def config_hash(model_cfg: ModelConfig, weights: LossWeights, train_cfg: TrainConfig) -> str:
    """Digest of everything that fixes the parameter layout and the objective."""
    t = asdict(train_cfg)
    for k in ("iterations", "checkpoint_every", "log_every"):
        t.pop(k)
    blob = json.dumps({"model": asdict(model_cfg.resolved()), "loss": asdict(weights), "train": t},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    params: np.ndarray
    buffers: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    adam_t: int
    iteration: int
    config_hash: str
    rng_state: str
    model_config: dict
    history: np.ndarray       # (iterations, 5): total, dec, rec, dal, oal

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        np.savez(buf, params=self.params, buffers=self.buffers, adam_m=self.adam_m,
                 adam_v=self.adam_v, adam_t=np.int64(self.adam_t), iteration=np.int64(self.iteration),
                 config_hash=np.str_(self.config_hash), rng_state=np.str_(self.rng_state),
                 model_config=np.str_(json.dumps(self.model_config, sort_keys=True)),
                 history=self.history)
        path.write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path, expected_hash: str | None = None, force: bool = False) -> "Checkpoint":
        try:
            with np.load(path, allow_pickle=False) as z:
                ckpt = cls(z["params"].copy(), z["buffers"].copy(), z["adam_m"].copy(), z["adam_v"].copy(),
                           int(z["adam_t"]), int(z["iteration"]), str(z["config_hash"]),
                           str(z["rng_state"]), json.loads(str(z["model_config"])), z["history"].copy())
        except (OSError, KeyError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if expected_hash is not None and ckpt.config_hash != expected_hash and not force:
            raise CheckpointError(
                f"checkpoint {path} was written with a different configuration "
                f"({ckpt.config_hash[:12]} != {expected_hash[:12]}); pass force to override")
        return ckpt

    def restore_model(self) -> ConvS2SModel:
        model = ConvS2SModel(ModelConfig(**self.model_config))
        load_state(model, self)
        return model


def load_state(model: ConvS2SModel, ckpt: Checkpoint) -> None:
    store = model.store
    if store.flat_values.shape != ckpt.params.shape or store.flat_buffers.shape != ckpt.buffers.shape:
        raise CheckpointError("checkpoint does not match the model layout")
    store.flat_values[...] = ckpt.params
    store.flat_buffers[...] = ckpt.buffers


@dataclass
class TrainResult:
    model: ConvS2SModel
    checkpoint: Checkpoint
    history: np.ndarray


HISTORY_COLUMNS = ("total", "dec", "rec", "dal", "oal")


def _snapshot(model, adam, iteration, chash, rng, history) -> Checkpoint:
    store = model.store
    return Checkpoint(store.flat_values.copy(), store.flat_buffers.copy(), adam.m.copy(), adam.v.copy(),
                      adam.t, iteration, chash, json.dumps(rng.bit_generator.state),
                      asdict(model.config), np.array(history, dtype=np.float64).reshape(-1, 5))


def train(pset: ParallelSet, model_cfg: ModelConfig, train_cfg: TrainConfig, weights: LossWeights,
          resume: Checkpoint | None = None, checkpoint_dir=None, stop_at: int | None = None) -> TrainResult:
    """Run Adam on the total loss with teacher forcing.

    ``stop_at`` ends the run early (after that many total iterations) while
    keeping the schedule of a run to ``train_cfg.iterations``; it exists for
    interruption/resume tests.
    """
    train_cfg.validate()
    weights.validate()
    model_cfg = model_cfg.resolved()
    if model_cfg.mode == "pairwise":
        if train_cfg.src_speaker == train_cfg.trg_speaker:
            raise ConfigError("pairwise training needs two different speakers")
    elif pset.n_speakers < 2:
        raise ConfigError(f"{model_cfg.mode} training needs at least two speakers")
    if pset.n_speakers != model_cfg.n_speakers and model_cfg.mode != "pairwise":
        raise ConfigError(f"corpus has {pset.n_speakers} speakers, model expects {model_cfg.n_speakers}")

    chash = config_hash(model_cfg, weights, train_cfg)
    model = ConvS2SModel(model_cfg)
    adam = Adam(model.store.flat_values.size, train_cfg.lr, train_cfg.beta1, train_cfg.beta2,
                train_cfg.eps, model.dtype)
    rng = np.random.default_rng(train_cfg.seed)
    history: list[list[float]] = []
    start = 0
    if resume is not None:
        if resume.config_hash != chash:
            raise CheckpointError("resume checkpoint was written with a different configuration")
        load_state(model, resume)
        adam.m[...] = resume.adam_m
        adam.v[...] = resume.adam_v
        adam.t = resume.adam_t
        rng.bit_generator.state = json.loads(resume.rng_state)
        history = resume.history.tolist()
        start = resume.iteration

    fw = feature_weights(model_cfg.r, model_cfg.n_mcc)
    last_good = _snapshot(model, adam, start, chash, rng, history)
    end = train_cfg.iterations if stop_at is None else min(stop_at, train_cfg.iterations)
    store = model.store
    for it in range(start, end):
        batch = make_batch(pset, train_cfg.batch_size, rng, model_cfg.mode, train_cfg.src_speaker,
                           train_cfg.trg_speaker, weights.iml, train_cfg.bucket_tolerance, model.dtype)
        store.zero_grad()
        try:
            out = model.forward(batch, training=True, rng=rng)
            loss, parts = total_loss(out, batch, weights, fw)
            loss.backward()
            clip_gradients(store.flat_grads, train_cfg.grad_clip)
            adam.step(store.flat_values, store.flat_grads)
        except NumericalError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", last_good) from exc
        history.append([parts.total, parts.dec, parts.rec, parts.dal, parts.oal])
        done = it + 1
        if train_cfg.log_every and done % train_cfg.log_every == 0:
            log.info("iter %d total %.4f dec %.4f rec %.4f dal %.5f oal %.5f", done, *history[-1])
        if train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
            last_good = _snapshot(model, adam, done, chash, rng, history)
            if checkpoint_dir is not None:
                last_good.save(Path(checkpoint_dir) / f"ckpt_{done:06d}.npz")
    final = _snapshot(model, adam, max(end, start), chash, rng, history)
    if checkpoint_dir is not None:
        final.save(Path(checkpoint_dir) / "last.npz")
    return TrainResult(model, final, final.history)


def smoothed(values: np.ndarray, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return values
    window = max(1, min(window, len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def evaluate_loss(model: ConvS2SModel, pset: ParallelSet, items, weights: LossWeights, batch_size: int = 8):
    """Mean eval-mode loss breakdown over fixed items."""
    fw = feature_weights(model.config.r, model.config.n_mcc)
    rows = []
    with no_grad():
        for i in range(0, len(items), batch_size):
            batch = collate(pset, items[i:i + batch_size], model.dtype, weights.iml)
            out = model.forward(batch, training=False)
            _, parts = total_loss(out, batch, weights, fw)
            rows.append((len(batch.sentences), parts))
    n = sum(c for c, _ in rows)
    return {k: sum(c * getattr(p, k) for c, p in rows) / n for k in HISTORY_COLUMNS}
