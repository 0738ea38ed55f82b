"""Synthetic parallel corpora with known speaker transforms and time warps.

Each sentence is a smooth latent trajectory over content time u in [0, 1].
A speaker renders it with its own affine map to MCCs, its own log-F0 range
and its own tempo, plus a mild per-utterance monotone warp of the time axis.
Because every rendition is derived from the same latent, the frame mapping
between any two speakers is known exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import N_MCC, FeatureSequence, base_dim, compute_speaker_stats, prepare, read_fseq, write_fseq
from .trainer import ParallelSet


@dataclass
class SyntheticSpec:
    n_speakers: int = 3
    n_sentences: int = 60
    min_frames: int = 60          # base-tempo length range, 8 ms frames
    max_frames: int = 120
    latent_dim: int = 4
    n_components: int = 4         # sinusoids per latent channel
    min_period: float = 20.0      # frames at base tempo
    max_period: float = 60.0
    n_mcc: int = N_MCC
    frame_period: float = 8.0
    tempo_range: tuple[float, float] = (0.8, 1.25)
    tempos: tuple[float, ...] | None = None       # explicit per-speaker tempo
    logf0_base_range: tuple[float, float] = (4.6, 5.4)
    logf0_scale_range: tuple[float, float] = (0.1, 0.3)
    voiced_threshold: float = -1.0  # latent gate; frames with z[1] below are unvoiced
    warp_strength: float = 0.04
    noise: float = 0.05
    identical_speakers: bool = False
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        tempos = self.tempos or self.tempo_range
        if min(tempos) <= 0:
            raise DataError("tempo factors must be positive")
        if self.tempos is not None and len(self.tempos) != self.n_speakers:
            raise DataError("need one tempo per speaker")
        if self.latent_dim < 2:
            raise DataError("latent_dim must be at least 2 (F0 and voicing channels)")
        if not 0 <= self.warp_strength < 1 / np.pi:
            raise DataError("warp_strength must keep the warp monotone (< 1/pi)")
        return self


@dataclass
class SpeakerTransform:
    name: str
    matrix: np.ndarray       # (n_mcc, latent_dim)
    offset: np.ndarray       # (n_mcc,)
    logf0_base: float
    logf0_scale: float
    aperiodicity: float
    tempo: float


@dataclass
class Utterance:
    sentence: str
    speaker: int
    features: FeatureSequence
    content_time: np.ndarray  # u of every frame


@dataclass
class Corpus:
    spec: SyntheticSpec
    speakers: list[SpeakerTransform]
    sentences: list[str]
    utterances: dict[tuple[str, int], Utterance]
    split: dict[str, str] = field(default_factory=dict)

    @property
    def speaker_names(self) -> list[str]:
        return [s.name for s in self.speakers]

    def sequence(self, sentence: str, speaker: int) -> FeatureSequence:
        try:
            return self.utterances[(sentence, speaker)].features
        except KeyError:
            raise DataError(f"no utterance for sentence {sentence!r}, speaker {speaker}") from None

    def oracle_warp(self, sentence: str, src: int, trg: int) -> np.ndarray:
        a = self.utterances[(sentence, src)].content_time
        b = self.utterances[(sentence, trg)].content_time
        return oracle_path(a, b)

    def sentences_in(self, tag: str) -> list[str]:
        if not self.split:
            return list(self.sentences)
        return [s for s in self.sentences if self.split.get(s) == tag]


def _speaker(spec: SyntheticSpec, k: int) -> SpeakerTransform:
    rng = np.random.default_rng([spec.seed, 1_000_003, 0 if spec.identical_speakers else k])
    matrix = rng.standard_normal((spec.n_mcc, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    offset = rng.normal(0.0, 1.0, spec.n_mcc)
    base = rng.uniform(*spec.logf0_base_range)
    scale = rng.uniform(*spec.logf0_scale_range)
    ap = rng.uniform(-3.0, -1.0)
    if spec.tempos is not None:
        tempo = float(spec.tempos[k])
    else:
        tempo = float(np.exp(rng.uniform(*np.log(spec.tempo_range))))
    if spec.identical_speakers and spec.tempos is None:
        tempo = 1.0
    return SpeakerTransform(f"spk{k}", matrix, offset, float(base), float(scale), float(ap), tempo)


def _latent(spec: SyntheticSpec, rng: np.random.Generator, base_frames: int):
    """Return z(u): latent channels as a function of content time."""
    periods = rng.uniform(spec.min_period, spec.max_period, (spec.latent_dim, spec.n_components))
    phases = rng.uniform(0, 2 * np.pi, (spec.latent_dim, spec.n_components))
    amps = rng.uniform(0.5, 1.0, (spec.latent_dim, spec.n_components))
    amps /= np.sqrt((amps ** 2).sum(axis=1, keepdims=True) / 2)   # unit variance per channel

    def z(u):
        t = np.asarray(u)[None, None, :] * (base_frames - 1)
        waves = amps[..., None] * np.sin(2 * np.pi * t / periods[..., None] + phases[..., None])
        return waves.sum(axis=1)

    return z


def _warp_fn(strength: float, rng: np.random.Generator):
    c = rng.uniform(-1.0, 1.0)

    def g(v):
        return v + strength * c * np.sin(np.pi * v)

    return g


def render(spec: SyntheticSpec, spk: SpeakerTransform, z, base_frames: int,
           rng: np.random.Generator) -> tuple[FeatureSequence, np.ndarray]:
    n = max(2, int(round(base_frames * spk.tempo)))
    v = np.linspace(0.0, 1.0, n)
    u = _warp_fn(spec.warp_strength, rng)(v)
    lat = z(u)
    mcc = spk.matrix @ lat + spk.offset[:, None]
    scale = np.linalg.norm(spk.matrix, axis=1)
    if spec.noise > 0:
        mcc = mcc + spec.noise * scale[:, None] * rng.standard_normal(mcc.shape)
    voiced = lat[1] > spec.voiced_threshold
    if not voiced.any():
        voiced[np.argmax(lat[1])] = True
    logf0 = spk.logf0_base + spk.logf0_scale * lat[0]
    if spec.noise > 0:
        logf0 = logf0 + spec.noise * spk.logf0_scale * rng.standard_normal(n)
    logf0 = np.where(voiced, logf0, 0.0)
    data = np.zeros((base_dim(spec.n_mcc), n))
    data[:spec.n_mcc] = mcc
    data[spec.n_mcc] = logf0
    data[spec.n_mcc + 1] = spk.aperiodicity
    data[spec.n_mcc + 2] = voiced.astype(float)
    return FeatureSequence(data, spec.frame_period, 1, spec.n_mcc), u


def oracle_path(u_src: np.ndarray, u_trg: np.ndarray) -> np.ndarray:
    """Monotone (src, trg) frame path through the exact content-time mapping.

    Steps are (1,0), (0,1) or (1,1); the path starts at (0,0) and ends at
    (len(src)-1, len(trg)-1).
    """
    n, m = len(u_src), len(u_trg)
    target = np.rint(np.interp(u_src, u_trg, np.arange(m))).astype(int)
    target[0], target[-1] = 0, m - 1
    target = np.maximum.accumulate(target)
    path = [(0, 0)]
    for i in range(1, n):
        j = path[-1][1]
        for jj in range(j + 1, target[i]):
            path.append((i - 1, jj))
        path.append((i, max(j, target[i])))
    return np.array(path, dtype=np.int64)


def generate(spec: SyntheticSpec) -> Corpus:
    spec.validate()
    speakers = [_speaker(spec, k) for k in range(spec.n_speakers)]
    sentences = [f"s{i:04d}" for i in range(spec.n_sentences)]
    utterances = {}
    for i, sent in enumerate(sentences):
        rng = np.random.default_rng([spec.seed, i])
        base = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        z = _latent(spec, rng, base)
        for k, spk in enumerate(speakers):
            urng = np.random.default_rng([spec.seed, i, k + 1])
            if spec.identical_speakers:
                urng = np.random.default_rng([spec.seed, i, 1])
            feats, u = render(spec, spk, z, base, urng)
            utterances[(sent, k)] = Utterance(sent, k, feats, u)
    return Corpus(spec, speakers, sentences, utterances)


def split(sentences, train_fraction: float, seed: int = 0) -> dict[str, str]:
    """Sentence-level train/eval assignment."""
    sentences = list(sentences)
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train fraction must lie strictly between 0 and 1")
    n_train = int(round(train_fraction * len(sentences)))
    if n_train < 1 or n_train >= len(sentences):
        raise DataError(f"too few sentences ({len(sentences)}) to split at {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(sentences))
    train = {sentences[i] for i in order[:n_train]}
    return {s: ("train" if s in train else "eval") for s in sentences}


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Write FSEQ files, oracle warps and manifest.json; return the manifest path."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    (out / "warps").mkdir(parents=True, exist_ok=True)
    entries, warps = [], []
    for sent in corpus.sentences:
        for k, name in enumerate(corpus.speaker_names):
            rel = f"feats/{name}/{sent}.fseq"
            (out / "feats" / name).mkdir(exist_ok=True)
            write_fseq(out / rel, corpus.sequence(sent, k))
            entries.append({"sentence": sent, "speaker": name, "path": rel,
                            "split": corpus.split.get(sent, "train")})
        for a in range(len(corpus.speakers)):
            for b in range(a + 1, len(corpus.speakers)):
                rel = f"warps/{sent}_{corpus.speaker_names[a]}_{corpus.speaker_names[b]}.json"
                path = corpus.oracle_warp(sent, a, b)
                (out / rel).write_text(json.dumps(path.tolist()) + "\n")
                warps.append({"sentence": sent, "src": corpus.speaker_names[a],
                              "trg": corpus.speaker_names[b], "path": rel})
    spec = asdict(corpus.spec)
    manifest = {"format": "convs2svc-manifest/1", "frame_period_ms": corpus.spec.frame_period,
                "n_mcc": corpus.spec.n_mcc, "speakers": corpus.speaker_names,
                "entries": entries, "warps": warps, "synthetic_spec": spec}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


@dataclass
class Manifest:
    root: Path
    speakers: list[str]
    entries: list[dict]
    warps: list[dict]
    frame_period: float
    n_mcc: int

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        m = cls(path.parent, list(raw["speakers"]), list(raw["entries"]), list(raw.get("warps", [])),
                float(raw.get("frame_period_ms", 8.0)), int(raw.get("n_mcc", N_MCC)))
        m.validate()
        return m

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            key = (e["sentence"], e["speaker"])
            if key in seen:
                raise DataError(f"duplicate manifest entry {key}")
            if e["speaker"] not in self.speakers:
                raise DataError(f"unknown speaker {e['speaker']!r} in manifest")
            seen.add(key)

    def speaker_index(self, name: str) -> int:
        if name.isdigit() and int(name) < len(self.speakers):
            return int(name)
        try:
            return self.speakers.index(name)
        except ValueError:
            raise DataError(f"unknown speaker {name!r}; known: {', '.join(self.speakers)}") from None

    def sentences(self, split_tag: str | None = None) -> list[str]:
        out = []
        for e in self.entries:
            if split_tag is None or e.get("split") == split_tag:
                if e["sentence"] not in out:
                    out.append(e["sentence"])
        return out

    def path_of(self, sentence: str, speaker: str) -> Path:
        for e in self.entries:
            if e["sentence"] == sentence and e["speaker"] == speaker:
                return self.root / e["path"]
        raise DataError(f"sentence {sentence!r} missing for speaker {speaker!r}")

    def load_sequence(self, sentence: str, speaker: str) -> FeatureSequence:
        return read_fseq(self.path_of(sentence, speaker), self.n_mcc)

    def warp_path(self, sentence: str, src: str, trg: str) -> np.ndarray:
        for w in self.warps:
            if w["sentence"] != sentence:
                continue
            if (w["src"], w["trg"]) == (src, trg):
                return np.array(json.loads((self.root / w["path"]).read_text()), dtype=np.int64)
            if (w["src"], w["trg"]) == (trg, src):
                p = np.array(json.loads((self.root / w["path"]).read_text()), dtype=np.int64)
                return p[:, ::-1].copy()
        raise DataError(f"no oracle warp for {sentence} {src}->{trg}")

    def with_split(self, assignment: dict[str, str]) -> "Manifest":
        entries = [dict(e, split=assignment[e["sentence"]]) for e in self.entries]
        return Manifest(self.root, self.speakers, entries, self.warps, self.frame_period, self.n_mcc)

    def save(self, path) -> None:
        path = Path(path)
        entries = [dict(e) for e in self.entries]
        raw = {"format": "convs2svc-manifest/1", "frame_period_ms": self.frame_period,
               "n_mcc": self.n_mcc, "speakers": self.speakers, "entries": entries, "warps": self.warps}
        path.write_text(json.dumps(raw, indent=1, sort_keys=True) + "\n")


def split_manifest(manifest: Manifest, train_fraction: float, seed: int = 0) -> tuple[Manifest, Manifest]:
    assignment = split(manifest.sentences(), train_fraction, seed)
    full = manifest.with_split(assignment)
    train = Manifest(full.root, full.speakers, [e for e in full.entries if e["split"] == "train"],
                     full.warps, full.frame_period, full.n_mcc)
    evals = Manifest(full.root, full.speakers, [e for e in full.entries if e["split"] == "eval"],
                     full.warps, full.frame_period, full.n_mcc)
    return train, evals


def speaker_profiles(sequences_by_speaker: dict[int, list], names=None) -> list:
    names = names or {}
    return [compute_speaker_stats(seqs, k, names[k] if k in names else f"spk{k}")
            for k, seqs in sorted(sequences_by_speaker.items())]


def corpus_profiles(corpus: Corpus, sentences=None) -> list:
    """Per-speaker statistics over ``sentences`` (default: the training split)."""
    sentences = corpus.sentences_in("train") if sentences is None else sentences
    by_spk = {k: [corpus.sequence(s, k) for s in sentences] for k in range(len(corpus.speakers))}
    return speaker_profiles(by_spk, dict(enumerate(corpus.speaker_names)))


def build_parallel_set(corpus: Corpus, profiles, r: int, sentences=None):
    """Prepared, stacked parallel utterances for training."""
    sentences = corpus.sentences_in("train") if sentences is None else list(sentences)
    utts = {(s, k): prepare(corpus.sequence(s, k), profiles[k], r).data
            for s in sentences for k in range(len(corpus.speakers))}
    return ParallelSet(utts, sentences, len(corpus.speakers), corpus.spec.frame_period * r,
                       corpus.speaker_names)


def manifest_profiles(manifest: Manifest, split_tag: str | None = "train") -> list:
    by_spk = {k: [manifest.load_sequence(s, name) for s in manifest.sentences(split_tag)
                  if _has(manifest, s, name)]
              for k, name in enumerate(manifest.speakers)}
    return speaker_profiles(by_spk, dict(enumerate(manifest.speakers)))


def _has(manifest: Manifest, sentence: str, speaker: str) -> bool:
    return any(e["sentence"] == sentence and e["speaker"] == speaker for e in manifest.entries)


def manifest_parallel_set(manifest: Manifest, profiles, r: int, split_tag: str | None = "train",
                          speakers=None):
    """Prepared parallel utterances of ``speakers`` (default: all) from a manifest."""
    speakers = range(len(manifest.speakers)) if speakers is None else speakers
    sentences = manifest.sentences(split_tag)
    if not sentences:
        raise DataError(f"manifest has no sentences in split {split_tag!r}")
    utts = {}
    for s in sentences:
        for k in speakers:
            seq = manifest.load_sequence(s, manifest.speakers[k])
            utts[(s, k)] = prepare(seq, profiles[k], r).data
    return ParallelSet(utts, sentences, len(manifest.speakers), manifest.frame_period * r,
                       list(manifest.speakers))
