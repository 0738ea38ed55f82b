"""Command-line entry point: ``convs2svc <command> --config run.ini ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import diffkernel as dk
from .config import RunConfig
from .errors import ConfigError, ConvS2SError, DataError, ModeError, NumericalError, TrainingDiverged
from .features import FeatureSequence, SpeakerProfile, denormalize, feature_weights, prepare, read_fseq, unstack, write_fseq
from .inference import ForwardAttentionConfig, convert, convert_realtime, moment_match
from .losses import total_loss
from .metrics import evaluate_pair, evaluation_report, report_json
from .model import ConvS2SModel
from .trainer import Checkpoint, ParallelSet, collate, config_hash, train

log = logging.getLogger("convs2svc")

STATS_FILE = "stats.json"
CONFIG_COPY = "config.ini"


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_text("")
    if getattr(args, "mode", None):
        cfg.model.mode = args.mode
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    return cfg.validate()


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_COPY)
    return out


def _manifest(args, cfg: RunConfig) -> corpus_mod.Manifest:
    path = getattr(args, "manifest", None) or cfg.paths.manifest
    if not path:
        raise ConfigError("no manifest given (use --manifest or [paths] manifest)")
    if not Path(path).exists():
        raise ConfigError(f"manifest {path} does not exist")
    return corpus_mod.Manifest.load(path)


def _save_profiles(path: Path, profiles) -> None:
    path.write_text(json.dumps([p.to_dict() for p in profiles], indent=1) + "\n")


def _load_profiles(path: Path) -> list[SpeakerProfile]:
    try:
        return [SpeakerProfile.from_dict(d) for d in json.loads(Path(path).read_text())]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read speaker statistics {path}: {exc}") from exc


# -- commands -----------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    spec = corpus_mod.SyntheticSpec(n_speakers=args.speakers, n_sentences=args.sentences,
                                    n_mcc=cfg.features.n_mcc, frame_period=cfg.features.frame_period,
                                    seed=args.seed if args.seed is not None else 0)
    corpus = corpus_mod.generate(spec)
    corpus.split = corpus_mod.split(corpus.sentences, args.train_fraction, spec.seed)
    path = corpus_mod.write_corpus(corpus, out)
    print(f"wrote {len(corpus.utterances)} utterances, manifest {path}")
    return 0


def cmd_stats(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    profiles = corpus_mod.manifest_profiles(_manifest(args, cfg))
    _save_profiles(out / STATS_FILE, profiles)
    for p in profiles:
        print(f"{p.name}: log F0 mean {p.mean[-1]:.4f} std {p.std[-1]:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    manifest = _manifest(args, cfg)
    if args.speaker_src:
        cfg.train.src_speaker = manifest.speaker_index(args.speaker_src)
    if args.speaker_trg:
        cfg.train.trg_speaker = manifest.speaker_index(args.speaker_trg)
    if cfg.model.mode != "pairwise":
        cfg.model.n_speakers = len(manifest.speakers)
    ckpt_dir = Path(args.out or cfg.paths.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(ckpt_dir / CONFIG_COPY)

    profiles = corpus_mod.manifest_profiles(manifest)
    _save_profiles(ckpt_dir / STATS_FILE, profiles)
    model_cfg = cfg.model_config()
    if model_cfg.mode == "pairwise":
        model_cfg.n_speakers = len(manifest.speakers)
        speakers = [cfg.train.src_speaker, cfg.train.trg_speaker]
    else:
        speakers = None
    pset = corpus_mod.manifest_parallel_set(manifest, profiles, cfg.features.r, "train", speakers)
    resume = None
    if args.resume:
        resume = Checkpoint.load(args.resume, config_hash(model_cfg, cfg.loss, cfg.train), args.force)
    try:
        result = train(pset, model_cfg, cfg.train, cfg.loss, resume=resume, checkpoint_dir=ckpt_dir)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            exc.checkpoint.save(ckpt_dir / "last_good.npz")
        raise
    np.savetxt(ckpt_dir / "history.tsv", result.history, delimiter="\t",
               header="\t".join(("total", "dec", "rec", "dal", "oal")), fmt="%.8g")
    final = result.history[-1, 0] if len(result.history) else float("nan")
    print(f"trained {result.checkpoint.iteration} iterations; final loss {final:.4f}; "
          f"checkpoint {ckpt_dir / 'last.npz'}")
    return 0


def _restore(args, cfg: RunConfig):
    ckpt_path = Path(args.checkpoint or Path(cfg.paths.checkpoint_dir) / "last.npz")
    ckpt = Checkpoint.load(ckpt_path)
    model = ckpt.restore_model()
    if args.mode and args.mode != model.mode:
        raise ModeError(f"checkpoint holds a {model.mode} model, --mode asked for {args.mode}")
    stats = Path(args.stats) if getattr(args, "stats", None) else ckpt_path.parent / STATS_FILE
    return model, _load_profiles(stats)


def _speaker_pair(args, manifest, cfg):
    names = manifest.speakers
    src = manifest.speaker_index(args.speaker_src) if args.speaker_src else cfg.train.src_speaker
    trg = manifest.speaker_index(args.speaker_trg) if args.speaker_trg else cfg.train.trg_speaker
    if max(src, trg) >= len(names):
        raise DataError("speaker index outside the manifest")
    return src, trg


def _run_conversion(model, x: np.ndarray, src: int, trg: int, fa):
    src_arg = src if model.specs["src_enc"].conditioned else None
    trg_arg = trg if model.specs["trg_enc"].conditioned else None
    if model.mode == "realtime":
        return convert_realtime(model, x, src_arg, trg_arg)
    return convert(model, x, src_arg, trg_arg, forward_attention=fa)


def _sources(args, manifest, src_name):
    if args.input:
        return [(Path(args.input).stem, read_fseq(args.input, manifest.n_mcc))]
    if args.sentence:
        return [(args.sentence, manifest.load_sequence(args.sentence, src_name))]
    split = None if args.split == "all" else args.split
    return [(s, manifest.load_sequence(s, src_name)) for s in manifest.sentences(split)]


def cmd_convert(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    manifest = _manifest(args, cfg)
    model, profiles = _restore(args, cfg)
    src, trg = _speaker_pair(args, manifest, cfg)
    r = model.config.r
    fa = ForwardAttentionConfig.from_ms(manifest.frame_period, r) if args.forward_attention == "on" else None
    (out / "converted").mkdir(exist_ok=True)
    (out / "attention").mkdir(exist_ok=True)
    for name, seq in _sources(args, manifest, manifest.speakers[src]):
        x = prepare(seq, profiles[src], r)
        res = _run_conversion(model, x.data, src, trg, fa)
        y = unstack(FeatureSequence(res.output.astype(np.float64), seq.frame_period * r, r, seq.n_mcc))
        try:
            y = moment_match(y, profiles[trg])
        except DataError as exc:
            log.warning("%s: %s; writing denormalized output without moment matching", name, exc)
            y = _unmatched(y, profiles[trg])
        write_fseq(out / "converted" / f"{name}.fseq", y)
        _write_attention(out / "attention" / name, res.attention, seq.frame_period * r)
        print(f"{name}: {x.length} -> {res.length} reduced frames")
    return 0


def _unmatched(y: FeatureSequence, profile: SpeakerProfile) -> FeatureSequence:
    data = np.asarray(y.data, dtype=np.float64).copy()
    voiced = y.voiced()
    data[y.n_mcc + 2] = voiced
    out = denormalize(y.with_data(data), profile)
    out.data[y.n_mcc, ~voiced] = 0.0
    return out


def write_pgm(path, matrix: np.ndarray) -> None:
    """Binary 8-bit grayscale image; source frames run bottom to top."""
    a = np.asarray(matrix, dtype=np.float64)
    peak = a.max() if a.size and a.max() > 0 else 1.0
    img = np.round(255.0 * (1.0 - np.clip(a / peak, 0.0, 1.0)))[::-1].astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def _write_attention(stem: Path, a: np.ndarray, frame_period: float) -> None:
    write_pgm(stem.with_suffix(".pgm"), a)
    write_fseq(stem.with_suffix(".fseq"), np.asarray(a, dtype=np.float64), frame_period)


def cmd_plot_attention(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    manifest = _manifest(args, cfg)
    model, profiles = _restore(args, cfg)
    src, trg = _speaker_pair(args, manifest, cfg)
    r = model.config.r
    fa = ForwardAttentionConfig.from_ms(manifest.frame_period, r) if args.forward_attention == "on" else None
    if not (args.input or args.sentence):
        raise ConfigError("plot-attention needs --sentence or --input")
    for name, seq in _sources(args, manifest, manifest.speakers[src]):
        res = _run_conversion(model, prepare(seq, profiles[src], r).data, src, trg, fa)
        _write_attention(out / f"attention_{name}", res.attention, seq.frame_period * r)
        nz = int((res.attention[:, 1:] > 0).sum(axis=0).max()) if res.attention.shape[1] > 1 else 0
        print(f"{name}: attention {res.attention.shape[0]}x{res.attention.shape[1]}, "
              f"max nonzeros per column {nz}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    conv_dir = Path(args.converted)
    files = sorted(conv_dir.glob("*.fseq"))
    if not files:
        raise DataError(f"no .fseq files in {conv_dir}")
    manifest = None if args.reference else _manifest(args, cfg)
    scores = []
    for f in files:
        conv = read_fseq(f, cfg.features.n_mcc)
        if args.reference:
            ref = read_fseq(Path(args.reference) / f.name, cfg.features.n_mcc)
        else:
            trg = manifest.speakers[manifest.speaker_index(args.speaker_trg)] if args.speaker_trg \
                else manifest.speakers[cfg.train.trg_speaker]
            ref = manifest.load_sequence(f.stem, trg)
        scores.append(evaluate_pair(f.stem, conv, ref))
    report = evaluation_report(scores)
    text = report_json(report)
    (out / "report.json").write_text(text)
    for key in ("mcd_db", "lfc", "ldr_deviation_pct"):
        s = report[key]
        if s["mean"] is None:
            print(f"{key}: undefined")
        else:
            print(f"{key}: {s['mean']:.4f} +/- {s['ci95']:.4f} (n={s['n']})")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    model_cfg = cfg.model_config()
    model_cfg.dtype = "float64"
    if model_cfg.mode != "pairwise":
        model_cfg.n_speakers = max(model_cfg.n_speakers, 2)
    model = ConvS2SModel(model_cfg)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    d = model_cfg.feature_dim
    utts = {(f"u{i}", k): rng.standard_normal((d, int(rng.integers(5, 9))))
            for i in range(2) for k in range(model_cfg.n_speakers)}
    pset = ParallelSet(utts, ["u0", "u1"], model_cfg.n_speakers)
    b = model_cfg.n_speakers - 1
    batch = collate(pset, [("u0", 0, 1), ("u1", b, 0)], np.float64, cfg.loss.iml)
    fw = feature_weights(model_cfg.r, model_cfg.n_mcc)
    params = list(model.store.params.values())
    picks = rng.choice(len(params), size=min(args.tensors, len(params)), replace=False)
    chosen = [params[i] for i in sorted(picks)]

    def f():
        out = model.forward(batch, training=True, rng=np.random.default_rng(1))
        return total_loss(out, batch, cfg.loss, fw)[0]

    err = dk.grad_check(f, chosen, max_coords=args.coords, seed=int(rng.integers(1 << 31)))
    print(f"max relative error {err:.3e} over {len(chosen)} parameter tensors "
          f"({model.num_parameters()} parameters, mode {model_cfg.mode})")
    if not err < args.tolerance:
        raise NumericalError(f"gradient check failed: {err:.3e} >= {args.tolerance:g}")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convs2svc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--mode", choices=("pairwise", "many2many", "any2many", "realtime"))
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help="output directory (default from [paths])")

    def speakers(sp):
        sp.add_argument("--speaker-src")
        sp.add_argument("--speaker-trg")

    g = sub.add_parser("gen-corpus", help="write a synthetic parallel corpus")
    common(g)
    g.add_argument("--speakers", type=int, default=3)
    g.add_argument("--sentences", type=int, default=60)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("stats", help="per-speaker feature statistics")
    common(s)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", help="train a model")
    common(t)
    speakers(t)
    t.add_argument("--manifest")
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true", help="resume despite a config-hash mismatch")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("convert", cmd_convert, "convert utterances"),
                                 ("plot-attention", cmd_plot_attention, "export attention matrices")):
        c = sub.add_parser(name, help=helptext)
        common(c)
        speakers(c)
        c.add_argument("--manifest")
        c.add_argument("--checkpoint")
        c.add_argument("--stats", help="speaker statistics JSON (default: next to the checkpoint)")
        c.add_argument("--forward-attention", choices=("on", "off"), default="off")
        c.add_argument("--input", help="single FSEQ file to convert")
        c.add_argument("--sentence")
        c.add_argument("--split", choices=("train", "eval", "all"), default="eval")
        c.set_defaults(func=func)

    e = sub.add_parser("evaluate", help="MCD / LFC / LDR report")
    common(e)
    e.add_argument("--converted", required=True, help="directory of converted FSEQ files")
    e.add_argument("--reference", help="directory of reference FSEQ files with matching names")
    e.add_argument("--manifest")
    e.add_argument("--speaker-trg")
    e.set_defaults(func=cmd_evaluate)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    common(gc, out=False)
    gc.add_argument("--tensors", type=int, default=12, help="parameter tensors to probe")
    gc.add_argument("--coords", type=int, default=4, help="coordinates per tensor")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConvS2SError as exc:
        print(f"convs2svc: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
