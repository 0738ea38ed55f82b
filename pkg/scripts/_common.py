"""Settings shared by the experiment scripts (the same desk scale the acceptance suite uses)."""
import argparse

from convs2svc.corpus import SyntheticSpec
from convs2svc.inference import ForwardAttentionConfig
from convs2svc.model import ModelConfig
from convs2svc.trainer import TrainConfig


def parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--lr", type=float, default=1.5e-4)
    p.add_argument("--sentences", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    return p


def corpus_spec(args):
    return SyntheticSpec(n_speakers=3, n_sentences=args.sentences, min_frames=45, max_frames=90, seed=args.seed)


def train_config(args):
    return TrainConfig(batch_size=8, iterations=args.iterations, lr=args.lr, seed=args.seed,
                       checkpoint_every=0, log_every=100)


def model_config(args, mode="many2many", norm=""):
    return ModelConfig(mode=mode, n_speakers=3, hidden=args.hidden, key_dim=args.hidden, norm=norm,
                       dtype="float32", init_seed=args.seed)


def forward_attention(spec, r=3):
    return ForwardAttentionConfig.from_ms(spec.frame_period, r)
