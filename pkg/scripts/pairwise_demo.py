"""Train a pairwise model (speaker 0 -> 1) and report per-utterance error against the oracle baseline."""
import logging

from _common import corpus_spec, forward_attention, model_config, parser, train_config
from convs2svc.experiments import build_setup, run_training, score_pairs, summarize
from convs2svc.losses import LossWeights


def main():
    p = parser(__doc__)
    p.add_argument("--no-forward-attention", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    spec = corpus_spec(args)
    setup = build_setup(spec)
    model = run_training(setup, model_config(args, "pairwise"), train_config(args), LossWeights()).model
    fa = None if args.no_forward_attention else forward_attention(spec)
    scores = score_pairs(model, setup, [(0, 1)], fa=fa)
    for sc in scores:
        print(f"{sc.sentence}  converted {sc.converted_l1:.4f}  baseline {sc.baseline_l1:.4f}  "
              f"slope {sc.slope:.3f} (true {sc.true_ratio:.3f})")
    s = summarize(scores)
    print(f"mean converted {s['converted_l1']:.4f}  baseline {s['baseline_l1']:.4f}  win rate {s['win_rate']:.2f}")


if __name__ == "__main__":
    main()
