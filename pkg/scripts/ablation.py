"""Train many2many with and without the auxiliary losses and compare DAL and conversion error."""
import logging

from _common import corpus_spec, forward_attention, model_config, parser, train_config
from convs2svc.experiments import build_setup, cross_pairs, mean_attention_stats, run_training, score_pairs, summarize
from convs2svc.losses import LossWeights

VARIANTS = {
    "full": LossWeights(),
    "no rec/oal/iml": LossWeights(rec=0.0, oal=0.0, iml=0.0),
}


def main():
    args = parser(__doc__).parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    spec = corpus_spec(args)
    setup = build_setup(spec)
    pairs = cross_pairs(spec.n_speakers)
    for name, weights in VARIANTS.items():
        model = run_training(setup, model_config(args), train_config(args), weights).model
        stats = mean_attention_stats(model, setup, weights, pairs)
        s = summarize(score_pairs(model, setup, pairs, fa=forward_attention(spec)))
        print(f"{name:16s} DAL {stats['dal']:.3e}  entropy {stats['entropy']:.3f}  "
              f"L1 {s['converted_l1']:.4f}  baseline {s['baseline_l1']:.4f}  win {s['win_rate']:.2f}")


if __name__ == "__main__":
    main()
