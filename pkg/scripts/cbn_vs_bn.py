"""Speaker-conditional batch norm against plain batch norm, same seeds and loss weights."""
import logging

from _common import corpus_spec, forward_attention, model_config, parser, train_config
from convs2svc.experiments import build_setup, cross_pairs, mean_attention_stats, run_training, score_pairs, summarize
from convs2svc.losses import LossWeights


def main():
    args = parser(__doc__).parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    spec = corpus_spec(args)
    setup = build_setup(spec)
    pairs = cross_pairs(spec.n_speakers)
    for norm in ("conditional-batch", "batch"):
        model = run_training(setup, model_config(args, norm=norm), train_config(args), LossWeights()).model
        ent = mean_attention_stats(model, setup, LossWeights(), pairs)["entropy"]
        s = summarize(score_pairs(model, setup, pairs, fa=forward_attention(spec)))
        print(f"{norm:18s} entropy {ent:.4f}  L1 {s['converted_l1']:.4f}  "
              f"slope error {s['median_slope_error']:.3f}")


if __name__ == "__main__":
    main()
