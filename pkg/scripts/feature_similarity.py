"""Cosine similarity of clean and adversarial features on the source and a transfer model."""
from _common import base_parser, load_scenes, print_table, run_attack

from unsegment.config import ModelSpec
from unsegment.evaluation import feature_similarity_histogram
from unsegment.segmodel import model_from_spec


def bar(counts, edges, width=40):
    top = max(counts.max(), 1)
    for c, lo in zip(counts, edges):
        if c:
            print(f"  {lo:+.2f} {'#' * round(width * c / top)} {c}")


def main():
    p = base_parser(__doc__)
    p.add_argument("--target-seed", type=int, default=1)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--lo", type=float, default=0.8, help="hide empty bins below this similarity")
    args = p.parse_args()
    scenes = load_scenes(args)
    source = model_from_spec(ModelSpec.parse(args.source_models.split(",")[0]))
    target = model_from_spec(ModelSpec(args.target_seed, source.spec.depth, source.spec.channels))
    clean = [s.image for s in scenes]
    rows = []
    for name in ("tap", "aa", "uad"):
        adv = [r.adversarial for r in run_attack(name, scenes, args)]
        hist = feature_similarity_histogram(source, target, clean, adv, bins=args.bins)
        rows.append([name, hist["source"].mean, hist["target"].mean])
        for key, h in hist.items():
            print(f"{name} {key}:")
            bar(h.counts, h.edges)
    print_table(["attack", "source mean", "target mean"], rows)


if __name__ == "__main__":
    main()
