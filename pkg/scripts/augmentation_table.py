"""Transfer mIoU with gradient momentum and input diversity added to each attack."""
from _common import base_parser, load_scenes, print_table, quantise, run_attack

from unsegment.config import parse_model_list
from unsegment.evaluation import evaluate
from unsegment.segmodel import model_from_spec

VARIANTS = {
    "plain": {},
    "MI": {"momentum_mu": 1.0},
    "DI": {"input_diversity_prob": 0.5},
    "MI+DI": {"momentum_mu": 1.0, "input_diversity_prob": 0.5},
}


def main():
    p = base_parser(__doc__)
    p.set_defaults(target_models="1,2:4:32")
    p.add_argument("--attacks", default="tap,aa,uad")
    args = p.parse_args()
    scenes = load_scenes(args)
    targets = [model_from_spec(s) for s in parse_model_list(args.target_models)]
    rows = []
    for name in args.attacks.split(","):
        for label, extra in VARIANTS.items():
            adv = [quantise(r.adversarial) for r in run_attack(name, scenes, args, **extra)]
            report = evaluate(targets, scenes, adv)
            rows.append([name, label] + [m.miou for m in report.per_model.values()])
    print_table(["attack", "variant"] + [str(s) for s in parse_model_list(args.target_models)], rows)


if __name__ == "__main__":
    main()
