"""Transfer across toy model variants, including an ensemble of two source models."""
from _common import base_parser, load_scenes, print_table, quantise, run_attack

from unsegment.config import parse_model_list
from unsegment.evaluation import evaluate
from unsegment.segmodel import model_from_spec


def main():
    p = base_parser(__doc__)
    p.add_argument("--sources", default="0;2:4:32;1:2:8;0,2:4:32",
                   help="semicolon-separated source lists; a comma list is an ensemble")
    p.set_defaults(target_models="0,1,2:4:32,1:2:8,3")
    args = p.parse_args()
    scenes = load_scenes(args)
    specs = parse_model_list(args.target_models)
    targets = [model_from_spec(s) for s in specs]
    rows = []
    for source in args.sources.split(";"):
        adv = [quantise(r.adversarial) for r in run_attack("uad", scenes, args, source=source)]
        report = evaluate(targets, scenes, adv)
        rows.append([source] + [m.miou for m in report.per_model.values()])
    print_table(["source"] + [str(s) for s in specs], rows)


if __name__ == "__main__":
    main()
