"""mIoU and attack success rates of every attack, white-box and on transfer targets."""
from _common import base_parser, load_scenes, print_table, quantise, run_attack

from unsegment.attacks import ATTACK_NAMES
from unsegment.config import parse_model_list
from unsegment.evaluation import evaluate
from unsegment.segmodel import model_from_spec


def main():
    p = base_parser(__doc__)
    p.add_argument("--attacks", default=",".join(ATTACK_NAMES))
    args = p.parse_args()
    scenes = load_scenes(args)
    targets = [model_from_spec(s) for s in parse_model_list(args.target_models)]
    rows = []
    for name in args.attacks.split(","):
        adv = [quantise(r.adversarial) for r in run_attack(name, scenes, args)]
        report = evaluate(targets, scenes, adv)
        for model, m in report.per_model.items():
            rows.append([name, model, m.miou, m.miou_std, m.asr50, m.asr10])
    print_table(["attack", "target", "mIoU", "std", "ASR@50", "ASR@10"], rows)


if __name__ == "__main__":
    main()
