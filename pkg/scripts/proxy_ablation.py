"""Relative feature similarity at the end of the attack for several proxy iteration counts."""
import numpy as np
from _common import base_parser, load_scenes, print_table, run_attack

from unsegment.config import ModelSpec
from unsegment.evaluation import relative_feature_similarity
from unsegment.segmodel import model_from_spec


def main():
    p = base_parser(__doc__)
    p.add_argument("--proxy-steps", default="0,2,4,8")
    args = p.parse_args()
    scenes = load_scenes(args)
    model = model_from_spec(ModelSpec.parse(args.source_models.split(",")[0]))
    values = {}
    for tf in (int(t) for t in args.proxy_steps.split(",")):
        results = run_attack("uad", scenes, args, proxy_steps=tf)
        values[tf] = np.array([
            relative_feature_similarity(model, s.image, r.deformed, r.adversarial) for s, r in zip(scenes, results)
        ])
    base = values[min(values)]
    rows = [[tf, float(v.mean()), float(v.std()), float(np.mean(v > base))] for tf, v in values.items()]
    print_table(["T_f", "mean", "std", f"frac > T_f={min(values)}"], rows)


if __name__ == "__main__":
    main()
