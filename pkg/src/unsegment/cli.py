"""Command-line entry point: synth, attack, eval and gradcheck."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import attacks
from .config import RunConfig, dump_config, load_config, parse_model_list, parse_number
from .errors import ConfigurationError, FormatError
from .evaluation import evaluate
from .gradcheck import report as gradcheck_report
from .gradcheck import run_gradcheck
from .pnm import read_pgm, read_ppm, write_pgm, write_ppm
from .segmodel import SyntheticScene, generate_scene, model_from_spec

MANIFEST = "manifest.json"
ATTACK_MANIFEST = "attack.json"
PERTURBATION_GAIN = 16.0


class UsageError(Exception):
    pass


def _stem(index: int) -> str:
    return f"scene_{index:03d}"


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# synth


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    corpus = cfg.corpus
    entries = []
    for i in range(corpus.num_scenes):
        seed = corpus.seed * 100_003 + i
        scene = generate_scene(seed, corpus.height, corpus.width, corpus.num_objects)
        stem = _stem(i)
        write_ppm(out / f"{stem}.ppm", scene.image)
        mask_files = []
        for j, mask in enumerate(scene.masks):
            name = f"{stem}_mask_{j:02d}.pgm"
            write_pgm(out / name, mask)
            mask_files.append(name)
        entries.append({"index": i, "seed": seed, "image": f"{stem}.ppm", "masks": mask_files})
    _write_json(out / MANIFEST, {
        "height": corpus.height,
        "width": corpus.width,
        "num_objects": corpus.num_objects,
        "corpus_seed": corpus.seed,
        "scenes": entries,
    })
    (out / "config.ini").write_text(dump_config(cfg))
    print(f"wrote {len(entries)} scenes to {out}")


def load_corpus(directory: Path) -> tuple[list[SyntheticScene], list[dict]]:
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"corpus manifest missing: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    scenes = []
    for entry in manifest["scenes"]:
        image_path = directory / entry["image"]
        if not image_path.is_file():
            raise FileNotFoundError(f"corpus image missing: {image_path}")
        masks = []
        for name in entry["masks"]:
            if not (directory / name).is_file():
                raise FileNotFoundError(f"corpus mask missing: {directory / name}")
            masks.append(read_pgm(directory / name))
        scenes.append(SyntheticScene(read_ppm(image_path), masks, int(entry["seed"])))
    return scenes, manifest["scenes"]


# attack


@dataclass
class _Job:
    index: int
    cfg: RunConfig
    images: list[np.ndarray]
    seeds: list[int]


def _pick_other(rng: np.random.Generator, n: int, index: int, exclude=()) -> int:
    choices = [j for j in range(n) if j != index and j not in exclude]
    return index if not choices else int(choices[int(rng.integers(len(choices)))])


def attack_scene(cfg: RunConfig, images: list[np.ndarray], seeds: list[int], i: int) -> attacks.AttackResult:
    """Run ``cfg.attack_name`` on scene ``i``; the other scenes supply targets and competitors."""
    if cfg.attack_name not in attacks.ATTACK_NAMES:
        raise UsageError(f"unknown attack {cfg.attack_name!r}; choose from {', '.join(attacks.ATTACK_NAMES)}")
    config = cfg.attack
    image, n = images[i], len(images)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, seeds[i]]))
    # a separate stream chooses partner scenes so it never shifts the attack's own draws
    picker = np.random.default_rng(np.random.SeedSequence([config.seed, seeds[i], 1]))
    models = [model_from_spec(s) for s in cfg.source_models]
    name = cfg.attack_name
    if name == "uad":
        return attacks.uad_attack(models, image, config, rng)
    if name == "tap":
        return attacks.tap_attack(models[0], image, config, rng)
    if name == "attack-sam-k":
        return attacks.attack_sam_k(models[0], image, config.sam_k, config, rng)
    target = _pick_other(picker, n, i)
    if name == "aa":
        return attacks.aa_attack(models[0], image, images[target], config, rng)
    competition = _pick_other(picker, n, i, exclude=(target,))
    pool = [images[j] for j in range(n) if j != i] or [image]
    return attacks.pata_attack(
        models[0], image, images[target], images[competition], config,
        plus_plus=name == "pata++", pool=pool, rng=rng,
    )


def _run_one(job: _Job) -> attacks.AttackResult:
    return attack_scene(job.cfg, job.images, job.seeds, job.index)


def trace_csv(trace: list[dict]) -> str:
    columns: list[str] = []
    for row in trace:
        columns += [k for k in row if k not in columns]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in trace:
        writer.writerow([repr(row[c]) if isinstance(row.get(c), float) else row.get(c, "") for c in columns])
    return buf.getvalue()


def cmd_attack(cfg: RunConfig, corpus_dir: Path, out: Path) -> None:
    if cfg.attack_name not in attacks.ATTACK_NAMES:
        raise UsageError(f"unknown attack {cfg.attack_name!r}; choose from {', '.join(attacks.ATTACK_NAMES)}")
    scenes, entries = load_corpus(corpus_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = [s.image for s in scenes]
    seeds = [s.seed for s in scenes]
    jobs = [_Job(i, cfg, images, seeds) for i in range(len(scenes))]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    records = []
    for i, (entry, result) in enumerate(zip(entries, results)):
        stem = Path(entry["image"]).stem
        record = {"index": i, "seed": seeds[i], "adversarial": f"{stem}_adv.ppm",
                  "perturbation": f"{stem}_pert.ppm", "trace": f"{stem}_trace.csv"}
        write_ppm(out / record["adversarial"], result.adversarial)
        write_ppm(out / record["perturbation"], np.clip(0.5 + PERTURBATION_GAIN * result.perturbation, 0, 1))
        if result.deformed is not None:
            record["deformed"] = f"{stem}_deformed.ppm"
            write_ppm(out / record["deformed"], result.deformed)
        (out / record["trace"]).write_text(trace_csv(result.trace))
        records.append(record)
    _write_json(out / ATTACK_MANIFEST, {
        "attack": cfg.attack_name,
        "source_models": [str(m) for m in cfg.source_models],
        "scenes": records,
    })
    (out / "config.ini").write_text(dump_config(cfg))
    print(f"{cfg.attack_name}: attacked {len(records)} scenes into {out}")


# eval


def _load_adversarial(directory: Path, entries: list[dict]) -> tuple[str, str, list[np.ndarray]]:
    """Images of an attack directory; a bare copy of the corpus reads as the identity attack."""
    manifest_path = directory / ATTACK_MANIFEST
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text())
        names = [r["adversarial"] for r in manifest["scenes"]]
        attack, source = manifest["attack"], ",".join(manifest["source_models"])
    else:
        names = [e["image"] for e in entries]
        attack, source = "identity", "-"
    if len(names) != len(entries):
        raise ConfigurationError(f"{directory}: {len(names)} adversarial images for {len(entries)} scenes")
    images = []
    for name in names:
        if not (directory / name).is_file():
            raise FileNotFoundError(f"adversarial image missing: {directory / name}")
        images.append(read_ppm(directory / name))
    return attack, source, images


def cmd_eval(cfg: RunConfig, corpus_dir: Path, adv_dirs: list[Path], out: Path) -> list[str]:
    scenes, entries = load_corpus(corpus_dir)
    models = [model_from_spec(s) for s in cfg.target_models]
    out.mkdir(parents=True, exist_ok=True)
    lines, rows = [], []
    for directory in adv_dirs:
        attack, source, images = _load_adversarial(directory, entries)
        report = evaluate(models, scenes, images, cfg.prompt_seed)
        for name, metrics in report.per_model.items():
            lines.append(
                f"attack={attack} source={source} target={name} "
                f"miou={metrics.miou:.6f} miou_std={metrics.miou_std:.6f} "
                f"asr50={metrics.asr50:.6f} asr10={metrics.asr10:.6f} "
                f"per_mask_std={metrics.per_mask_std:.6f} count={metrics.count}"
            )
        rows += [{"attack": attack, "source": source, **r} for r in report.rows]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    buf = io.StringIO()
    fields = ["attack", "source", "scene", "mask", "prompt", "prompt_kind", "model", "iou"]
    writer = csv.DictWriter(buf, fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "iou": repr(float(r["iou"]))})
    (out / "per_mask.csv").write_text(buf.getvalue())
    (out / "config.ini").write_text(dump_config(cfg))
    for line in lines:
        print(line)
    return lines


# argument handling


def _number(text: str) -> float:
    try:
        return parse_number(text)
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unsegment", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="INI file with [run] [attack] [weights] [corpus]")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int)

    synth = sub.add_parser("synth", help="generate the synthetic scene corpus")
    common(synth)
    synth.add_argument("--num-scenes", type=int)

    attack = sub.add_parser("attack", help="attack every scene of a corpus")
    common(attack)
    attack.add_argument("--corpus", type=Path, required=True)
    attack.add_argument("--attack", dest="attack_name", metavar="NAME",
                        help="one of " + ", ".join(attacks.ATTACK_NAMES))
    attack.add_argument("--epsilon", type=_number, help="L-infinity radius, e.g. 8/255")
    attack.add_argument("--alpha", type=_number)
    attack.add_argument("--steps", type=int)
    attack.add_argument("--proxy-steps", type=int)
    attack.add_argument("--deform-steps", type=int)
    attack.add_argument("--workers", type=int)
    attack.add_argument("--beta", type=_number)
    attack.add_argument("--flow-fields", type=int)
    attack.add_argument("--source-models", help="comma-separated seed:depth:channels")

    ev = sub.add_parser("eval", help="score attacked images against clean predictions")
    common(ev)
    ev.add_argument("--corpus", type=Path, required=True)
    ev.add_argument("--adv", type=Path, action="append", required=True,
                    help="attack output directory (repeatable)")
    ev.add_argument("--target-models", help="comma-separated seed:depth:channels")

    grad = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    grad.add_argument("--instances", type=int, default=20)
    grad.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    attack = cfg.attack
    overrides = {
        "epsilon": getattr(args, "epsilon", None),
        "alpha": getattr(args, "alpha", None),
        "steps": getattr(args, "steps", None),
        "proxy_steps": getattr(args, "proxy_steps", None),
        "deform_steps": getattr(args, "deform_steps", None),
        "num_flow_fields": getattr(args, "flow_fields", None),
        "beta_pushaway": getattr(args, "beta", None),
    }
    if args.command != "synth" and args.seed is not None:
        overrides["seed"] = args.seed
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        attack = attack.replace(**overrides)
    corpus = cfg.corpus
    if args.command == "synth":
        if args.seed is not None:
            corpus = replace(corpus, seed=args.seed)
        if args.num_scenes is not None:
            corpus = replace(corpus, num_scenes=args.num_scenes)
    run = {}
    if getattr(args, "attack_name", None):
        run["attack_name"] = args.attack_name
    if getattr(args, "workers", None) is not None:
        run["workers"] = args.workers
    if getattr(args, "source_models", None):
        run["source_models"] = parse_model_list(args.source_models)
    if getattr(args, "target_models", None):
        run["target_models"] = parse_model_list(args.target_models)
    return replace(cfg, attack=attack, corpus=corpus, **run)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gradcheck":
        results = run_gradcheck(instances=args.instances, seed=args.seed)
        print(gradcheck_report(results))
        failed = [r.name for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
        return 1 if failed else 0
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "attack":
            cmd_attack(cfg, args.corpus, args.out)
        else:
            cmd_eval(cfg, args.corpus, args.adv, args.out)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigurationError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
