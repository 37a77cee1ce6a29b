"""Shared plumbing for the experiment scripts: corpus, attack runs and table printing."""
from __future__ import annotations

import argparse
import time

import numpy as np

from unsegment.cli import attack_scene
from unsegment.config import AttackConfig, RunConfig, parse_model_list, parse_number
from unsegment.pnm import to_bytes
from unsegment.segmodel import generate_corpus


def base_parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--num-scenes", type=int, default=20)
    p.add_argument("--corpus-seed", type=int, default=0)
    p.add_argument("--epsilon", type=parse_number, default=8 / 255)
    p.add_argument("--source-models", default="0")
    p.add_argument("--target-models", default="0,1,2:4:32")
    return p


def quantise(image: np.ndarray) -> np.ndarray:
    # results are compared on images as they would be saved to disk
    return to_bytes(image) / 255.0


def load_scenes(args):
    scenes = generate_corpus(args.num_scenes, args.corpus_seed)
    for s in scenes:
        s.image = quantise(s.image)
    return scenes


def run_attack(name: str, scenes, args, source: str | None = None, **overrides):
    """Attack every scene; returns AttackResults in corpus order."""
    attack = AttackConfig(epsilon=args.epsilon, alpha=min(2 / 255, args.epsilon)).replace(**overrides)
    cfg = RunConfig(attack_name=name, attack=attack,
                    source_models=parse_model_list(source or args.source_models))
    images = [s.image for s in scenes]
    seeds = [s.seed for s in scenes]
    start = time.perf_counter()
    results = [attack_scene(cfg, images, seeds, i) for i in range(len(scenes))]
    print(f"# {name} {overrides or ''} on {len(scenes)} scenes: {time.perf_counter() - start:.1f}s", flush=True)
    return results


def print_table(header: list[str], rows: list[list]) -> None:
    cells = [header] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))
