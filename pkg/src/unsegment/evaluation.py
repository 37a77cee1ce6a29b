"""Segmentation-disruption metrics and feature-similarity diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .errors import ConfigurationError, PromptError
from .segmodel import Model, Prompt, SyntheticScene, decode_mask, encode_image, encode_prompt

BOX_SCALES = (1.0, 0.8, 1.2)
POINTS_PER_MASK = 5


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; two empty masks count as identical."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ConfigurationError(f"iou: mask shapes differ {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def scale_box(box, factor: float, height: int, width: int) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) * factor / 2, (y1 - y0) * factor / 2
    return (max(0.0, cx - hw), max(0.0, cy - hh), min(float(width), cx + hw), min(float(height), cy + hh))


def sample_prompts(gt_mask: np.ndarray, seed) -> list[Prompt]:
    """Five foreground points drawn from the mask, then its box at 100%, 80% and 120% size."""
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if not gt_mask.any():
        raise PromptError("cannot place prompts on an empty mask")
    h, w = gt_mask.shape
    rng = np.random.default_rng(seed)
    ys, xs = np.nonzero(gt_mask)
    picks = rng.choice(ys.size, size=POINTS_PER_MASK, replace=ys.size < POINTS_PER_MASK)
    prompts = [Prompt.point(xs[i], ys[i]) for i in picks]
    box = tight_box(gt_mask)
    prompts += [Prompt.from_box(*scale_box(box, s, h, w)) for s in BOX_SCALES]
    return prompts


def scene_prompts(scene: SyntheticScene, prompt_seed: int = 0) -> list[list[Prompt]]:
    return [sample_prompts(m, [prompt_seed, scene.seed, i]) for i, m in enumerate(scene.masks)]


@dataclass
class ModelMetrics:
    miou: float
    miou_std: float
    asr50: float
    asr10: float
    count: int
    per_mask_std: float = 0.0


def summarize(ious: Sequence[float], groups: Sequence | None = None) -> ModelMetrics:
    values = np.asarray(ious, dtype=np.float64)
    n = values.size
    if n == 0:
        return ModelMetrics(float("nan"), float("nan"), float("nan"), float("nan"), 0)
    mean = math.fsum(values) / n
    std = math.sqrt(math.fsum((values - mean) ** 2) / n)
    per_mask_std = 0.0
    if groups is not None:
        keys = sorted(set(groups))
        stds = []
        for key in keys:
            g = values[[i for i, k in enumerate(groups) if k == key]]
            gm = math.fsum(g) / g.size
            stds.append(math.sqrt(math.fsum((g - gm) ** 2) / g.size))
        per_mask_std = math.fsum(stds) / len(stds)
    return ModelMetrics(
        miou=mean,
        miou_std=std,
        asr50=int(np.count_nonzero(values < 0.5)) / n,
        asr10=int(np.count_nonzero(values < 0.1)) / n,
        count=n,
        per_mask_std=per_mask_std,
    )


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    per_model: dict[str, ModelMetrics] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def overall(self) -> ModelMetrics:
        return summarize([r["iou"] for r in self.rows])

    @property
    def miou(self) -> float:
        return self.overall.miou

    @property
    def asr50(self) -> float:
        return self.overall.asr50

    @property
    def asr10(self) -> float:
        return self.overall.asr10


def model_name(model: Model) -> str:
    return str(model.spec)


def evaluate(models: Sequence[Model] | Model, scenes: Sequence[SyntheticScene], adversarial_images,
             prompt_seed: int = 0) -> MetricsReport:
    """IoU between clean-image and adversarial-image predictions under identical prompts."""
    models = [models] if isinstance(models, Model) else list(models)
    adversarial_images = list(adversarial_images)
    if len(adversarial_images) != len(scenes):
        raise ConfigurationError(
            f"{len(scenes)} scenes but {len(adversarial_images)} adversarial images"
        )
    rows: list[dict] = []
    for model in models:
        name = model_name(model)
        for scene, adv in zip(scenes, adversarial_images):
            clean_feats = encode_image(model, scene.image)
            adv_feats = encode_image(model, adv)
            for mask_index, prompts in enumerate(scene_prompts(scene, prompt_seed)):
                for prompt_index, prompt in enumerate(prompts):
                    clean = decode_mask(model, clean_feats, encode_prompt(model, prompt, clean_feats))
                    attacked = decode_mask(model, adv_feats, encode_prompt(model, prompt, adv_feats))
                    rows.append({
                        "scene": scene.seed,
                        "mask": mask_index,
                        "prompt": prompt_index,
                        "prompt_kind": prompt.kind,
                        "model": name,
                        "iou": iou(clean.binary, attacked.binary),
                    })
    report = MetricsReport(rows=rows)
    for model in models:
        name = model_name(model)
        mine = [r for r in rows if r["model"] == name]
        report.per_model[name] = summarize(
            [r["iou"] for r in mine], [(r["scene"], r["mask"]) for r in mine]
        )
    report.metadata = {
        "prompt_seed": prompt_seed,
        "num_scenes": len(scenes),
        "std_over": "all mask-prompt pairs (per_mask_std: mean std over prompts within a mask)",
    }
    return report


def gt_miou(model: Model, scenes: Sequence[SyntheticScene], prompt_seed: int = 0) -> float:
    """Mean IoU of clean predictions against ground truth under the same prompt protocol."""
    values = []
    for scene in scenes:
        feats = encode_image(model, scene.image)
        for mask, prompts in zip(scene.masks, scene_prompts(scene, prompt_seed)):
            for prompt in prompts:
                pred = decode_mask(model, feats, encode_prompt(model, prompt, feats))
                values.append(iou(pred.binary, mask))
    return math.fsum(values) / len(values)


def feature_cosine(model: Model, a, b) -> float:
    return dm.cosine_similarity(encode_image(model, a), encode_image(model, b)).item()


@dataclass
class SimilarityHistogram:
    similarities: np.ndarray
    counts: np.ndarray
    edges: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.similarities))


def feature_similarity_histogram(source: Model, target: Model, clean_images, adversarial_images,
                                 bins: int = 20) -> dict[str, SimilarityHistogram]:
    """Per-image cosine between clean and adversarial features on both models."""
    clean_images, adversarial_images = list(clean_images), list(adversarial_images)
    if len(clean_images) != len(adversarial_images):
        raise ConfigurationError("need one adversarial image per clean image")
    out = {}
    for key, model in (("source", source), ("target", target)):
        sims = np.array([feature_cosine(model, c, a) for c, a in zip(clean_images, adversarial_images)])
        counts, edges = np.histogram(np.clip(sims, -1.0, 1.0), bins=bins, range=(-1.0, 1.0))
        out[key] = SimilarityHistogram(sims, counts, edges)
    return out


def relative_feature_similarity(model: Model, original, deformed, adversarial) -> float:
    """cos(f(adv), f(deformed)) - cos(f(adv), f(original))."""
    f_adv = encode_image(model, adversarial)
    to_target = dm.cosine_similarity(f_adv, encode_image(model, deformed)).item()
    to_original = dm.cosine_similarity(f_adv, encode_image(model, original)).item()
    return to_target - to_original
