"""Prompt-agnostic adversarial attacks on a toy promptable segmentation model.

The attack searches for a smooth deformation of the input whose features an
L-infinity bounded perturbation can still reach, then pulls the perturbed
image's encoder features toward that deformed target.
"""
from .attacks import ATTACK_NAMES, AttackResult, uad_attack
from .config import AttackConfig, LossWeights, ModelSpec, RunConfig
from .segmodel import Prompt, build_model, encode_image, generate_corpus, generate_scene, segment

__all__ = [
    "ATTACK_NAMES",
    "AttackConfig",
    "AttackResult",
    "LossWeights",
    "ModelSpec",
    "Prompt",
    "RunConfig",
    "build_model",
    "encode_image",
    "generate_corpus",
    "generate_scene",
    "segment",
    "uad_attack",
]
