"""Objective terms for deformation search and feature simulation."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import SizeError
from .segmodel import Model, encode_image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def ssim(a, b) -> Tensor:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), averaged over channels."""
    a, b = dm.as_tensor(a), dm.as_tensor(b)
    if a.shape != b.shape:
        raise SizeError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[1] < SSIM_WINDOW or a.shape[2] < SSIM_WINDOW:
        raise SizeError(f"ssim needs [C,H,W] with H,W >= {SSIM_WINDOW}, got {a.shape}")
    r = SSIM_WINDOW // 2

    def blur(x):
        return dm.gaussian_blur(x, SSIM_SIGMA, radius=r, mode="valid")

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = blur(a * a) - mu_aa
    var_b = blur(b * b) - mu_bb
    cov = blur(a * b) - mu_ab
    num = (2.0 * mu_ab + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_aa + mu_bb + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return dm.mean(num / den)


def deformation_loss(deformed, original) -> Tensor:
    """Structural similarity of the deformed target to the original; minimised."""
    return ssim(deformed, original)


def _smooth_norm_sum(sq: Tensor) -> Tensor:
    # sqrt(x + d) - sqrt(d) per element: differentiable at zero displacement and exactly 0 there
    return dm.tsum(dm.sqrt(sq) - np.sqrt(dm.SQRT_DELTA))


def total_variation(flow) -> Tensor:
    """Sum over pixels and their 4-neighbours of the displacement difference length.

    Each unordered neighbour pair appears twice, once from each side.
    """
    flow = dm.as_tensor(flow)
    dh = flow[:, 1:, :] - flow[:, :-1, :]
    dv = flow[1:, :, :] - flow[:-1, :, :]
    tv_h = _smooth_norm_sum(dm.tsum(dh * dh, axis=-1))
    tv_v = _smooth_norm_sum(dm.tsum(dv * dv, axis=-1))
    return 2.0 * (tv_h + tv_v)


def flow_variance(flow) -> Tensor:
    """Sum over pixels of the distance of each displacement from the field mean."""
    flow = dm.as_tensor(flow)
    dev = flow - dm.mean(flow, axis=(0, 1), keepdims=True)
    return _smooth_norm_sum(dm.tsum(dev * dev, axis=-1))


def control_loss(flows: Sequence, lambda_tv: float, lambda_var: float) -> Tensor:
    total = None
    for flow in flows:
        term = lambda_tv * total_variation(flow) + lambda_var * flow_variance(flow)
        total = term if total is None else total + term
    return total


def fidelity_loss(feat_a, feat_b) -> Tensor:
    """One minus the cosine similarity of two flattened feature maps."""
    return 1.0 - dm.cosine_similarity(feat_a, feat_b)


def simulation_objective(model: Model, deformed, original, adversarial, beta: float = 1.0,
                         target_features=None, original_features=None) -> Tensor:
    """Pull adversarial features toward the deformed target and, with weight ``beta``, away from the original.

    Precomputed features for the fixed images may be passed to skip re-encoding.
    """
    f_adv = encode_image(model, adversarial)
    f_target = target_features if target_features is not None else encode_image(model, dm.as_tensor(deformed).detach())
    loss = fidelity_loss(f_target, f_adv)
    if beta:
        f_orig = original_features if original_features is not None else encode_image(model, dm.as_tensor(original).detach())
        loss = loss - beta * fidelity_loss(f_orig, f_adv)
    return loss
