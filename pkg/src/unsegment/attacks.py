"""Deformation-guided feature attack and the comparison attacks.

All attacks share one signed-gradient update with projection onto the
L-infinity ball around the clean image intersected with [0, 1].
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .config import AttackConfig
from .diffmath import Tensor
from .losses import control_loss, deformation_loss, fidelity_loss, simulation_objective
from .segmodel import Model, decode_logits, encode_image, read_points
from .warp import composite_deform, make_filter_masks

ATTACK_NAMES = ("uad", "tap", "aa", "pata", "pata++", "attack-sam-k")
ARMIJO_C = 1e-4


@dataclass
class AttackResult:
    perturbation: np.ndarray
    adversarial: np.ndarray
    config: AttackConfig
    name: str = ""
    deformed: np.ndarray | None = None
    trace: list[dict] = field(default_factory=list)


def clip_step(candidate, original, epsilon: float) -> np.ndarray:
    """Project onto ``[original - eps, original + eps]`` and then onto ``[0, 1]``."""
    candidate = np.asarray(candidate, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    return np.clip(np.clip(candidate, original - epsilon, original + epsilon), 0.0, 1.0)


class Momentum:
    """Accumulates L1-normalised gradients: ``g_t = mu * g_{t-1} + grad / |grad|_1``."""

    def __init__(self, mu: float):
        self.mu = mu
        self.acc = None

    def __call__(self, g: np.ndarray) -> np.ndarray:
        if self.mu == 0:
            return g
        n = np.abs(g).sum()
        g = g / n if n > 0 else g
        self.acc = g if self.acc is None else self.mu * self.acc + g
        return self.acc


def momentum_wrap(update: Callable[[np.ndarray], np.ndarray], mu: float) -> Callable[[np.ndarray], np.ndarray]:
    """Feed gradients through momentum accumulation before ``update``; identity for mu=0."""
    if mu == 0:
        return update
    acc = Momentum(mu)
    return lambda g: update(acc(g))


class InputDiversity:
    """Random resize-and-pad applied to the input with probability ``prob``."""

    def __init__(self, prob: float, low: float, high: float, rng: np.random.Generator):
        self.prob, self.low, self.high, self.rng = prob, low, high, rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.prob == 0 or self.rng.random() >= self.prob:
            return x
        _, h, w = x.shape
        s = self.rng.uniform(self.low, self.high)
        nh, nw = max(1, round(s * h)), max(1, round(s * w))
        oi = self._offset(h, nh)
        oj = self._offset(w, nw)
        rows = (np.arange(h) - oi)[:, None] * np.ones((1, w))
        cols = np.ones((h, 1)) * (np.arange(w) - oj)[None, :]
        valid = (rows >= 0) & (rows <= nh - 1) & (cols >= 0) & (cols <= nw - 1)
        grid = np.stack([rows * (h / nh), cols * (w / nw)], axis=-1)
        return dm.mul(dm.grid_sample(x, grid), valid[None].astype(np.float64))

    def _offset(self, size: int, new: int) -> int:
        if new <= size:
            return int(self.rng.integers(0, size - new + 1))
        return -int(self.rng.integers(0, new - size + 1))


def diversity_wrap(loss_fn: Callable, config: AttackConfig, rng: np.random.Generator) -> Callable:
    """Apply input diversity to the adversarial image before ``loss_fn`` sees it."""
    if config.input_diversity_prob == 0:
        return loss_fn
    transform = InputDiversity(
        config.input_diversity_prob, config.diversity_scale_low, config.diversity_scale_high, rng
    )
    return lambda x, t: loss_fn(transform(x), t)


def signed_descent(
    loss_fn: Callable[[Tensor, int], Tensor],
    original: np.ndarray,
    steps: int,
    alpha: float,
    epsilon: float,
    start: np.ndarray | None = None,
    momentum_mu: float = 0.0,
    trace: list | None = None,
    stage: str = "attack",
) -> np.ndarray:
    """``steps`` iterations of ``x <- clip(x - alpha * sign(grad loss))``."""
    x = original.copy() if start is None else start.copy()
    direction = momentum_wrap(lambda g: g, momentum_mu)
    for t in range(steps):
        leaf = Tensor(x, requires_grad=True)
        loss = loss_fn(leaf, t)
        (g,) = dm.grad(loss, leaf)
        if trace is not None:
            trace.append({"stage": stage, "iteration": t, "loss": loss.item()})
        x = clip_step(x - alpha * np.sign(direction(g)), original, epsilon)
    return x


def _rng(config: AttackConfig, rng: np.random.Generator | None) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(config.seed)


def _result(name, image, adv, config, trace, deformed=None) -> AttackResult:
    return AttackResult(adv - image, adv, config, name, deformed, trace)


def _as_models(models) -> list[Model]:
    return [models] if isinstance(models, Model) else list(models)


# deformation-guided attack


def proxy_perturb(model: Model, original, target, steps: int, alpha: float, epsilon: float,
                  target_features: Tensor | None = None) -> np.ndarray:
    """Signed-gradient steps pulling the features of ``original + r'`` toward ``target``."""
    original = np.asarray(original, dtype=np.float64)
    if steps == 0:
        return original.copy()
    ft = target_features if target_features is not None else encode_image(model, dm.as_tensor(target).detach())

    def loss(x, t):
        return fidelity_loss(ft, encode_image(model, x))

    return signed_descent(loss, original, steps, alpha, epsilon)


def deformation_stage(model: Model, image, config: AttackConfig, rng: np.random.Generator | None = None):
    """Gradient descent on flow fields for a structurally dissimilar yet reachable target.

    Returns ``(deformed, flows, trace)`` with the final deformed image detached.
    """
    rng = _rng(config, rng)
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    weights = config.weights
    masks = make_filter_masks(h, w, config.num_flow_fields, config.filter_blur_sigma)
    flows = [np.zeros((h, w, 2)) for _ in range(config.num_flow_fields)]
    trace: list[dict] = []
    step = config.deform_step
    for t in range(config.deform_steps):
        if t == 0 and config.flow_init_jitter > 0:
            # the identity is a stationary point of every term; a random uniform shift
            # per field breaks the tie without adding control loss
            flows = [f + rng.normal(0.0, config.flow_init_jitter, 2) for f in flows]
        # the proxy chases the current target but is held fixed while the flows move
        f_current = encode_image(model, composite_deform(image, flows, masks))
        proxy = proxy_perturb(
            model, image, None, config.proxy_steps, config.alpha, config.epsilon, target_features=f_current,
        )
        f_proxy = encode_image(model, proxy)
        params = [Tensor(f, requires_grad=True) for f in flows]

        def objective(fields):
            warped = composite_deform(image, fields, masks)
            l_d = deformation_loss(warped, image)
            l_c = control_loss(fields, weights.lambda_tv, weights.lambda_var)
            l_f = fidelity_loss(encode_image(model, warped), f_proxy)
            return l_d + weights.lambda_c * l_c + weights.lambda_f * l_f, (l_d, l_c, l_f)

        total, (l_d, l_c, l_f) = objective(params)
        grads = dm.grad(total, *params)
        trace.append({
            "stage": "deform", "iteration": t, "loss": total.item(),
            "L_D": l_d.item(), "L_C": l_c.item(), "L_F": l_f.item(),
        })
        flows, step = _descend(objective, flows, grads, total.item(), min(config.deform_step, 2.0 * step), config)
    deformed = composite_deform(image, flows, masks).data if config.deform_steps else image.copy()
    return deformed, flows, trace


def _descend(objective, flows, grads, value, step, config: AttackConfig):
    """One gradient step on the flows, halving ``step`` until the objective decreases enough.

    The control loss is stiff near zero displacement differences, so a fixed large
    step oscillates once its weight grows; backtracking keeps every step a descent.
    With ``deform_backtracks=0`` this is the plain fixed step. Returns the new
    flows and the step that was taken.
    """
    if config.deform_backtracks == 0:
        return [f - config.deform_step * g for f, g in zip(flows, grads)], config.deform_step
    slope = sum(float(np.sum(g * g)) for g in grads)
    for _ in range(config.deform_backtracks):
        trial = [f - step * g for f, g in zip(flows, grads)]
        if objective(trial)[0].item() <= value - ARMIJO_C * step * slope:
            return trial, step
        step *= 0.5
    return flows, step


def simulation_stage(models, image, deformed, config: AttackConfig,
                     rng: np.random.Generator | None = None) -> AttackResult:
    """Signed-gradient steps toward the fixed deformed target's features (mean over models)."""
    rng = _rng(config, rng)
    models = _as_models(models)
    image = np.asarray(image, dtype=np.float64)
    deformed = np.asarray(deformed, dtype=np.float64)
    beta = config.weights.beta_pushaway
    f_target = [encode_image(m, deformed) for m in models]
    f_orig = [encode_image(m, image) for m in models]

    def objective(x, t):
        total = None
        for m, ft, fo in zip(models, f_target, f_orig):
            term = simulation_objective(m, deformed, image, x, beta, ft, fo)
            total = term if total is None else total + term
        return total if len(models) == 1 else total * (1.0 / len(models))

    trace: list[dict] = []
    adv = signed_descent(
        diversity_wrap(objective, config, rng), image, config.steps, config.alpha, config.epsilon,
        momentum_mu=config.momentum_mu, trace=trace, stage="simulate",
    )
    return _result("uad", image, adv, config, trace, deformed)


def uad_attack(models, image, config: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """Deform on the first (source) model, then simulate the target on all models."""
    rng = _rng(config, rng)
    models = _as_models(models)
    deformed, _, deform_trace = deformation_stage(models[0], image, config, rng)
    result = simulation_stage(models, image, deformed, config, rng)
    result.trace = deform_trace + result.trace
    return result


# baselines


def tap_attack(model: Model, image, config: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """Untargeted: push features away from the clean features in Minkowski distance."""
    rng = _rng(config, rng)
    image = np.asarray(image, dtype=np.float64)
    f0 = encode_image(model, image)
    if config.tap_p not in (1.0, 2.0):
        raise ValueError(f"tap_p must be 1 or 2, got {config.tap_p}")

    def distance(x, t):
        d = encode_image(model, x) - f0
        if config.tap_p == 2.0:
            return dm.sqrt(dm.tsum(d * d))
        return dm.tsum(dm.sqrt(d * d))

    trace: list[dict] = []
    start = None
    if config.steps > 0:
        # the distance has zero gradient at the clean image itself
        noise = rng.uniform(-1.0, 1.0, image.shape) * config.tap_init_noise * config.epsilon
        start = clip_step(image + noise, image, config.epsilon)

    def loss(x, t):
        dist = distance(x, t)
        trace.append({"stage": "attack", "iteration": t, "feature_distance": dist.item()})
        return -dist

    adv = signed_descent(
        diversity_wrap(loss, config, rng), image, config.steps, config.alpha, config.epsilon,
        start=start, momentum_mu=config.momentum_mu,
    )
    return _result("tap", image, adv, config, trace)


def _targeted(name, model, image, target_features, config, rng, competition=None) -> AttackResult:
    image = np.asarray(image, dtype=np.float64)
    trace: list[dict] = []

    def loss(x, t):
        fx = encode_image(model, x)
        fid = fidelity_loss(target_features, fx)
        row = {"stage": "attack", "iteration": t, "fidelity": fid.item()}
        total = fid
        if competition is not None:
            dom = fidelity_loss(competition(t), fx)
            row["competition"] = dom.item()
            total = fid - config.pata_lambda * dom
        row["loss"] = total.item()
        trace.append(row)
        return total

    adv = signed_descent(
        diversity_wrap(loss, config, rng), image, config.steps, config.alpha, config.epsilon,
        momentum_mu=config.momentum_mu,
    )
    return _result(name, image, adv, config, trace)


def aa_attack(model: Model, image, target_image, config: AttackConfig,
              rng: np.random.Generator | None = None) -> AttackResult:
    """Targeted: pull features toward those of another natural image."""
    rng = _rng(config, rng)
    return _targeted("aa", model, image, encode_image(model, target_image), config, rng)


def pata_attack(model: Model, image, target_image, competition_image, config: AttackConfig,
                plus_plus: bool = False, pool: Sequence[np.ndarray] | None = None,
                rng: np.random.Generator | None = None) -> AttackResult:
    """AA plus a term rewarding feature distance from a clean competition image.

    With ``plus_plus`` a fresh competition image is drawn from ``pool`` every iteration.
    """
    rng = _rng(config, rng)
    ft = encode_image(model, target_image)
    if plus_plus:
        if not pool:
            raise ValueError("pata++ needs a non-empty competition pool")
        pool_features = [encode_image(model, p) for p in pool]
        picker = np.random.default_rng(np.random.SeedSequence([config.seed, 7919]))

        def competition(t):
            return pool_features[int(picker.integers(len(pool_features)))]
    else:
        fc = encode_image(model, competition_image)

        def competition(t):
            return fc

    name = "pata++" if plus_plus else "pata"
    return _targeted(name, model, image, ft, config, rng, competition)


def grid_points(height: int, width: int, k: int) -> list[tuple[float, float]]:
    """(x, y) centres of a uniform n x n grid, n = floor(sqrt(k))."""
    n = math.isqrt(k)
    return [
        ((j + 0.5) * width / n - 0.5, (i + 0.5) * height / n - 0.5)
        for i in range(n)
        for j in range(n)
    ]


def attack_sam_k(model: Model, image, k: int | None, config: AttackConfig,
                 rng: np.random.Generator | None = None) -> AttackResult:
    """Suppress positive mask logits for ``k`` grid point prompts at once."""
    rng = _rng(config, rng)
    k = config.sam_k if k is None else k
    if k < 1:
        raise ValueError("attack-sam-k needs k >= 1")
    n = math.isqrt(k)
    if n * n != k:
        warnings.warn(f"k={k} is not a perfect square; using {n * n} grid prompts", stacklevel=2)
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    points = grid_points(h, w, n * n)
    trace: list[dict] = []

    def loss(x, t):
        feats = encode_image(model, x)
        logits = decode_logits(model, feats, read_points(feats, points))
        total = dm.tsum(dm.mean(dm.relu(logits), axis=(1, 2)))
        trace.append({"stage": "attack", "iteration": t, "loss": total.item()})
        return total

    adv = signed_descent(
        diversity_wrap(loss, config, rng), image, config.steps, config.alpha, config.epsilon,
        momentum_mu=config.momentum_mu,
    )
    result = _result("attack-sam-k", image, adv, config, trace)
    return result
