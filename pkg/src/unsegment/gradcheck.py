"""Finite-difference verification of every differentiable op and loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffmath as dm
from . import losses
from .diffmath import Tensor
from .segmodel import build_model, decode_logits, encode_image, read_points
from .warp import composite_deform, deform, make_filter_masks

TOLERANCE = 1e-4
STEP = 1e-4
INSTANCES = 20
MAX_ELEMENTS = 64

# make(rng) -> (scalar function of one tensor, point to check at)
Maker = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


@dataclass(frozen=True)
class GradCheck:
    name: str
    make: Maker


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_error: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<24} max_rel_err={self.max_error:.3e}"


def _weighted(op: Callable[[Tensor], Tensor], shape, rng) -> Callable[[Tensor], Tensor]:
    # a random positive readout keeps every output element in play
    w = rng.uniform(0.5, 1.5, shape)
    return lambda x: dm.tsum(op(x) * w)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _fractional(rng, shape, low=-1.0, high=1.0):
    # keeps bilinear sample points off integer coordinates, where the derivative jumps
    whole = rng.integers(int(np.floor(low)), int(np.ceil(high)), shape)
    return whole + rng.uniform(0.1, 0.9, shape)


def _unary(name, op, shape, sample=None) -> GradCheck:
    def make(rng):
        x = sample(rng, shape) if sample else rng.uniform(-1.0, 1.0, shape)
        out_shape = op(Tensor(x)).shape
        return _weighted(op, out_shape, rng), x

    return GradCheck(name, make)


def _binary(name, op, shape_a, shape_b, sample_b=None) -> GradCheck:
    """Checks both operands at once by packing them into one flat vector."""
    na = int(np.prod(shape_a))

    def split(x):
        a = dm.reshape(x[:na], shape_a)
        b = dm.reshape(x[na:], shape_b)
        return op(a, b)

    def make(rng):
        a = rng.uniform(-1.0, 1.0, shape_a)
        b = sample_b(rng, shape_b) if sample_b else rng.uniform(-1.0, 1.0, shape_b)
        x = np.concatenate([a.ravel(), b.ravel()])
        out_shape = split(Tensor(x)).shape
        return _weighted(split, out_shape, rng), x

    return GradCheck(name, make)


def _scalar(name, fn, sample) -> GradCheck:
    return GradCheck(name, lambda rng: (fn, sample(rng)))


def _subset(fn: Callable[[Tensor], Tensor], x: np.ndarray, rng, size: int = MAX_ELEMENTS):
    """Restrict ``fn`` to ``size`` random entries of ``x``; the others stay fixed."""
    flat = x.ravel()
    picks = np.sort(rng.choice(flat.size, size=min(size, flat.size), replace=False))
    scatter = np.zeros((flat.size, picks.size))
    scatter[picks, np.arange(picks.size)] = 1.0
    rest = np.where(np.isin(np.arange(flat.size), picks), 0.0, flat)

    def g(v):
        spread = dm.reshape(dm.matmul(scatter, dm.reshape(v, (picks.size, 1))), (flat.size,))
        return fn(dm.reshape(dm.add(spread, rest), x.shape))

    return g, flat[picks].copy()


def primitive_checks() -> list[GradCheck]:
    def positive(rng, shape):
        return rng.uniform(0.1, 2.0, shape)

    def clamp_inputs(rng, shape):
        # stay clear of both bounds so the straight-through kink is never straddled
        x = rng.uniform(-1.5, 1.5, shape)
        return np.where(np.abs(np.abs(x) - 1.0) < 0.05, x * 0.5, x)

    def conv_kernel(x, k):
        return dm.conv2d(x, k, stride=1, padding=1)

    def conv_strided(x, k):
        return dm.conv2d(x, k, stride=2, padding=1)

    def grid_input(x, g):
        return dm.grid_sample(x, g)

    def grid_coords(rng, shape):
        return rng.uniform(0.0, 3.0, shape).round() + rng.uniform(0.1, 0.9, shape) - 0.5

    def pick(x):
        return x[1:5, ::2]

    mix = np.random.default_rng(3)
    rows, cols = mix.uniform(-1, 1, (5, 3)), mix.uniform(-1, 1, (6, 4))

    return [
        _binary("add", dm.add, (4, 4), (4, 4)),
        _binary("add[broadcast]", dm.add, (4, 4), (4,)),
        _binary("sub", dm.sub, (4, 4), (4, 4)),
        _binary("mul", dm.mul, (4, 4), (4, 4)),
        _binary("div", dm.div, (4, 4), (4, 4), positive),
        _unary("neg", dm.neg, (16,)),
        _unary("scale", lambda x: dm.scale(x, -2.5), (16,)),
        _unary("relu", dm.relu, (32,), _away_from_zero),
        _unary("sigmoid", dm.sigmoid, (32,), lambda r, s: r.uniform(-4, 4, s)),
        _unary("clamp", lambda x: dm.clamp(x, -1.0, 1.0), (32,), clamp_inputs),
        _unary("sqrt", dm.sqrt, (32,), positive),
        _unary("sum", lambda x: dm.tsum(x, axis=1), (4, 8)),
        _unary("mean", lambda x: dm.mean(x, axis=(0, 2), keepdims=True), (2, 4, 4)),
        _unary("reshape", lambda x: dm.reshape(x, (8, 4)), (2, 4, 4)),
        _unary("transpose", lambda x: dm.transpose(x, (2, 0, 1)), (2, 4, 4)),
        _unary("getitem", pick, (6, 6)),
        _binary("stack", lambda a, b: dm.stack([a, b], axis=1), (4, 4), (4, 4)),
        _binary("matmul", dm.matmul, (4, 6), (6, 3)),
        _scalar("norm", dm.norm, lambda r: r.uniform(-1, 1, 32)),
        _scalar("dot", lambda x: dm.dot(x[:16], x[16:]), lambda r: r.uniform(-1, 1, 32)),
        _scalar(
            "cosine_similarity",
            lambda x: dm.cosine_similarity(x[:16], x[16:]),
            lambda r: r.uniform(-1, 1, 32),
        ),
        _binary("conv2d", conv_kernel, (2, 4, 4), (1, 2, 3, 3)),
        _binary("conv2d[stride2]", conv_strided, (1, 5, 5), (2, 1, 3, 3)),
        _unary("avg_pool2d", lambda x: dm.avg_pool2d(x, 2), (2, 4, 4)),
        _unary("gaussian_blur[same]", lambda x: dm.gaussian_blur(x, 0.8, mode="same"), (2, 5, 5)),
        _unary("gaussian_blur[valid]", lambda x: dm.gaussian_blur(x, 0.6, radius=1, mode="valid"), (1, 6, 6)),
        _binary("grid_sample", grid_input, (2, 4, 4), (3, 3, 2), grid_coords),
        _unary("separable_map", lambda x: dm.separable_map(x, rows, cols), (2, 3, 4)),
    ]


def _flow_sample(rng, shape):
    return _fractional(rng, shape) * rng.choice([-1.0, 1.0], shape)


def warp_checks() -> list[GradCheck]:
    def deform_image(rng):
        flow = _flow_sample(rng, (4, 4, 2))
        return _weighted(lambda img: deform(img, flow), (1, 4, 4), rng), rng.uniform(0, 1, (1, 4, 4))

    def deform_flow(rng):
        image = rng.uniform(0, 1, (1, 4, 4))
        return _weighted(lambda f: deform(image, f), (1, 4, 4), rng), _flow_sample(rng, (4, 4, 2))

    masks = make_filter_masks(4, 4, 4, blur_sigma=1.0)

    def composite_flow(rng):
        image = rng.uniform(0, 1, (1, 4, 4))
        flows = [_flow_sample(rng, (4, 4, 2)) for _ in range(masks.count)]
        which = int(rng.integers(masks.count))

        def f(flow):
            fields = list(flows)
            fields[which] = flow
            return composite_deform(image, fields, masks)

        return _weighted(f, (1, 4, 4), rng), flows[which]

    return [
        GradCheck("deform[image]", deform_image),
        GradCheck("deform[flow]", deform_flow),
        GradCheck("composite_deform[flow]", composite_flow),
    ]


def _smooth_image(model, rng, shape=(3, 8, 8)):
    """An image whose first-layer pre-activations all sit clear of the ReLU kink."""
    k = model.kernels[0]
    # bound on how far one pre-activation moves when a single pixel moves by STEP
    reach = 2.0 * STEP * (np.abs(k).max() + np.abs(k).sum() / (shape[1] * shape[2]))
    while True:
        x = rng.uniform(0, 1, shape)
        centred = x - x.mean(axis=(1, 2), keepdims=True)
        pre = dm.conv2d(centred, k, stride=model.strides[0], padding=k.shape[-1] // 2).data
        if np.abs(pre).min() > reach:
            return x


def model_checks() -> list[GradCheck]:
    model = build_model(0, 3, 8)

    def encoder(rng):
        return _subset(_weighted(lambda x: encode_image(model, x), (8, 2, 2), rng), _smooth_image(model, rng), rng)

    def logits(rng):
        def f(x):
            feats = encode_image(model, x)
            return dm.tsum(decode_logits(model, feats, read_points(feats, [(1.0, 2.5)])))

        return _subset(f, _smooth_image(model, rng), rng)

    return [GradCheck("encode_image", encoder), GradCheck("segment_logits", logits)]


def loss_checks() -> list[GradCheck]:
    model = build_model(0, 3, 8)

    def ssim_pair(rng):
        # the 11x11 window sets the smallest valid input
        ref = rng.uniform(0, 1, (1, 11, 11))
        return _subset(lambda x: losses.ssim(x, ref), rng.uniform(0, 1, (1, 11, 11)), rng)

    def tv(rng):
        return losses.total_variation, rng.uniform(-2, 2, (4, 4, 2))

    def var(rng):
        return losses.flow_variance, rng.uniform(-2, 2, (4, 4, 2))

    def control(rng):
        other = rng.uniform(-2, 2, (4, 4, 2))
        lam_tv, lam_var = rng.uniform(0.1, 2.0, 2)
        return (lambda f: losses.control_loss([f, other], lam_tv, lam_var)), rng.uniform(-2, 2, (4, 4, 2))

    def fidelity(rng):
        other = rng.uniform(-1, 1, 32)
        return (lambda x: losses.fidelity_loss(other, x)), rng.uniform(-1, 1, 32)

    def simulation(rng):
        original = rng.uniform(0, 1, (3, 8, 8))
        deformed = rng.uniform(0, 1, (3, 8, 8))
        beta = float(rng.uniform(0.0, 2.0))
        return _subset(lambda x: losses.simulation_objective(model, deformed, original, x, beta),
                       _smooth_image(model, rng), rng)

    return [
        GradCheck("ssim", ssim_pair),
        GradCheck("total_variation", tv),
        GradCheck("flow_variance", var),
        GradCheck("control_loss", control),
        GradCheck("fidelity_loss", fidelity),
        GradCheck("simulation_objective", simulation),
    ]


def default_checks() -> list[GradCheck]:
    return primitive_checks() + warp_checks() + model_checks() + loss_checks()


def run_check(check: GradCheck, instances: int = INSTANCES, seed: int = 0,
              h: float = STEP, tolerance: float = TOLERANCE) -> GradCheckResult:
    rng = np.random.default_rng(np.random.SeedSequence([seed, *check.name.encode()]))
    worst = 0.0
    for _ in range(instances):
        f, x = check.make(rng)
        worst = max(worst, dm.finite_diff_check(f, x, h=h))
    return GradCheckResult(check.name, worst, worst < tolerance)


def run_gradcheck(checks: Sequence[GradCheck] | None = None, instances: int = INSTANCES,
                  seed: int = 0) -> list[GradCheckResult]:
    return [run_check(c, instances, seed) for c in (default_checks() if checks is None else checks)]


def report(results: Iterable[GradCheckResult]) -> str:
    return "\n".join(r.line() for r in results)
