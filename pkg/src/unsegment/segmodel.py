"""A small deterministic promptable segmentation model and synthetic scenes.

The image encoder is an untrained stack of seeded random convolutions. Random
projections roughly preserve colour and texture distances, so flat regions
of a synthetic scene end up with distinct feature directions and a cosine
decoder can segment them without any training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .config import ModelSpec
from .diffmath import Tensor
from .errors import ConfigurationError, DegenerateNormError, PlacementError, PromptError, SizeError

FEATURE_STRIDE = 4


@dataclass(frozen=True, eq=False)
class Model:
    spec: ModelSpec
    kernels: tuple[np.ndarray, ...]
    strides: tuple[int, ...]
    tau: float = 10.0
    theta_cos: float = 0.7
    feature_blur: float = 0.5

    @property
    def channels(self) -> int:
        return self.spec.channels

    @property
    def seed(self) -> int:
        return self.spec.seed


def build_model(seed: int = 0, depth: int = 3, channels: int = 16, **decoder) -> Model:
    """Seeded encoder: two stride-2 3x3 convs, then ``depth - 2`` 1x1 channel mixers.

    Weights are standard normal scaled by 1/sqrt(fan-in); there are no biases.
    """
    if depth not in (2, 3, 4) or channels not in (8, 16, 32):
        raise ConfigurationError(
            f"unsupported architecture depth={depth}, channels={channels}; "
            "depth must be in {2,3,4} and channels in {8,16,32}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, depth, channels]))
    kernels, strides = [], []
    c_in = 3
    for layer in range(depth):
        size = 3 if layer < 2 else 1
        fan_in = c_in * size * size
        k = rng.standard_normal((channels, c_in, size, size)) / np.sqrt(fan_in)
        k.setflags(write=False)
        kernels.append(k)
        strides.append(2 if layer < 2 else 1)
        c_in = channels
    return Model(ModelSpec(seed, depth, channels), tuple(kernels), tuple(strides), **decoder)


def model_from_spec(spec: ModelSpec) -> Model:
    return build_model(spec.seed, spec.depth, spec.channels)


def encode_image(model: Model, image) -> Tensor:
    """Feature map [C, H/4, W/4] of a [3, H, W] image."""
    x = dm.as_tensor(image)
    if x.ndim != 3 or x.shape[0] != 3:
        raise SizeError(f"encode_image expects a [3,H,W] image, got {x.shape}")
    _, h, w = x.shape
    if h % FEATURE_STRIDE or w % FEATURE_STRIDE:
        raise SizeError(f"image size {h}x{w} is not divisible by {FEATURE_STRIDE}")
    # centering keeps the zero image at zero while making colours signed
    x = dm.sub(x, dm.mean(x, axis=(1, 2), keepdims=True))
    for i, (k, s) in enumerate(zip(model.kernels, model.strides)):
        x = dm.conv2d(x, k, stride=s, padding=k.shape[-1] // 2)
        if i == 0:
            x = dm.relu(x)
    x = dm.gaussian_blur(x, model.feature_blur, mode="same")
    return dm.sub(x, dm.mean(x, axis=(1, 2), keepdims=True))


@dataclass(frozen=True)
class Prompt:
    """Point prompt(s) as (x, y) pixel coordinates with labels, or a box (x0, y0, x1, y1)."""

    points: tuple[tuple[float, float], ...] = ()
    labels: tuple[int, ...] = ()
    box: tuple[float, float, float, float] | None = None

    @classmethod
    def point(cls, x: float, y: float, label: int = 1) -> "Prompt":
        return cls(points=((float(x), float(y)),), labels=(int(label),))

    @classmethod
    def from_points(cls, points, labels=None) -> "Prompt":
        points = tuple((float(x), float(y)) for x, y in points)
        labels = tuple(int(l) for l in (labels if labels is not None else [1] * len(points)))
        return cls(points=points, labels=labels)

    @classmethod
    def from_box(cls, x0, y0, x1, y1) -> "Prompt":
        return cls(box=(float(x0), float(y0), float(x1), float(y1)))

    @property
    def kind(self) -> str:
        return "box" if self.box is not None else "point"

    def validate(self, height: int, width: int) -> None:
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
                raise PromptError(f"box {self.box} outside a {height}x{width} image or empty")
            return
        if not self.points:
            raise PromptError("prompt has neither points nor a box")
        if len(self.labels) != len(self.points):
            raise PromptError("one label per point required")
        for x, y in self.points:
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise PromptError(f"point ({x}, {y}) outside a {height}x{width} image")


def _feature_coords(points: Sequence[tuple[float, float]]) -> np.ndarray:
    """(x, y) pixel coordinates to (row, col) feature-map coordinates."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.stack([pts[:, 1], pts[:, 0]], axis=-1) / FEATURE_STRIDE


def read_points(features, points) -> Tensor:
    """Bilinear feature columns at pixel points: [C, N]."""
    coords = _feature_coords(points)
    return dm.grid_sample(features, coords[None])[:, 0, :]


def box_weights(box, fh: int, fw: int) -> np.ndarray | None:
    """Uniform averaging weights over feature cells whose centres fall inside ``box``."""
    x0, y0, x1, y1 = box
    ys = np.arange(fh) * FEATURE_STRIDE
    xs = np.arange(fw) * FEATURE_STRIDE
    inside = ((ys >= y0) & (ys < y1))[:, None] & ((xs >= x0) & (xs < x1))[None, :]
    if not inside.any():
        return None
    return inside / inside.sum()


def encode_prompt(model: Model, prompt: Prompt, features) -> Tensor:
    """Prompt embedding [C] read from the image features."""
    features = dm.as_tensor(features)
    _, fh, fw = features.shape
    prompt.validate(fh * FEATURE_STRIDE, fw * FEATURE_STRIDE)
    if prompt.box is not None:
        weights = box_weights(prompt.box, fh, fw)
        if weights is None:
            x0, y0, x1, y1 = prompt.box
            return read_points(features, [((x0 + x1) / 2, (y0 + y1) / 2)])[:, 0]
        return dm.tsum(dm.mul(features, weights[None]), axis=(1, 2))
    cols = read_points(features, prompt.points)
    signs = np.where(np.asarray(prompt.labels) > 0, 1.0, -1.0)
    return dm.mean(dm.mul(cols, signs[None, :]), axis=1)


@dataclass(frozen=True)
class Mask:
    logits: np.ndarray

    @property
    def binary(self) -> np.ndarray:
        return self.logits > 0


def upsample_matrix(n: int) -> np.ndarray:
    """[n * stride, n] linear interpolation: output i reads input i / stride, clamped at the far edge."""
    pos = np.minimum(np.arange(n * FEATURE_STRIDE) / FEATURE_STRIDE, n - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    m = np.zeros((pos.size, n))
    np.add.at(m, (np.arange(pos.size), lo), 1.0 - frac)
    np.add.at(m, (np.arange(pos.size), hi), frac)
    return m


def column_cosines(features, embeddings) -> Tensor:
    """Cosine between every feature column and each embedding: [N, h, w].

    ``embeddings`` is [C, N]. Column norms are smoothed so an all-zero column
    gives cosine 0 instead of an error.
    """
    features, embeddings = dm.as_tensor(features), dm.as_tensor(embeddings)
    c, fh, fw = features.shape
    if np.any(np.sqrt(np.sum(embeddings.data**2, axis=0)) == 0):
        raise DegenerateNormError("prompt embedding is all zero")
    flat = features.reshape(c, fh * fw)
    col_norm = dm.sqrt(dm.tsum(dm.mul(flat, flat), axis=0, keepdims=True))
    emb_norm = dm.sqrt(dm.tsum(dm.mul(embeddings, embeddings), axis=0, keepdims=True), delta=0.0)
    unit_cols = dm.div(flat, col_norm)
    unit_emb = dm.div(embeddings, emb_norm)
    cos = dm.matmul(dm.transpose(unit_emb), unit_cols)
    return cos.reshape(-1, fh, fw)


def decode_logits(model: Model, features, embeddings) -> Tensor:
    """Full-resolution mask logits [N, H, W] for embeddings [C, N]."""
    features = dm.as_tensor(features)
    _, fh, fw = features.shape
    cos = column_cosines(features, embeddings)
    low = dm.scale(dm.sub(cos, model.theta_cos), model.tau)
    return dm.separable_map(low, upsample_matrix(fh), upsample_matrix(fw))


def decode_mask(model: Model, features, embedding) -> Mask:
    embedding = dm.as_tensor(embedding)
    logits = decode_logits(model, features, embedding.reshape(-1, 1))
    return Mask(logits.data[0])


def segment_logits(model: Model, image, prompt: Prompt) -> Tensor:
    """Differentiable [H, W] logits for ``prompt`` on ``image``."""
    feats = encode_image(model, image)
    emb = encode_prompt(model, prompt, feats)
    return decode_logits(model, feats, emb.reshape(-1, 1))[0]


def segment(model: Model, image, prompt: Prompt) -> Mask:
    feats = encode_image(model, image)
    return decode_mask(model, feats, encode_prompt(model, prompt, feats))


# synthetic scenes


@dataclass
class SyntheticScene:
    image: np.ndarray  # [3, H, W] in [0, 1]
    masks: list[np.ndarray] = field(default_factory=list)
    seed: int = 0


def rasterize_disc(height: int, width: int, cy: float, cx: float, radius: float) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    return (rows - cy) ** 2 + (cols - cx) ** 2 <= radius**2


def rasterize_rect(height: int, width: int, y0: int, x0: int, h: int, w: int) -> np.ndarray:
    m = np.zeros((height, width), dtype=bool)
    m[y0 : y0 + h, x0 : x0 + w] = True
    return m


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out |= np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
    return out


# cube corners pulled toward mid-grey: well separated hues around the background
_PALETTE = 0.5 + 0.35 * np.array(
    [[1, -1, -1], [-1, 1, -1], [-1, -1, 1], [1, 1, -1], [-1, 1, 1], [1, -1, 1], [1, 1, 1], [-1, -1, -1]],
    dtype=np.float64,
)


def generate_scene(seed: int, height: int = 64, width: int = 64, n_objects: int = 3) -> SyntheticScene:
    """Flat-coloured rectangles and discs over a smooth textured background."""
    if n_objects < 1:
        raise ConfigurationError("a scene needs at least one object")
    rng = np.random.default_rng(np.random.SeedSequence([seed, height, width, n_objects]))
    rows, cols = np.mgrid[0:height, 0:width] / max(height, width)

    base = 0.5 + rng.uniform(-0.08, 0.08, size=3)
    texture = np.zeros((height, width))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.sin(2 * np.pi * (fy * rows + fx * cols) + phase)
    tint = rng.uniform(0.5, 1.0, size=3)
    image = base[:, None, None] + 0.04 * tint[:, None, None] * texture[None]

    # object sizes are tuned for 64 px scenes and shrink with smaller ones
    scale = min(height, width) / 64
    r_lo, r_hi = max(2, round(6 * scale)), max(3, round(12 * scale))
    s_lo, s_hi = max(4, round(10 * scale)), max(5, round(23 * scale))
    palette = list(rng.permutation(len(_PALETTE)))
    masks: list[np.ndarray] = []
    occupied = np.zeros((height, width), dtype=bool)
    for _ in range(n_objects):
        for _attempt in range(100):
            color = np.clip(_PALETTE[palette[len(masks)]] + rng.uniform(-0.06, 0.06, size=3), 0, 1)
            if rng.random() < 0.5:
                r = int(rng.integers(r_lo, r_hi))
                cy = int(rng.integers(r, height - r))
                cx = int(rng.integers(r, width - r))
                m = rasterize_disc(height, width, cy, cx, r)
            else:
                h = int(rng.integers(s_lo, s_hi))
                w = int(rng.integers(s_lo, s_hi))
                y0 = int(rng.integers(0, height - h + 1))
                x0 = int(rng.integers(0, width - w + 1))
                m = rasterize_rect(height, width, y0, x0, h, w)
            if m.sum() >= 16 and not (_dilate(m, 2) & occupied).any():
                break
        else:
            raise PlacementError(f"could not place object {len(masks) + 1} disjointly after 100 tries")
        masks.append(m)
        occupied |= m
        image[:, m] = color[:, None]

    image = image + rng.uniform(-0.02, 0.02, size=image.shape)
    return SyntheticScene(np.clip(image, 0.0, 1.0), masks, seed)


def generate_corpus(n: int, seed: int = 0, height: int = 64, width: int = 64, n_objects: int = 3) -> list[SyntheticScene]:
    return [generate_scene(seed * 100_003 + i, height, width, n_objects) for i in range(n)]
