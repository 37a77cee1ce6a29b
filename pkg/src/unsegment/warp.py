"""Flow-field image deformation and patch-wise compositing of several flows."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import ConfigurationError, DimensionError


def identity_flow(height: int, width: int, requires_grad: bool = False) -> Tensor:
    """Zero displacement field of shape [H, W, 2]; deforms any image to itself."""
    if height < 1 or width < 1:
        raise ConfigurationError(f"flow field needs positive size, got {height}x{width}")
    return Tensor(np.zeros((height, width, 2)), requires_grad=requires_grad)


def pixel_grid(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([rows, cols], axis=-1)


def deform(image, flow) -> Tensor:
    """Warp ``image[C,H,W]`` by ``flow[H,W,2]`` holding (row, col) displacements in pixels.

    Backward warping: output pixel (i, j) reads the input at (i - du, j - dv),
    so a constant flow (a, b) moves content by (+a, +b). Borders replicate.
    """
    image, flow = dm.as_tensor(image), dm.as_tensor(flow)
    _, h, w = image.shape
    if flow.shape != (h, w, 2):
        raise DimensionError(f"deform: flow shape {flow.shape} does not match image axes 1,2 ({h}, {w})")
    return dm.grid_sample(image, dm.sub(pixel_grid(h, w), flow))


@dataclass(frozen=True)
class FilterMaskSet:
    masks: np.ndarray  # [K, H, W], partition of unity over K

    @property
    def count(self) -> int:
        return self.masks.shape[0]

    def __len__(self):
        return self.count


def _grid_factors(k: int) -> tuple[int, int]:
    a = max(d for d in range(1, int(math.isqrt(k)) + 1) if k % d == 0)
    return a, k // a


def make_filter_masks(
    height: int,
    width: int,
    k: int,
    blur_sigma: float = 2.0,
    patch_size: int | None = None,
) -> FilterMaskSet:
    """Soft patch masks assigning square tiles of the image to ``k`` flow fields.

    Tiles are laid out on a regular grid and assigned by tiling an a x b block
    of field indices (a * b = k) across it, then blurred and renormalised so
    that the masks sum to one at every pixel.
    """
    if k < 1:
        raise ConfigurationError(f"need at least one flow field, got {k}")
    if patch_size is None:
        patch_size = max(2, min(height, width) // 4)
    grid_rows = -(-height // patch_size)
    grid_cols = -(-width // patch_size)
    a, b = _grid_factors(k)
    if a > grid_rows or b > grid_cols:
        if b <= grid_rows and a <= grid_cols:
            a, b = b, a
        else:
            raise ConfigurationError(
                f"{k} flow fields do not factor onto a {grid_rows}x{grid_cols} patch grid"
            )
    rows = np.arange(height)[:, None] // patch_size
    cols = np.arange(width)[None, :] // patch_size
    owner = (rows % a) * b + (cols % b)
    masks = np.stack([(owner == i).astype(np.float64) for i in range(k)])
    if blur_sigma > 0 and k > 1:
        masks = dm.gaussian_blur(masks, blur_sigma, mode="same").data
        masks = masks / masks.sum(axis=0, keepdims=True)
    return FilterMaskSet(masks)


def composite_deform(image, flows: Sequence, masks: FilterMaskSet) -> Tensor:
    """Mask-weighted sum of ``deform(image, flow_k)`` over all fields."""
    if len(flows) != masks.count:
        raise ConfigurationError(f"{len(flows)} flow fields but {masks.count} filter masks")
    image = dm.as_tensor(image)
    if masks.masks.shape[1:] != image.shape[1:]:
        raise DimensionError(f"filter masks {masks.masks.shape[1:]} do not match image {image.shape[1:]}")
    if len(flows) == 1:
        return deform(image, flows[0])
    out = None
    for flow, m in zip(flows, masks.masks):
        term = dm.mul(deform(image, flow), m[None])
        out = term if out is None else dm.add(out, term)
    return out
