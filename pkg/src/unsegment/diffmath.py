"""Minimal reverse-mode differentiation over dense float64 arrays.

Every primitive records its parents, a forward function of the parent arrays
and a vector-Jacobian product. ``Tape`` linearises the graph reachable from an
output in topological order; it can replay the forward pass and run the
backward pass. Graphs are rebuilt on every forward pass and never retained.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateNormError, DimensionError, RankError

SQRT_DELTA = 1e-12

_node_ids = itertools.count()


class Tensor:
    """A float64 array that may participate in a recorded computation."""

    __slots__ = ("data", "requires_grad", "node_id", "grad", "op", "_parents", "_fwd", "_vjp")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.grad = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._fwd = None
        self._vjp = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = array
        t.requires_grad = False
        t.node_id = next(_node_ids)
        t.grad = None
        t.op = "const"
        t._parents = ()
        t._fwd = None
        t._vjp = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


def _apply(op: str, fwd: Callable, vjp: Callable, *inputs) -> Tensor:
    """Run ``fwd`` on the input arrays and record the node if any input needs grad.

    ``vjp(g, out, arrays, needs)`` returns one gradient (or None) per input.
    """
    tensors = tuple(as_tensor(x) for x in inputs)
    out = Tensor._wrap(fwd(*[t.data for t in tensors]))
    out.op = op
    if any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._parents = tensors
        out._fwd = fwd
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Topologically ordered record of every node that ``output`` depends on."""

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.node_id not in seen:
                    stack.append((parent, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def replay(self) -> dict[int, np.ndarray]:
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            if node._fwd is None:
                values[node.node_id] = node.data
            else:
                values[node.node_id] = node._fwd(*[values[p.node_id] for p in node._parents])
        return values

    def backward(self) -> dict[int, np.ndarray]:
        out = self.output
        if out.data.size != 1:
            raise RankError(f"backward needs a scalar loss, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {out.node_id: np.ones_like(out.data)}
        leaves: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if node._vjp is None:
                if node.requires_grad:
                    g = np.zeros_like(node.data) if g is None else g
                    leaves[node.node_id] = g
                    node.grad = g
                continue
            if g is None:
                continue
            needs = tuple(p.requires_grad for p in node._parents)
            parent_grads = node._vjp(g, node.data, [p.data for p in node._parents], needs)
            for parent, pg, need in zip(node._parents, parent_grads, needs):
                if not need or pg is None:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg
        return leaves


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every requires_grad leaf, keyed by node id.

    Also stores each leaf gradient on ``leaf.grad``.
    """
    return Tape(loss).backward()


def grad(loss: Tensor, *inputs: Tensor) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs``; zeros for inputs not on any path."""
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    table = backward(loss) if loss.requires_grad else {}
    return [table.get(x.node_id, np.zeros_like(x.data)) for x in inputs]


# elementwise arithmetic


def add(a, b) -> Tensor:
    def vjp(g, out, xs, needs):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)

    return _apply("add", np.add, vjp, a, b)


def sub(a, b) -> Tensor:
    def vjp(g, out, xs, needs):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)

    return _apply("sub", np.subtract, vjp, a, b)


def mul(a, b) -> Tensor:
    def vjp(g, out, xs, needs):
        x, y = xs
        return (
            _unbroadcast(g * y, x.shape) if needs[0] else None,
            _unbroadcast(g * x, y.shape) if needs[1] else None,
        )

    return _apply("mul", np.multiply, vjp, a, b)


def div(a, b) -> Tensor:
    def vjp(g, out, xs, needs):
        x, y = xs
        return (
            _unbroadcast(g / y, x.shape) if needs[0] else None,
            _unbroadcast(-g * out / y, y.shape) if needs[1] else None,
        )

    return _apply("div", np.divide, vjp, a, b)


def neg(a) -> Tensor:
    return _apply("neg", np.negative, lambda g, out, xs, needs: (-g,), a)


def scale(a, c: float) -> Tensor:
    c = float(c)
    return _apply("scale", lambda x: x * c, lambda g, out, xs, needs: (g * c,), a)


def relu(a) -> Tensor:
    return _apply(
        "relu",
        lambda x: np.maximum(x, 0.0),
        lambda g, out, xs, needs: (g * (xs[0] > 0),),
        a,
    )


def sigmoid(a) -> Tensor:
    def fwd(x):
        return 0.5 * (np.tanh(0.5 * x) + 1.0)

    return _apply("sigmoid", fwd, lambda g, out, xs, needs: (g * out * (1.0 - out),), a)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes straight through inside, zero outside."""

    def vjp(g, out, xs, needs):
        x = xs[0]
        return (g * ((x >= lo) & (x <= hi)),)

    return _apply("clamp", lambda x: np.clip(x, lo, hi), vjp, a)


def sqrt(a, delta: float = SQRT_DELTA) -> Tensor:
    """``sqrt(x + delta)``; the offset keeps the derivative finite at zero."""
    return _apply(
        "sqrt",
        lambda x: np.sqrt(x + delta),
        lambda g, out, xs, needs: (0.5 * g / out,),
        a,
    )


# reductions and shape manipulation


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    def vjp(g, out, xs, needs):
        return (np.array(_expand_reduced(g, xs[0].shape, axis, keepdims)),)

    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp, a)


def mean(a, axis=None, keepdims=False) -> Tensor:
    def vjp(g, out, xs, needs):
        x = xs[0]
        n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / n,)

    return _apply("mean", lambda x: np.mean(x, axis=axis, keepdims=keepdims), vjp, a)


def reshape(a, shape) -> Tensor:
    shape = tuple(shape)
    return _apply(
        "reshape",
        lambda x: x.reshape(shape),
        lambda g, out, xs, needs: (g.reshape(xs[0].shape),),
        a,
    )


def transpose(a, axes=None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _apply(
        "transpose",
        lambda x: np.transpose(x, axes),
        lambda g, out, xs, needs: (np.transpose(g, inverse),),
        a,
    )


def getitem(a, index) -> Tensor:
    def vjp(g, out, xs, needs):
        full = np.zeros_like(xs[0])
        np.add.at(full, index, g)
        return (full,)

    return _apply("getitem", lambda x: x[index], vjp, a)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    def vjp(g, out, xs, needs):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _apply("stack", lambda *xs: np.stack(xs, axis=axis), vjp, *tensors)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: axis 1 of {a.shape} must match axis 0 of {b.shape}")

    def vjp(g, out, xs, needs):
        x, y = xs
        return (g @ y.T if needs[0] else None, x.T @ g if needs[1] else None)

    return _apply("matmul", np.matmul, vjp, a, b)


def norm(a) -> Tensor:
    """Euclidean norm of the flattened tensor; raises on an all-zero input."""
    a = as_tensor(a)
    if not np.any(a.data):
        raise DegenerateNormError("norm of an all-zero tensor is not differentiable")

    return _apply(
        "norm",
        lambda x: np.sqrt(np.sum(x * x)),
        lambda g, out, xs, needs: (g * xs[0] / out,),
        a,
    )


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.size != b.size:
        raise DimensionError(f"dot: sizes differ ({a.size} vs {b.size})")
    return tsum(mul(reshape(a, (-1,)), reshape(b, (-1,))))


def cosine_similarity(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.size != b.size:
        raise DimensionError(f"cosine_similarity: sizes differ ({a.size} vs {b.size})")
    return div(dot(a, b), mul(norm(a), norm(b)))


# spatial primitives on [C, H, W] arrays


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[C_in,H,W]`` with ``kernel[C_out,C_in,k,k]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3:
        raise DimensionError(f"conv2d: input must be [C,H,W], got rank {x.ndim}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be [C_out,C_in,k,k], got rank {kernel.ndim}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(
            f"conv2d: input channel axis 0 has size {c_in} but kernel axis 1 has size {kc}"
        )
    if kh != kw:
        raise DimensionError(f"conv2d: kernel axes 2 and 3 differ ({kh} vs {kw})")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input axes 1,2 ({h + 2 * padding}x{w + 2 * padding})"
        )
    k, s, p = kh, stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1

    def windows(xa):
        xp = np.pad(xa, ((0, 0), (p, p), (p, p))) if p else xa
        return sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]

    def fwd(xa, ka):
        return np.tensordot(ka, windows(xa), axes=([1, 2, 3], [0, 3, 4]))

    def vjp(g, out, xs, needs):
        xa, ka = xs
        gx = gk = None
        if needs[1]:
            gk = np.tensordot(g, windows(xa), axes=([1, 2], [1, 2]))
        if needs[0]:
            dwin = np.tensordot(ka, g, axes=([0], [0]))  # [C_in, k, k, ho, wo]
            gxp = np.zeros((c_in, h + 2 * p, w + 2 * p))
            for a in range(k):
                for b in range(k):
                    gxp[:, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s] += dwin[:, a, b]
            gx = gxp[:, p : p + h, p : p + w] if p else gxp
        return gx, gk

    return _apply("conv2d", fwd, vjp, x, kernel)


def avg_pool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: axes 1,2 ({h}x{w}) not divisible by {k}")

    def fwd(xa):
        return xa.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))

    def vjp(g, out, xs, needs):
        return (np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k),)

    return _apply("avg_pool2d", fwd, vjp, x)


def separable_map(x, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``rows @ x[c] @ cols.T`` for every channel of ``x[C,H,W]``: any separable linear resampling."""
    x = as_tensor(x)
    if x.ndim != 3 or rows.shape[1] != x.shape[1] or cols.shape[1] != x.shape[2]:
        raise DimensionError(
            f"separable_map: axes 1,2 of {x.shape} do not match matrices {rows.shape}, {cols.shape}"
        )

    def fwd(xa):
        return rows @ xa @ cols.T

    def vjp(g, out, xs, needs):
        return (rows.T @ g @ cols,)

    return _apply("separable_map", fwd, vjp, x)


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"gaussian sigma must be positive, got {sigma}")
    if radius is None:
        radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    # a vanishing sigma degenerates to a delta; overflow to inf is the intended limit
    with np.errstate(over="ignore"):
        g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _correlate_axis(xa, taps, axis):
    win = sliding_window_view(xa, taps.size, axis=axis)
    return win @ taps


def _correlate_axis_adjoint(g, taps, axis):
    n = taps.size
    pad = [(0, 0)] * g.ndim
    pad[axis] = (n - 1, n - 1)
    return _correlate_axis(np.pad(g, pad), taps[::-1], axis)


def _edge_index(n: int, r: int) -> np.ndarray:
    return np.clip(np.arange(-r, n + r), 0, n - 1)


def gaussian_blur(x, sigma: float, radius: int | None = None, mode: str = "same") -> Tensor:
    """Separable Gaussian filter over the last two axes of ``x[C,H,W]``.

    ``mode="valid"`` keeps only positions where the window fits; ``"same"``
    replicates the border before filtering.
    """
    x = as_tensor(x)
    taps = gaussian_kernel1d(sigma, radius)
    r = taps.size // 2
    if mode == "same":
        x = _edge_pad(x, r)
    elif mode != "valid":
        raise ValueError(f"unknown blur mode {mode!r}")
    if x.shape[1] < taps.size or x.shape[2] < taps.size:
        raise DimensionError(f"gaussian_blur: axes 1,2 {x.shape[1:]} smaller than window {taps.size}")

    def fwd(xa):
        return _correlate_axis(_correlate_axis(xa, taps, 1), taps, 2)

    def vjp(g, out, xs, needs):
        return (_correlate_axis_adjoint(_correlate_axis_adjoint(g, taps, 2), taps, 1),)

    return _apply("gaussian_blur", fwd, vjp, x)


def _edge_pad(x: Tensor, r: int) -> Tensor:
    _, h, w = x.shape
    rows, cols = _edge_index(h, r), _edge_index(w, r)

    def fwd(xa):
        return xa[:, rows][:, :, cols]

    def vjp(g, out, xs, needs):
        gc = np.zeros(g.shape[:2] + (w,))
        np.add.at(gc, (slice(None), slice(None), cols), g)
        gr = np.zeros((g.shape[0], h, w))
        np.add.at(gr, (slice(None), rows), gc)
        return (gr,)

    return _apply("edge_pad", fwd, vjp, x)


def grid_sample(x, grid) -> Tensor:
    """Bilinear read of ``x[C,H,W]`` at absolute (row, col) coordinates ``grid[Ho,Wo,2]``.

    Coordinates outside the image are clamped to the border, so the derivative
    w.r.t. a clamped coordinate is zero.
    """
    x, grid = as_tensor(x), as_tensor(grid)
    if x.ndim != 3:
        raise DimensionError(f"grid_sample: input must be [C,H,W], got rank {x.ndim}")
    if grid.ndim != 3 or grid.shape[2] != 2:
        raise DimensionError(f"grid_sample: grid must be [H,W,2], got shape {grid.shape}")
    c, h, w = x.shape

    def setup(ga):
        u = np.clip(ga[..., 0], 0.0, h - 1)
        v = np.clip(ga[..., 1], 0.0, w - 1)
        r0 = np.floor(u).astype(np.intp)
        c0 = np.floor(v).astype(np.intp)
        r1 = np.minimum(r0 + 1, h - 1)
        c1 = np.minimum(c0 + 1, w - 1)
        return r0, r1, c0, c1, u - r0, v - c0

    def fwd(xa, ga):
        r0, r1, c0, c1, fr, fc = setup(ga)
        return (
            xa[:, r0, c0] * ((1.0 - fr) * (1.0 - fc))
            + xa[:, r0, c1] * ((1.0 - fr) * fc)
            + xa[:, r1, c0] * (fr * (1.0 - fc))
            + xa[:, r1, c1] * (fr * fc)
        )

    def vjp(g, out, xs, needs):
        xa, ga = xs
        r0, r1, c0, c1, fr, fc = setup(ga)
        gx = gg = None
        if needs[0]:
            n = h * w
            offsets = (np.arange(c) * n)[:, None]
            flat_g = g.reshape(c, -1)
            idx, wts = [], []
            for rr, cc, wt in (
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c1, (1.0 - fr) * fc),
                (r1, c0, fr * (1.0 - fc)),
                (r1, c1, fr * fc),
            ):
                idx.append((rr * w + cc).reshape(1, -1) + offsets)
                wts.append(flat_g * wt.reshape(1, -1))
            gx = np.bincount(
                np.concatenate(idx, axis=1).ravel(),
                weights=np.concatenate(wts, axis=1).ravel(),
                minlength=c * n,
            ).reshape(c, h, w)
        if needs[1]:
            x00, x01 = xa[:, r0, c0], xa[:, r0, c1]
            x10, x11 = xa[:, r1, c0], xa[:, r1, c1]
            du = np.sum(g * ((1.0 - fc) * (x10 - x00) + fc * (x11 - x01)), axis=0)
            dv = np.sum(g * ((1.0 - fr) * (x01 - x00) + fr * (x11 - x10)), axis=0)
            inside_u = (ga[..., 0] >= 0) & (ga[..., 0] <= h - 1)
            inside_v = (ga[..., 1] >= 0) & (ga[..., 1] <= w - 1)
            gg = np.stack([du * inside_u, dv * inside_v], axis=-1)
        return gx, gg

    return _apply("grid_sample", fwd, vjp, x, grid)


# verification


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-4,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``coords`` restricts the comparison to a subset of flat indices.
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    (analytic,) = grad(f(leaf), leaf)
    analytic = analytic.ravel()
    flat = x.ravel()
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        fp = f(Tensor._wrap(plus.reshape(x.shape))).item()
        fm = f(Tensor._wrap(minus.reshape(x.shape))).item()
        fd = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - fd) / (abs(fd) + 1e-8))
    return worst
