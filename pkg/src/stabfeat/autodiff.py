"""Small reverse-mode differentiation engine over dense numpy arrays.

Only the operators the stability network and its losses need are provided.
Every op records its parents and a closure that maps the output gradient to
input gradients; :func:`backward` replays them in reverse topological order.

Data defaults to float32. Arrays handed in as float64 stay float64, which is
how :func:`grad_check` evaluates the reference path.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

BCE_EPS = 1e-7


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Array node in a differentiable computation.

    Parameters
    ----------
    data : array_like
        Values. Non-float input is converted to float32.
    requires_grad : bool
        Leaf tensors with this flag receive a ``grad`` buffer in
        :func:`backward`.
    name : str, optional
        Used in error messages and weight files.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_float_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # arithmetic sugar; operands that are not tensors are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = np.float64 if like is None else like.data.dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out._parents = parents
    out._backward = backward_fn
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects a 4-D (batch, channels, height, width) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar arithmetic


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar-with-array broadcasting is used by the losses
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(dtype=np.float64)).reshape(shape).astype(grad.dtype)


def add(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _lift(b, a)
    else:
        a = _lift(a, b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Product of a tensor with a scalar tensor or a constant."""
    a = _lift(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _node(a.data * c, (a,), lambda g: (g * c,), "scale")
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, accumulated in float64."""
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    return _node(total, (x,), lambda g: (np.full_like(x.data, g),), "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    # keep the open interval even where float32 rounds to 0 or 1
    info = np.finfo(s.dtype)
    out = np.clip(s, info.tiny, 1.0 - info.epsneg)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _node(out, (x,), backward, "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


# ---------------------------------------------------------------------------
# convolutional building blocks


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, C, H, W, kh, kw)


def _correlate_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = _windows(x, w.shape[2], w.shape[3])
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, H, W, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero "same" padding.

    ``kernel`` has shape ``(out_channels, in_channels, kh, kw)`` with odd
    ``kh`` and ``kw``; ``bias`` has shape ``(out_channels,)``.
    """
    _check_4d(x, "conv2d")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-D, got shape {kernel.shape}")
    out_c, in_c, kh, kw = kernel.shape
    if in_c != x.shape[1]:
        raise ValueError(
            f"conv2d: kernel shape {kernel.shape} expects {in_c} input channels "
            f"but input has shape {x.shape}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got shape {kernel.shape}")
    if bias is not None and bias.shape != (out_c,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match kernel shape {kernel.shape}")

    out = _correlate_same(x.data, kernel.data)
    if bias is not None:
        out = out + bias.data.reshape(1, out_c, 1, 1)

    def backward(g):
        gx = gk = gb = None
        if x.requires_grad:
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _correlate_same(g, np.ascontiguousarray(flipped))
        if kernel.requires_grad:
            win = _windows(x.data, kh, kw)
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, backward, "conv2d")


def pool_down(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    _check_4d(x, "pool_down")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"pool_down needs even height and width, got shape {x.shape}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return _node(out, (x,), backward, "pool_down")


def upsample(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _check_4d(x, "upsample")
    b, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), backward, "upsample")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: batch/spatial extents differ, {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _node(out, (a, b), backward, "concat")


def take(x: Tensor, index: int) -> Tensor:
    """Batch element ``index`` of a 4-D tensor, kept as a batch of one."""
    _check_4d(x, "take")
    if not 0 <= index < x.shape[0]:
        raise ValueError(f"take: index {index} outside batch of {x.shape[0]}")

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] = g[0]
        return (grad,)

    return _node(x.data[index : index + 1].copy(), (x,), backward, "take")


# ---------------------------------------------------------------------------
# loss primitives


def bce_mean(pred: Tensor, target) -> Tensor:
    """Mean binary cross entropy; ``pred`` is clamped into [1e-7, 1 - 1e-7]."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"bce_mean: prediction shape {pred.shape} and target shape {t.shape} differ")
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValueError("bce_mean: target values must lie in [0, 1]")
    p_raw = pred.data.astype(np.float64)
    p = np.clip(p_raw, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    value = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / n
    inside = (p_raw >= BCE_EPS) & (p_raw <= 1.0 - BCE_EPS)

    def backward(g):
        grad = np.where(inside, (p - t) / (p * (1.0 - p)), 0.0) * (float(g) / n)
        return (grad.astype(pred.data.dtype),)

    return _node(np.asarray(value, dtype=pred.data.dtype), (pred,), backward, "bce_mean")


def weighted_pixel_sum(a: Tensor, grid: np.ndarray) -> Tensor:
    """``sum_ij a_ij * grid_ij`` for a one-channel map and an (H, W, dim) grid."""
    h, w = a.shape[-2:]
    if a.data.size != h * w:
        raise ValueError(f"weighted_pixel_sum expects a single map, got shape {a.shape}")
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.shape[:2] != (h, w):
        raise ValueError(f"weighted_pixel_sum: grid shape {grid.shape} does not cover map {(h, w)}")
    flat = grid.reshape(h * w, -1).astype(np.float64)
    out = a.data.reshape(h * w).astype(np.float64) @ flat

    def backward(g):
        return ((flat @ g.astype(np.float64)).reshape(a.shape).astype(a.data.dtype),)

    return _node(out.astype(a.data.dtype), (a,), backward, "weighted_pixel_sum")


def l2norm(v: Tensor) -> Tensor:
    norm = float(np.sqrt(np.sum(v.data.astype(np.float64) ** 2)))

    def backward(g):
        if norm == 0.0:
            return (np.zeros_like(v.data),)
        return ((v.data / norm) * g,)

    return _node(np.asarray(norm, dtype=v.data.dtype), (v,), backward, "l2norm")


def sample_bilinear(a: Tensor, xs, ys) -> Tensor:
    """Bilinear samples of a single-channel map at pixel positions (x, y)."""
    h, w = a.shape[-2:]
    if a.data.size != h * w:
        raise ValueError(f"sample_bilinear expects a single map, got shape {a.shape}")
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.shape != ys.shape:
        raise ValueError("sample_bilinear: x and y must have the same length")
    if xs.size and (xs.min() < 0 or xs.max() > w - 1 or ys.min() < 0 or ys.max() > h - 1):
        raise ValueError(f"sample_bilinear: coordinates outside the {w}x{h} map")
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xs - x0, ys - y0
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    flat = a.data.reshape(-1).astype(np.float64)
    out = (flat[idx] * wts).sum(axis=0)

    def backward(g):
        grad = np.zeros(h * w, dtype=np.float64)
        np.add.at(grad, idx.ravel(), (wts * g.astype(np.float64)[None, :]).ravel())
        return (grad.reshape(a.shape).astype(a.data.dtype),)

    return _node(out.astype(a.data.dtype), (a,), backward, "sample_bilinear")


def weighted_mean(weights: Tensor, values) -> Tensor:
    """``sum_k w_k v_k / sum_k w_k`` with constant values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    w = weights.data.astype(np.float64).ravel()
    if v.shape != w.shape:
        raise ValueError(f"weighted_mean: {w.size} weights for {v.size} values")
    total = w.sum()
    if not total > 0:
        raise ValueError("weighted_mean: weights must have a positive sum")
    mean = float(w @ v) / total

    def backward(g):
        return (((v - mean) / total * float(g)).reshape(weights.shape).astype(weights.data.dtype),)

    return _node(np.asarray(mean, dtype=weights.data.dtype), (weights,), backward, "weighted_mean")


# ---------------------------------------------------------------------------
# graph traversal and gradients


class Graph:
    """Topologically ordered view of the ops that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> Graph:
    """Populate ``.grad`` on every leaf that requires it.

    Leaves that are not reachable from ``loss`` but are listed in ``params``
    get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g.astype(node.data.dtype, copy=False).reshape(node.shape)
            continue
        if not node.requires_grad:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if params is not None:
        reached = {id(n) for n in graph.nodes}
        for p in params:
            if id(p) not in reached:
                p.zero_grad()
    return graph


def sgd_step(params: Iterable[Tensor], lr: float, grads: Iterable[np.ndarray] | None = None) -> None:
    """Plain gradient descent: ``p <- p - lr * g``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = list(params)
    grads = [p.grad for p in params] if grads is None else list(grads)
    for p, g in zip(params, grads):
        if g is None:
            continue
        p.data -= (lr * g).astype(p.data.dtype, copy=False)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    samples_per_param: int = 4,
    seed: int = 0,
    kink_tol: float | None = None,
    max_redraws: int = 20,
) -> float:
    """Compare analytic gradients with 64-bit central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values each
    call. Parameters are promoted to float64 for the duration of the check and
    restored afterwards. Parameters with ``requires_grad=False`` are skipped.

    With ``kink_tol`` set, each sampled entry is also differenced at
    ``eps / 2``; if the two estimates disagree by more than ``kink_tol``
    (relative), the step straddles a relu or max-pool kink and another entry
    is drawn, up to ``max_redraws`` times per sample.

    Returns the maximum of ``|analytic - numeric| / max(1, |numeric|)`` over
    the sampled entries.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    rng = np.random.default_rng(seed)
    saved = [p.data for p in params]

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().data)
        flat[i] = orig - h
        down = float(loss_fn().data)
        flat[i] = orig
        return (up - down) / (2 * h)

    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        loss = loss_fn()
        backward(loss, params)
        worst = 0.0
        for p in params:
            if not p.requires_grad:
                continue
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.astype(np.float64)
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(samples_per_param, flat.size), replace=False)
            for i in picks:
                numeric = central(flat, i, eps)
                if kink_tol is not None:
                    for _ in range(max_redraws):
                        half = central(flat, i, eps / 2)
                        if abs(numeric - half) <= kink_tol * max(1.0, abs(numeric)):
                            break
                        i = int(rng.integers(flat.size))
                        numeric = central(flat, i, eps)
                err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
        return worst
    finally:
        for p, data in zip(params, saved):
            p.data = data
            p.grad = None
