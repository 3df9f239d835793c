"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations run eagerly on float64 arrays. When a :class:`Tape` is active and
at least one operand tracks gradients, the operation is appended to the tape
together with its forward function and saved context, so the tape can be
differentiated with :func:`backward` or re-run with :meth:`Tape.replay`.
Without an active tape nothing is recorded, which makes plain forward
evaluation free of shared state.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (Tensor(x) @ w).sum()
    grads = backward(loss, tape)
    grads[w]  # d loss / d w
"""
from __future__ import annotations

import math
import threading
import weakref
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, GraphError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "GradientStore",
    "backward",
    "finite_diff_check",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "arctan",
    "exp",
    "square",
    "tensor_sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "softmax_excluding_self",
    "bilinear_sample",
    "dense",
    "smooth_l1",
    "conv2d",
]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("op", "parents", "out", "fwd", "bwd", "ctx", "needs", "index")

    def __init__(self, op, parents, out, fwd, bwd, ctx, index):
        self.op = op
        self.parents = parents
        # Weak, so a graph is freed by reference counting as soon as the
        # caller drops its tensors and tape (no tensor <-> node cycle).
        self.out = weakref.ref(out)
        self.fwd = fwd
        self.bwd = bwd
        self.ctx = ctx
        self.needs = tuple(p.requires_grad for p in parents)
        self.index = index


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, the innermost one records.
    Parents of node ``k`` always have smaller indices because operations are
    appended in execution order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def replay(self) -> None:
        """Recompute every recorded output from the current leaf values."""
        for node in self.nodes:
            out, ctx = node.fwd(*[p.data for p in node.parents])
            t = node.out()
            if t is not None:
                t.data = out
            node.ctx = ctx


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node = None

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
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, fwd: Callable, bwd: Callable, *parents: Tensor) -> Tensor:
    out_data, ctx = fwd(*[p.data for p in parents])
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.name = None
    out.node = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(op, parents, out, fwd, bwd, ctx, len(tape.nodes))
        tape.nodes.append(node)
        out.node = node
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def _add_fwd(a, b):
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)


def add(a, b) -> Tensor:
    return _apply("add", _add_fwd, _add_bwd, as_tensor(a), as_tensor(b))


def _sub_fwd(a, b):
    return a - b, (a.shape, b.shape)


def _sub_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)


def sub(a, b) -> Tensor:
    return _apply("sub", _sub_fwd, _sub_bwd, as_tensor(a), as_tensor(b))


def _mul_fwd(a, b):
    return a * b, (a, b)


def _mul_bwd(ctx, g, needs):
    a, b = ctx
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def mul(a, b) -> Tensor:
    return _apply("mul", _mul_fwd, _mul_bwd, as_tensor(a), as_tensor(b))


def _div_fwd(a, b):
    return a / b, (a, b)


def _div_bwd(ctx, g, needs):
    a, b = ctx
    return (
        _unbroadcast(g / b, a.shape) if needs[0] else None,
        _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None,
    )


def div(a, b) -> Tensor:
    return _apply("div", _div_fwd, _div_bwd, as_tensor(a), as_tensor(b))


def neg(a) -> Tensor:
    return _apply("neg", lambda x: (-x, None), lambda ctx, g, needs: (-g,), as_tensor(a))


def _relu_fwd(x):
    mask = x > 0
    return x * mask, mask


def relu(x) -> Tensor:
    return _apply("relu", _relu_fwd, lambda mask, g, needs: (g * mask,), as_tensor(x))


def arctan(x) -> Tensor:
    return _apply(
        "arctan",
        lambda a: (np.arctan(a), a),
        lambda a, g, needs: (g / (1.0 + a * a),),
        as_tensor(x),
    )


def bounded_arctan(x, half_width: float) -> Tensor:
    """``(2 h / pi) * arctan(x)``, kept strictly inside ``(-h, h)``.

    Float arctan rounds to pi/2 once ``|x|`` passes about 1e16, which would
    put the value exactly on the bound; there it is held one ulp inside.
    """
    scale = 2.0 * half_width / math.pi
    lim = float(np.nextafter(half_width, 0.0))
    return _apply(
        "bounded_arctan",
        lambda a: (np.clip(np.arctan(a) * scale, -lim, lim), a),
        lambda a, g, needs: (g * (scale / (1.0 + a * a)),),
        as_tensor(x),
    )


def _exp_fwd(a):
    out = np.exp(a)
    return out, out


def exp(x) -> Tensor:
    return _apply("exp", _exp_fwd, lambda out, g, needs: (g * out,), as_tensor(x))


def square(x) -> Tensor:
    return _apply("square", lambda a: (a * a, a), lambda a, g, needs: (2.0 * a * g,), as_tensor(x))


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)

    def fwd(a):
        return a.sum(axis=axes, keepdims=keepdims), a.shape

    def bwd(shape, g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _apply("sum", fwd, bwd, x)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def fwd(a):
        return a.sum(axis=axes, keepdims=keepdims) / count, a.shape

    def bwd(shape, g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return _apply("mean", fwd, bwd, x)


# ------------------------------------------------------------------ structure


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    return _apply(
        "reshape",
        lambda a: (a.reshape(shape), a.shape),
        lambda orig, g, needs: (g.reshape(orig),),
        x,
    )


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _apply(
        "transpose",
        lambda a: (a.transpose(axes), None),
        lambda ctx, g, needs: (g.transpose(inverse),),
        x,
    )


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]

    def fwd(*arrays):
        sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis), np.cumsum(sizes)[:-1]

    def bwd(splits, g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", fwd, bwd, *parts)


def take(x, index) -> Tensor:
    """Basic or fancy indexing; gradients scatter-add back."""
    x = as_tensor(x)

    def fwd(a):
        return np.array(a[index]), a.shape

    def bwd(shape, g, needs):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _apply("take", fwd, bwd, x)


# ---------------------------------------------------------------- linear maps


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return np.matmul(a, b), (a, b)


def _matmul_bwd(ctx, g, needs):
    a, b = ctx
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    if needs[1]:
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return ga, gb


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply("matmul", _matmul_fwd, _matmul_bwd, a, b)


_ACTIVATIONS = {"none": None, "relu": relu, "arctan": arctan}


def dense(x, W, b=None, activation: str = "none") -> Tensor:
    """Affine map ``x @ W + b`` over the last axis, then an activation."""
    if activation not in _ACTIVATIONS:
        raise ContractError(f"unknown activation {activation!r}")
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense input width {x.shape[-1]} does not match weights {W.shape}")
    h = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"dense bias shape {b.shape} does not match weights {W.shape}")
        h = add(h, b)
    act = _ACTIVATIONS[activation]
    return h if act is None else act(h)


# ------------------------------------------------------------- fused kernels


def _softmax_xself_fwd(x):
    L = x.shape[-1]
    eye = np.eye(L, dtype=bool)
    z = np.where(eye, -np.inf, x)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    A = e / e.sum(axis=-1, keepdims=True)
    return A, A


def _softmax_xself_bwd(A, g, needs):
    return (A * (g - (g * A).sum(axis=-1, keepdims=True)),)


def softmax_excluding_self(logits) -> Tensor:
    """Row softmax over ``j != i`` of a (..., L, L) array; the diagonal is 0."""
    logits = as_tensor(logits)
    if logits.ndim < 2 or logits.shape[-1] != logits.shape[-2]:
        raise ShapeError(f"attention logits must be square, got {logits.shape}")
    if logits.shape[-1] < 2:
        raise GraphError("a landmark graph needs at least two nodes")
    return _apply("softmax_excluding_self", _softmax_xself_fwd, _softmax_xself_bwd, logits)


def _bilinear_fwd(m, c):
    # Gather from a channels-last copy padded by one zero pixel on every side;
    # clipping indices into the padding then reads zeros outside the map.
    B, C, H, W = m.shape
    x = c[..., 0]
    y = c[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    xi = np.clip(x0.astype(np.intp) + 1, 0, W + 1)
    yi = np.clip(y0.astype(np.intp) + 1, 0, H + 1)
    xj = np.clip(x0.astype(np.intp) + 2, 0, W + 1)
    yj = np.clip(y0.astype(np.intp) + 2, 0, H + 1)
    padded = np.zeros((B, H + 2, W + 2, C))
    padded[:, 1:-1, 1:-1, :] = m.transpose(0, 2, 3, 1)
    flat = padded.reshape(-1, C)
    base = (np.arange(B) * ((H + 2) * (W + 2)))[:, None]
    rows_i = base + yi * (W + 2)
    rows_j = base + yj * (W + 2)
    idx = (rows_i + xi, rows_i + xj, rows_j + xi, rows_j + xj)
    v00, v01, v10, v11 = (np.take(flat, k, axis=0) for k in idx)
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    out = top + wy * (bottom - top)
    return out, ((B, C, H, W), wx, wy, idx, (v00, v01, v10, v11))


def _bilinear_bwd(ctx, g, needs):
    (B, C, H, W), wx, wy, idx, (v00, v01, v10, v11) = ctx
    gm = gc = None
    if needs[1]:
        ddx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        ddy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        gc = np.stack([(g * ddx).sum(-1), (g * ddy).sum(-1)], axis=-1)
    if needs[0]:
        flat = np.zeros((B * (H + 2) * (W + 2), C))
        weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
        for k, w in zip(idx, weights):
            np.add.at(flat, k.reshape(-1), (g * w).reshape(-1, C))
        gm = flat.reshape(B, H + 2, W + 2, C)[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
    return gm, gc


def bilinear_sample(fmap, coords) -> Tensor:
    """Sample a (C, H, W) map at (P, 2) continuous ``(x, y)`` pixel coordinates.

    ``x`` indexes columns and ``y`` rows; integer coordinates hit pixel
    centres exactly. A leading batch axis on both operands is allowed:
    (B, C, H, W) with (B, P, 2) gives (B, P, C). Samples outside the map
    read zeros. Differentiable in both the map and the coordinates.
    """
    fmap, coords = as_tensor(fmap), as_tensor(coords)
    batched = fmap.ndim == 4
    if fmap.ndim not in (3, 4) or coords.ndim != fmap.ndim - 1 or coords.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample got map {fmap.shape} and coords {coords.shape}")
    if batched and fmap.shape[0] != coords.shape[0]:
        raise ShapeError(f"batch sizes differ: map {fmap.shape} vs coords {coords.shape}")
    if batched:
        return _apply("bilinear_sample", _bilinear_fwd, _bilinear_bwd, fmap, coords)

    def fwd(m, c):
        out, ctx = _bilinear_fwd(m[None], c[None])
        return out[0], ctx

    def bwd(ctx, g, needs):
        gm, gc = _bilinear_bwd(ctx, g[None], needs)
        return (None if gm is None else gm[0], None if gc is None else gc[0])

    return _apply("bilinear_sample", fwd, bwd, fmap, coords)


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss: ``0.5 d^2 / beta`` inside ``|d| < beta``, else ``|d| - beta/2``."""
    if beta <= 0:
        raise ContractError(f"smooth_l1 beta must be positive, got {beta}")
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    n = max(pred.size, 1)

    def fwd(p, t):
        d = p - t
        ad = np.abs(d)
        quad = ad < beta
        loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta).sum() / n
        slope = np.where(quad, d / beta, np.sign(d)) / n
        return np.asarray(loss), slope

    def bwd(slope, g, needs):
        gs = g * slope
        return (gs if needs[0] else None, -gs if needs[1] else None)

    return _apply("smooth_l1", fwd, bwd, pred, target)


def conv2d(x, W, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of (B, Cin, H, W) with (Cout, Cin, k, k) kernels.

    Zero padding; output side ``(H + 2*padding - k) // stride + 1``.
    """
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 4 or W.ndim != 4 or x.shape[1] != W.shape[1] or W.shape[2] != W.shape[3]:
        raise ShapeError(f"conv2d got input {x.shape} and kernels {W.shape}")
    k = W.shape[2]
    s, p = int(stride), int(padding)

    def fwd(a, w):
        B, Cin, H, Wd = a.shape
        ap = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a
        Ho = (H + 2 * p - k) // s + 1
        Wo = (Wd + 2 * p - k) // s + 1
        win = np.lib.stride_tricks.sliding_window_view(ap, (k, k), axis=(2, 3))
        win = win[:, :, : (Ho - 1) * s + 1 : s, : (Wo - 1) * s + 1 : s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * k * k)
        wm = w.reshape(w.shape[0], -1)
        out = (cols @ wm.T).reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2)
        return out, (a.shape, ap.shape, cols, wm, Ho, Wo)

    def bwd(ctx, g, needs):
        shape, pshape, cols, wm, Ho, Wo = ctx
        B, Cin = shape[0], shape[1]
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, -1)
        gx = gw = None
        if needs[1]:
            gw = (g2.T @ cols).reshape(W.shape)
        if needs[0]:
            gcols = (g2 @ wm).reshape(B, Ho, Wo, Cin, k, k)
            gp = np.zeros(pshape)
            for i in range(k):
                for j in range(k):
                    gp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gp[:, :, p : pshape[2] - p, p : pshape[3] - p] if p else gp
        return gx, gw

    out = _apply("conv2d", fwd, bwd, x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match kernels {W.shape}")
        out = add(out, reshape(b, (W.shape[0], 1, 1)))
    return out


# ------------------------------------------------------------------- backward


class GradientStore:
    """Gradients of tracked leaf tensors; a missing entry means zero."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._tensors: dict[int, Tensor] = {}

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = g
            self._tensors[key] = t

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.shape)
        return np.ascontiguousarray(np.broadcast_to(g, t.shape))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())


def backward(loss: Tensor, tape: Tape | None = None) -> GradientStore:
    """Reverse-mode gradients of a scalar ``loss`` for every tracked leaf."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ContractError("backward needs the tape the loss was recorded on")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    store = GradientStore()
    node = loss.node
    if node is None:
        if loss.requires_grad:
            store._accumulate(loss, np.ones(loss.shape))
        return store
    if node.index >= len(tape.nodes) or tape.nodes[node.index] is not node:
        raise ContractError("loss was not recorded on this tape")
    pending: dict[int, np.ndarray] = {node.index: np.ones(loss.shape)}
    for node in reversed(tape.nodes[: node.index + 1]):
        g = pending.pop(node.index, None)
        if g is None:
            continue
        pgrads = node.bwd(node.ctx, g, node.needs)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                store._accumulate(parent, pg)
            else:
                key = parent.node.index
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg
    return store


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    nudge_kinks: bool = False,
) -> float:
    """Largest relative error between taped and central-difference gradients.

    The error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    ``samples`` limits the number of randomly chosen entries per input.
    With ``nudge_kinks`` inputs closer than ``10*eps`` to zero are moved off
    it so that piecewise-linear activations are not probed at their kink.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        if nudge_kinks:
            near = np.abs(t.data) < 10 * eps
            t.data[near] = np.where(t.data[near] < 0, -10 * eps, 10 * eps)
    with Tape() as tape:
        out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function output is non-finite at the base point")
    grads = backward(out, tape)
    worst = 0.0
    for k, t in enumerate(inputs):
        analytic = grads[t]
        flat = t.data.reshape(-1)
        count = flat.size
        chosen = np.arange(count) if samples is None or samples >= count else rng.choice(count, samples, replace=False)
        for i in chosen:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*inputs).data.sum())
            flat[i] = orig - eps
            fm = float(fn(*inputs).data.sum())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite output when perturbing input {k} at flat index {i}")
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
