"""Per-landmark node features for one cascade step.

A step looks at the current shape (in feature-map pixels), crops a window
around every landmark, embeds the crop into a visual feature vector, embeds
the landmark's displacements to every other landmark into a positional
feature vector, and combines the two.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, GraphError, ShapeError
from .nn import init_mlp


@dataclass(frozen=True)
class WindowSchedule:
    """Crop window side per cascade step, in feature-map pixels."""

    widths: tuple[float, ...]

    def __post_init__(self):
        widths = tuple(float(w) for w in self.widths)
        if not widths:
            raise ConfigError("window schedule needs at least one step")
        if any(w < 1 for w in widths):
            raise ConfigError(f"window widths must be >= 1, got {widths}")
        if any(b > a for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"window widths must not grow along the cascade, got {widths}")
        object.__setattr__(self, "widths", widths)

    def __len__(self) -> int:
        return len(self.widths)

    def __getitem__(self, t: int) -> float:
        return self.widths[t]


@lru_cache(maxsize=None)
def crop_offsets(w: float, out_side: int) -> np.ndarray:
    """Sample offsets of a ``w x w`` window resampled to ``out_side^2`` points.

    Row-major (y outer, x inner) ``(dx, dy)`` pairs; with ``w == out_side``
    the offsets are the integers ``-(n-1)/2 .. (n-1)/2``.
    """
    n = int(out_side)
    ticks = (np.arange(n) - (n - 1) / 2.0) * (w / n)
    gy, gx = np.meshgrid(ticks, ticks, indexing="ij")
    offsets = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)
    offsets.setflags(write=False)
    return offsets


def crop_window(F, centers, w: float, out_side: int = 7) -> Tensor:
    """Differentiable square crops around each landmark.

    ``F`` is (C, H, W) with ``centers`` (L, 2), or batched (B, C, H, W) with
    (B, L, 2). Returns (L, n, n, C) or (B, L, n, n, C). Gradients flow to
    both the map and the centres.
    """
    F, centers = ad.as_tensor(F), ad.as_tensor(centers)
    batched = F.ndim == 4
    if not batched:
        F = ad.reshape(F, (1,) + F.shape)
        centers = ad.reshape(centers, (1,) + centers.shape)
    B, L = centers.shape[0], centers.shape[1]
    n = int(out_side)
    offsets = crop_offsets(float(w), n)
    coords = ad.reshape(centers, (B, L, 1, 2)) + offsets
    samples = ad.bilinear_sample(F, ad.reshape(coords, (B, L * n * n, 2)))
    out = ad.reshape(samples, (B, L, n, n, F.shape[1]))
    return out if batched else ad.reshape(out, out.shape[1:])


def init_visual_head(rng, channels: int, hidden: int, dim: int, out_side: int = 7) -> dict:
    return init_mlp(rng, [out_side * out_side * channels, hidden, dim])


def visual_head(windows, p: dict) -> Tensor:
    """Crop window -> visual feature vector, shared over landmarks.

    The first layer spans the whole ``n x n x C`` window, which is the same
    as one ``n x n`` convolution producing a single spatial output.
    """
    windows = ad.as_tensor(windows)
    lead = windows.shape[:-3]
    flat = ad.reshape(windows, lead + (int(np.prod(windows.shape[-3:])),))
    if flat.shape[-1] != p["w1"].shape[0]:
        raise ShapeError(f"window of {windows.shape[-3:]} does not fit visual head input {p['w1'].shape[0]}")
    h = ad.dense(flat, p["w1"], p["b1"], "relu")
    return ad.dense(h, p["w2"], p["b2"])


@lru_cache(maxsize=None)
def _difference_operator(L: int) -> np.ndarray:
    A = np.zeros((L * (L - 1), L))
    row = 0
    for l in range(L):
        for i in range(L):
            if i == l:
                continue
            A[row, l] = 1.0
            A[row, i] = -1.0
            row += 1
    A.setflags(write=False)
    return A


def relative_displacements(shape, side: float = 1.0) -> Tensor:
    """Displacements from each landmark to all others, divided by ``side``.

    Row ``l`` concatenates ``x^l - x^i`` for every ``i != l`` in ascending
    order, as interleaved ``(dx, dy)`` pairs: (L, 2(L-1)) or batched.
    """
    shape = ad.as_tensor(shape)
    L = shape.shape[-2]
    if L < 2:
        raise GraphError("relative displacements need at least two landmarks")
    diffs = ad.matmul(_difference_operator(L), shape)
    q = ad.reshape(diffs, shape.shape[:-2] + (L, 2 * (L - 1)))
    return q if side == 1.0 else q * (1.0 / side)


def init_positional_encoding(rng, num_landmarks: int, hidden: int, dim: int) -> dict:
    return init_mlp(rng, [2 * (num_landmarks - 1), hidden, dim])


def positional_encoding(q, p: dict) -> Tensor:
    """Two-layer ReLU MLP embedding of the displacement rows."""
    q = ad.as_tensor(q)
    if q.shape[-1] != p["w1"].shape[0]:
        raise ShapeError(f"displacement width {q.shape[-1]} does not match encoder input {p['w1'].shape[0]}")
    h = ad.dense(q, p["w1"], p["b1"], "relu")
    return ad.dense(h, p["w2"], p["b2"])


COMBINE_MODES = ("add", "stack", "none")


def combine(v, r, mode: str = "add", p: dict | None = None) -> Tensor:
    """Merge visual and positional features.

    ``add`` sums them; ``stack`` concatenates and projects back to the
    visual width with ``p["w"], p["b"]``; ``none`` returns the visual part.
    """
    if mode == "none":
        return ad.as_tensor(v)
    v, r = ad.as_tensor(v), ad.as_tensor(r)
    if mode == "add":
        if v.shape != r.shape:
            raise ShapeError(f"cannot add features of shapes {v.shape} and {r.shape}")
        return v + r
    if mode == "stack":
        if p is None:
            raise ConfigError("stack mode needs projection parameters")
        return ad.dense(ad.concat([v, r], axis=-1), p["w"], p["b"])
    raise ConfigError(f"unknown combine mode {mode!r}")
