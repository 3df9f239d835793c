"""Graph-attention step regressors and the cascade that chains them.

Shapes live in two frames: the caller's image pixels and the feature-map
pixels the crops are taken in, related by ``CascadeConfig.feature_stride``.
Window widths and the per-step displacement bound ``w_t / 2`` are in
feature-map pixels.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError
from .features import (
    COMBINE_MODES,
    WindowSchedule,
    combine,
    crop_window,
    init_positional_encoding,
    init_visual_head,
    positional_encoding,
    relative_displacements,
    visual_head,
)
from .geometry import CameraIntrinsics, RigidFaceModel, init_shape
from .nn import glorot, init_mlp, zeros

ATTENTION_MODES = ("gat", "gcn")


@dataclass(frozen=True)
class CascadeConfig:
    """Architecture of a cascade; defaults follow the full-size model."""

    num_landmarks: int = 68
    channels: int = 256
    dim: int = 512
    visual_hidden: int = 256
    posenc_hidden: int = 512
    gat_layers: int = 4
    windows: tuple[float, ...] = (16.0, 8.0, 4.0)
    crop_side: int = 7
    posenc: str = "add"
    attention: str = "gat"
    scale_logits: bool = True
    image_side: int = 256
    feature_side: int = 64

    def __post_init__(self):
        sched = WindowSchedule(tuple(self.windows))
        object.__setattr__(self, "windows", sched.widths)
        if self.num_landmarks < 2:
            raise ConfigError("a cascade needs at least two landmarks")
        if self.posenc not in COMBINE_MODES:
            raise ConfigError(f"posenc must be one of {COMBINE_MODES}, got {self.posenc!r}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        for name in ("channels", "dim", "visual_hidden", "posenc_hidden", "gat_layers", "crop_side"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.image_side % self.feature_side:
            raise ConfigError("feature side must divide image side")

    @property
    def steps(self) -> int:
        return len(self.windows)

    @property
    def feature_stride(self) -> float:
        return self.image_side / self.feature_side

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["windows"] = list(self.windows)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cascade config keys: {sorted(unknown)}")
        d = dict(d)
        if "windows" in d:
            d["windows"] = tuple(d["windows"])
        return cls(**d)


def shared_attention_mode(cfg: CascadeConfig) -> CascadeConfig:
    """Variant where every layer of a step reuses the first layer's attention."""
    return dataclasses.replace(cfg, attention="gcn")


# --------------------------------------------------------------- parameters


def init_gat_layer(rng, dim: int, with_attention: bool = True) -> dict:
    p = {}
    if with_attention:
        p["wq"], p["bq"] = glorot(rng, dim, dim), zeros(dim)
        p["wk"], p["bk"] = glorot(rng, dim, dim), zeros(dim)
    p["wv"], p["bv"] = glorot(rng, dim, dim), zeros(dim)
    p["update"] = init_mlp(rng, [2 * dim, dim, dim])
    return p


def init_step(rng, cfg: CascadeConfig) -> dict:
    D = cfg.dim
    step = {"visual": init_visual_head(rng, cfg.channels, cfg.visual_hidden, D, cfg.crop_side)}
    if cfg.posenc == "add":
        step["posenc"] = init_positional_encoding(rng, cfg.num_landmarks, cfg.posenc_hidden, D)
    elif cfg.posenc == "stack":
        q_dim = 2 * (cfg.num_landmarks - 1)
        step["stack"] = {"w": glorot(rng, D + q_dim, D), "b": zeros(D)}
    step["gat"] = [
        init_gat_layer(rng, D, with_attention=(cfg.attention == "gat" or s == 0)) for s in range(cfg.gat_layers)
    ]
    step["decoder"] = init_mlp(rng, [D, D, 2])
    return step


def init_cascade(cfg: CascadeConfig, seed: int = 0) -> list[dict]:
    """Glorot-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    return [init_step(rng, cfg) for _ in range(cfg.steps)]


# ------------------------------------------------------------------ forward


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {where}")


def gat_layer(f, p: dict, scale: float = 1.0, attention: Tensor | None = None, name: str = "gat"):
    """One attentional message-passing layer with a residual update.

    Returns the updated node features and the (…, L, L) attention matrix.
    When ``attention`` is given it is used instead of computing new
    query/key similarities.
    """
    f = ad.as_tensor(f)
    if attention is None:
        hq = ad.dense(f, p["wq"], p["bq"])
        hk = ad.dense(f, p["wk"], p["bk"])
        logits = ad.matmul(hq, ad.transpose(hk, tuple(range(hk.ndim - 2)) + (hk.ndim - 1, hk.ndim - 2)))
        if scale != 1.0:
            logits = logits * scale
        _check_finite(logits, f"{name} attention logits")
        attention = ad.softmax_excluding_self(logits)
    hv = ad.dense(f, p["wv"], p["bv"])
    message = ad.matmul(attention, hv)
    u = p["update"]
    h = ad.dense(ad.concat([f, message], axis=-1), u["w1"], u["b1"], "relu")
    out = f + ad.dense(h, u["w2"], u["b2"])
    _check_finite(out, f"{name} output")
    return out, attention


def bounded_displacement(raw, w: float) -> Tensor:
    """``(w / pi) * arctan(raw)``: strictly inside (-w/2, w/2)."""
    return ad.bounded_arctan(raw, w / 2)


def step_forward(F, x_prev, step_params: dict, w: float, cfg: CascadeConfig, name: str = "step"):
    """One cascade step in feature-map pixels.

    Returns the displacement ``(…, L, 2)`` and the attention matrix of each
    GAT layer.
    """
    x_prev = ad.as_tensor(x_prev)
    windows = crop_window(F, x_prev, w, cfg.crop_side)
    v = visual_head(windows, step_params["visual"])
    if cfg.posenc == "add":
        q = relative_displacements(x_prev, cfg.feature_side)
        f = combine(v, positional_encoding(q, step_params["posenc"]), "add")
    elif cfg.posenc == "stack":
        q = relative_displacements(x_prev, cfg.feature_side)
        f = combine(v, q, "stack", step_params["stack"])
    else:
        f = combine(v, None, "none")
    scale = 1.0 / math.sqrt(cfg.dim) if cfg.scale_logits else 1.0
    attentions = []
    shared = None
    for s, layer in enumerate(step_params["gat"]):
        f, A = gat_layer(f, layer, scale, attention=shared, name=f"{name} gat {s}")
        if cfg.attention == "gcn" and shared is None:
            shared = A
        attentions.append(A)
    dec = step_params["decoder"]
    h = ad.dense(f, dec["w1"], dec["b1"], "relu")
    raw = ad.dense(h, dec["w2"], dec["b2"])
    return bounded_displacement(raw, w), attentions


@dataclass
class CascadeOutput:
    """Shapes ``x_0 .. x_K`` in image pixels plus per-step attentions."""

    shapes: list[Tensor]
    deltas: list[Tensor]
    attentions: list[list[Tensor]] = field(default_factory=list)

    def arrays(self) -> list[np.ndarray]:
        return [s.data for s in self.shapes]


def run_cascade(params: list[dict], cfg: CascadeConfig, F, x0) -> CascadeOutput:
    """Refine ``x0`` (image pixels) over all steps on feature map(s) ``F``."""
    if len(params) != cfg.steps:
        raise ConfigError(f"cascade has {len(params)} steps but config declares {cfg.steps}")
    stride = cfg.feature_stride
    x0 = ad.as_tensor(x0)
    x = x0 * (1.0 / stride) if stride != 1.0 else x0
    shapes, deltas, attentions = [x0], [], []
    for t, (step, w) in enumerate(zip(params, cfg.windows)):
        dx, A = step_forward(F, x, step, w, cfg, name=f"step {t}")
        x = x + dx
        deltas.append(dx)
        attentions.append(A)
        shapes.append(x * stride if stride != 1.0 else x)
    return CascadeOutput(shapes, deltas, attentions)


def cascade_forward(
    F, pose, model3d: RigidFaceModel, cam: CameraIntrinsics, params: list[dict], cfg: CascadeConfig
) -> CascadeOutput:
    """Initialise from the projected rigid model, then run every step."""
    x0 = init_shape(model3d, pose, cam)
    return run_cascade(params, cfg, F, x0)
