"""A small multi-stage convolutional encoder that turns an image into a feature map and a pose.

Stage 1 downsamples the image with strided convolutions to the feature
side; later stages refine the previous stage's map with a residual pair of
3x3 convolutions. Every stage has a pose head (global average pool and a
dense layer to 6 numbers) and a coordinate head (dense to ``L x 2``).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, EmptyInputError, ShapeError
from .nn import glorot, zeros


@dataclass(frozen=True)
class BackboneConfig:
    stages: int = 2
    channels: int = 8
    hidden: int = 8
    input_side: int = 256
    feature_side: int = 64
    num_landmarks: int = 68

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError("backbone needs at least one stage")
        if self.input_side % self.feature_side:
            raise ConfigError("feature side must divide input side")
        down = self.input_side // self.feature_side
        if down & (down - 1):
            raise ConfigError("input/feature side ratio must be a power of two")
        for name in ("channels", "hidden", "num_landmarks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def downsamples(self) -> int:
        return int(round(math.log2(self.input_side // self.feature_side)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**d)


def _conv_params(rng, cin: int, cout: int, k: int) -> dict:
    fan_in, fan_out = cin * k * k, cout * k * k
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return {"w": Tensor(rng.uniform(-limit, limit, size=(cout, cin, k, k)), requires_grad=True), "b": zeros(cout)}


def init_backbone(cfg: BackboneConfig, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    stages = []
    for h in range(cfg.stages):
        st = {}
        if h == 0:
            convs = []
            cin = 3
            for i in range(cfg.downsamples):
                cout = cfg.channels if i == cfg.downsamples - 1 else cfg.hidden
                convs.append(_conv_params(rng, cin, cout, 4))
                cin = cout
            if not convs:
                convs.append(_conv_params(rng, 3, cfg.channels, 3))
            st["encoder"] = convs
        else:
            st["encoder"] = [_conv_params(rng, cfg.channels, cfg.hidden, 3), _conv_params(rng, cfg.hidden, cfg.channels, 3)]
        st["pose"] = {"w": glorot(rng, cfg.channels, 6), "b": zeros(6)}
        st["coords"] = {"w": glorot(rng, cfg.channels, 2 * cfg.num_landmarks), "b": zeros(2 * cfg.num_landmarks)}
        stages.append(st)
    return stages


@dataclass
class StageOutput:
    features: Tensor
    pose: Tensor
    coords: Tensor


def _heads(F: Tensor, st: dict, L: int) -> tuple[Tensor, Tensor]:
    pooled = ad.mean(F, axis=(2, 3))
    pose = ad.dense(pooled, st["pose"]["w"], st["pose"]["b"])
    coords = ad.dense(pooled, st["coords"]["w"], st["coords"]["b"])
    return pose, ad.reshape(coords, (coords.shape[0], L, 2))


def backbone_forward(image, params: list[dict], cfg: BackboneConfig) -> list[StageOutput]:
    """Per-stage outputs for (3, S, S) or (B, 3, S, S) images.

    Pose and coordinates carry a leading batch axis whenever the input does.
    The last stage's map is the one the cascade reads.
    """
    x = ad.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.input_side or x.shape[3] != cfg.input_side:
        raise ShapeError(f"backbone expects (B, 3, {cfg.input_side}, {cfg.input_side}) images, got {x.shape}")
    if len(params) != cfg.stages:
        raise ConfigError(f"backbone has {len(params)} stages but config declares {cfg.stages}")
    outs = []
    F = None
    for h, st in enumerate(params):
        if h == 0:
            y = x
            convs = st["encoder"]
            for i, c in enumerate(convs):
                if cfg.downsamples:
                    y = ad.conv2d(y, c["w"], c["b"], stride=2, padding=1)
                else:
                    y = ad.conv2d(y, c["w"], c["b"], stride=1, padding=1)
                if i < len(convs) - 1:
                    y = ad.relu(y)
            F = y
        else:
            c1, c2 = st["encoder"]
            y = ad.relu(ad.conv2d(F, c1["w"], c1["b"], stride=1, padding=1))
            F = F + ad.conv2d(y, c2["w"], c2["b"], stride=1, padding=1)
        pose, coords = _heads(F, st, cfg.num_landmarks)
        if single:
            outs.append(StageOutput(ad.reshape(F, F.shape[1:]), ad.reshape(pose, (6,)), ad.reshape(coords, coords.shape[1:])))
        else:
            outs.append(StageOutput(F, pose, coords))
    return outs


def aggregate_stage_losses(losses) -> Tensor | float:
    """``sum_h 2^(h-1) * loss_h`` over stages numbered from 1."""
    losses = list(losses)
    if not losses:
        raise EmptyInputError("need at least one stage loss")
    total = None
    for h, loss in enumerate(losses):
        term = loss * float(2**h)
        total = term if total is None else total + term
    return total


def multitask_loss(coord_losses, pose_losses, lambda_c: float = 4.0, lambda_p: float = 1.0):
    """Stage-weighted landmark and pose losses."""
    coord_losses, pose_losses = list(coord_losses), list(pose_losses)
    if len(coord_losses) != len(pose_losses):
        raise ShapeError(f"{len(coord_losses)} coordinate losses vs {len(pose_losses)} pose losses")
    return aggregate_stage_losses([c * lambda_c for c in coord_losses]) + aggregate_stage_losses(
        [p * lambda_p for p in pose_losses]
    )


def pose_loss(pred, truth) -> Tensor:
    """Squared L2 distance between 6-vectors, averaged over the batch."""
    pred = ad.as_tensor(pred)
    diff = pred - np.asarray(truth, dtype=float)
    sq = ad.tensor_sum(ad.square(diff), axis=-1)
    return ad.mean(sq)


def stage_losses(outs: list[StageOutput], truth, pose_truth, side: float, beta: float = 1.0):
    """Per-stage (coordinate smooth L1, pose L2) losses against the truth."""
    target = np.asarray(truth, dtype=float) / side
    coord = [ad.smooth_l1(o.coords, target.reshape(o.coords.shape), beta) for o in outs]
    pose = [pose_loss(o.pose, np.asarray(pose_truth).reshape(o.pose.shape)) for o in outs]
    return coord, pose
