"""Cascade loss, Adam, the step schedule, shape augmentation and the training loop."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Callable, TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, smooth_l1
from .errors import ConfigError, ContractError, NumericError, ShapeError, TrainingError
from .geometry import wrap_angle
from .nn import flatten
from .backbone import backbone_forward, multitask_loss, stage_losses
from .regressor import CascadeConfig, run_cascade


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    decay: float = 0.1
    milestones: tuple[int, ...] = (100,)
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    beta: float = 1.0
    clip_norm: float = 10.0
    augment: bool = False
    rotation: float = 45.0
    scale: tuple[float, float] = (0.6, 0.15)
    translation: float = 0.05
    flip: float = 0.5
    freeze_backbone: bool = True
    lambda_c: float = 4.0
    lambda_p: float = 1.0
    check_attention: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.beta > 0:
            raise ConfigError("beta must be > 0")
        if not 0 <= self.flip <= 1:
            raise ConfigError("flip probability must be in [0, 1]")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["milestones"] = list(self.milestones)
        d["scale"] = list(self.scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("milestones", "scale"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr * decay ** (milestones passed)``."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.lr * cfg.decay**passed


# --------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    for p, g, m in zip(params, grads, state.m):
        if p.data.shape != np.shape(g) or m.shape != p.data.shape:
            raise ShapeError(f"parameter {p.data.shape} vs gradient {np.shape(g)} vs moment {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        grads = [g * s for g in grads]
    return grads, total


# --------------------------------------------------------------------- loss


def cascade_loss(trajectory, truth, side: float, beta: float = 1.0) -> Tensor:
    """Sum over steps ``t >= 1`` of smooth L1 between ``x_t`` and the truth, in units of ``side``."""
    if len(trajectory) < 2:
        raise ConfigError("cascade loss needs at least one refinement step (K >= 1)")
    target = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=float) / side
    total = None
    for x in trajectory[1:]:
        term = smooth_l1(ad.as_tensor(x) * (1.0 / side), target, beta)
        total = term if total is None else total + term
    return total


def mean_nme_per_step(trajectory: list[np.ndarray], truth: np.ndarray, eyes: tuple[int, int]) -> list[float]:
    """Inter-ocular NME (%) of every shape in a batched trajectory, averaged over the batch."""
    truth = np.asarray(truth)
    d = np.linalg.norm(truth[..., eyes[0], :] - truth[..., eyes[1], :], axis=-1)
    out = []
    for x in trajectory:
        err = np.linalg.norm(np.asarray(x) - truth, axis=-1).mean(axis=-1)
        out.append(float(np.mean(100.0 * err / d)))
    return out


# ------------------------------------------------------------- augmentation


@dataclass
class ShapeSample:
    """What augmentation touches: truth, initial shape and both poses."""

    truth: np.ndarray
    init: np.ndarray
    pose: np.ndarray
    init_pose: np.ndarray

    def copy(self) -> "ShapeSample":
        return ShapeSample(self.truth.copy(), self.init.copy(), self.pose.copy(), self.init_pose.copy())


def _similarity(points: np.ndarray, theta: float, s: float, t: np.ndarray, c: np.ndarray) -> np.ndarray:
    ct, st = math.cos(theta), math.sin(theta)
    R = np.array([[ct, -st], [st, ct]])
    return (points - c) @ R.T * s + c + t


def _pose_similarity(p: np.ndarray, theta: float, s: float, t_units: np.ndarray) -> np.ndarray:
    # An image rotation by theta about the principal point is a camera roll;
    # a scale s is a depth change 1/s; the shift is carried by tx, ty.
    q = np.array(p, dtype=float)
    ct, st = math.cos(theta), math.sin(theta)
    q[3], q[4] = ct * p[3] - st * p[4], st * p[3] + ct * p[4]
    q[2] = wrap_angle(p[2] + theta)
    q[5] = p[5] / s
    q[3:5] += t_units * q[5]
    return q


def flip_shape(sample: ShapeSample, side: float, flip_map) -> ShapeSample:
    """Mirror about the principal column ``side / 2`` and relabel left/right landmarks."""
    if flip_map is None:
        raise ConfigError("horizontal flip needs a left/right landmark map")
    fm = np.asarray(flip_map, dtype=int)
    out = sample.copy()
    for name in ("truth", "init"):
        pts = getattr(out, name)[fm].copy()
        pts[:, 0] = side - pts[:, 0]
        setattr(out, name, pts)
    for name in ("pose", "init_pose"):
        q = getattr(out, name).copy()
        q[0], q[2], q[3] = -q[0], -q[2], -q[3]
        setattr(out, name, q)
    return out


def augment_shape(sample: ShapeSample, rng: np.random.Generator, cfg: TrainConfig, side: float,
                  focal: float, flip_map=None) -> ShapeSample:
    """Random similarity (and optional flip) applied identically to every shape and pose.

    Rotation is uniform in ``±rotation`` degrees about the image centre,
    scale is ``N(mean, spread)`` relative to ``mean`` (so the default
    ``60 ± 15 %`` is a relative jitter of 25 %), translation is uniform in
    ``±translation * side``.
    """
    theta = math.radians(rng.uniform(-cfg.rotation, cfg.rotation)) if cfg.rotation else 0.0
    mean, spread = cfg.scale
    s = 1.0 + (rng.uniform(-spread, spread) / mean if spread else 0.0)
    t = rng.uniform(-cfg.translation, cfg.translation, size=2) * side if cfg.translation else np.zeros(2)
    do_flip = cfg.flip > 0 and rng.random() < cfg.flip
    c = np.array([side / 2.0, side / 2.0])
    out = sample.copy()
    if theta or s != 1.0 or np.any(t):
        out.truth = _similarity(out.truth, theta, s, t, c)
        out.init = _similarity(out.init, theta, s, t, c)
        out.pose = _pose_similarity(out.pose, theta, s, t / focal)
        out.init_pose = _pose_similarity(out.init_pose, theta, s, t / focal)
    if do_flip:
        out = flip_shape(out, side, flip_map)
    return out


# -------------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: list[dict]
    log: list[dict]
    adam: AdamState
    attention_checks: int = 0


def check_attention(A: np.ndarray, tol: float = 1e-9) -> None:
    """Rows sum to one, zero diagonal, entries in [0, 1]."""
    A = np.asarray(A)
    L = A.shape[-1]
    if np.max(np.abs(A.sum(axis=-1) - 1.0)) > tol:
        raise ContractError("attention rows do not sum to 1")
    if np.any(np.diagonal(A, axis1=-2, axis2=-1) != 0.0):
        raise ContractError("attention has non-zero self weight")
    if A.min() < 0.0 or A.max() > 1.0:
        raise ContractError("attention entries outside [0, 1]")


def _bad_param(named) -> str:
    return next((nm for nm, t in named if not np.all(np.isfinite(t.data))), "none (inputs or overflow)")


def _worst_block(names: list[str], grads: list[np.ndarray]) -> str:
    for n, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            return n
    return "none (loss only)"


def train(
    dataset,
    cascade_cfg: CascadeConfig,
    params: list[dict],
    cfg: TrainConfig,
    log_stream: TextIO | None = None,
    eval_fn: Callable | None = None,
    backbone: tuple | None = None,
) -> TrainResult:
    """Seeded mini-batch training of ``params`` on ``dataset``.

    ``dataset`` provides ``feature_maps(idx)``, ``truths(idx)``,
    ``init_shapes(idx)`` and ``model`` (for the eye indices and flip map).
    Each epoch appends ``{"epoch", "lr", "loss", "nme_per_step"}`` to the log,
    where the NME is measured on the training batches as they were seen.

    ``backbone`` is an optional ``(BackboneConfig, params)`` pair. The cascade
    then reads the backbone's last-stage map of each rendered image. With
    ``cfg.freeze_backbone`` its parameters are left untouched; otherwise they
    are trained jointly on the cascade loss plus the stage-weighted
    coordinate and pose losses.
    """
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot train on an empty dataset")
    named = list(flatten(params, "cascade"))
    joint = backbone is not None and not cfg.freeze_backbone
    if joint:
        named += list(flatten(backbone[1], "backbone"))
    names, tensors = [n for n, _ in named], [t for _, t in named]
    state = AdamState.for_params(tensors)
    rng = np.random.default_rng(cfg.seed)
    side = float(cascade_cfg.image_side)
    eyes = tuple(dataset.model.outer_eyes)
    log = []
    checks = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        loss_sum, nme_sum, seen = 0.0, None, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            truth = dataset.truths(idx)
            x0 = dataset.init_shapes(idx)
            pose_truth = dataset.poses(idx)
            if cfg.augment:
                truth, x0, F, pose_truth = _augment_batch(dataset, idx, truth, x0, rng, cfg, side, backbone is not None)
            else:
                F = dataset.images(idx) if backbone is not None else dataset.feature_maps(idx)
            if backbone is not None and not joint:
                F = backbone_forward(F, backbone[1], backbone[0])[-1].features.data
            try:
                with Tape() as tape:
                    if joint:
                        stages = backbone_forward(F, backbone[1], backbone[0])
                        F = stages[-1].features
                    out = run_cascade(params, cascade_cfg, F, x0)
                    loss = cascade_loss(out.shapes, truth, side, cfg.beta)
                    if joint:
                        coord, pose = stage_losses(stages, truth, pose_truth, side, cfg.beta)
                        loss = loss + multitask_loss(coord, pose, cfg.lambda_c, cfg.lambda_p)
            except NumericError as exc:
                raise TrainingError(
                    f"non-finite forward pass at epoch {epoch}, batch {b} ({exc}); parameter block {_bad_param(named)}"
                ) from exc
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {lval}; parameter block {_bad_param(named)}")
            store = backward(loss, tape)
            grads = [store[t] for t in tensors]
            bad = _worst_block(names, grads)
            if bad != "none (loss only)":
                raise TrainingError(f"non-finite gradient at epoch {epoch}, batch {b}, parameter block {bad}")
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            adam_step(tensors, grads, state, lr)
            if cfg.check_attention:
                for step_att in out.attentions:
                    for A in step_att:
                        check_attention(A.data)
                        checks += 1
            m = len(idx)
            nme = np.array(mean_nme_per_step(out.arrays(), truth, eyes)) * m
            nme_sum = nme if nme_sum is None else nme_sum + nme
            loss_sum += lval * m
            seen += m
        rec = {
            "epoch": epoch,
            "lr": lr,
            "loss": loss_sum / seen,
            "nme_per_step": [float(v) for v in (nme_sum / seen)[1:]],
        }
        if eval_fn is not None:
            rec.update(eval_fn(params))
        log.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec) + "\n")
            log_stream.flush()
    return TrainResult(params, log, state, checks)


def _augment_batch(dataset, idx, truth, x0, rng, cfg, side, images: bool):
    # Appearance follows the augmented truth: maps (or images) are redrawn
    # from it with the sample's own noise seed.
    from .synthdata import gen_feature_map, render_image

    poses = dataset.poses(idx)
    init_poses = dataset.poses(idx, "init_pose")
    flip_map = dataset.model.flip
    T, X, F, P = [], [], [], []
    for j, i in enumerate(idx):
        smp = ShapeSample(truth[j], x0[j], poses[j], init_poses[j])
        a = augment_shape(smp, rng, cfg, side, dataset.camera.focal, flip_map)
        T.append(a.truth)
        X.append(a.init)
        P.append(a.pose)
        seed = dataset[int(i)].map_seed
        if images:
            F.append(render_image(a.truth, dataset.config, np.random.default_rng([seed, 1]), dataset.groups))
        else:
            F.append(gen_feature_map(a.truth, dataset.config, np.random.default_rng(seed), dataset.groups))
    return np.stack(T), np.stack(X), np.stack(F), np.stack(P)


def evaluate(dataset, cascade_cfg: CascadeConfig, params: list[dict], batch_size: int = 50):
    """Trajectories (K+1, N, L, 2) in image pixels on every sample, no tape."""
    n = len(dataset)
    chunks = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        out = run_cascade(params, cascade_cfg, dataset.feature_maps(idx), dataset.init_shapes(idx))
        chunks.append(np.stack(out.arrays()))
    return np.concatenate(chunks, axis=1)
