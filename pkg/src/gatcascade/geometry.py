"""Rigid 3D face model, 6-DoF head pose, pinhole projection and pose fitting.

Conventions
-----------
* Model and camera frames share axes: ``x`` to the image right, ``y`` down,
  ``z`` away from the camera.
* Rotation ``R = Rz(roll) @ Ry(yaw) @ Rx(pitch)``; a model point ``X`` maps
  to ``R X + t`` and is projected with ``u = f x / z + cx``, ``v = f y / z + cy``.
* Translation is in model units (the canonical model has unit distance
  between the outer eye corners); angles are radians.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    ContractError,
    DegenerateInputError,
    EmptyInputError,
    FormatError,
    ShapeError,
)

MIN_DEPTH = 1e-6


def wrap_angle(a):
    """Wrap radians to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    # angles already in range pass through bit-exactly
    w = np.where((a > -np.pi) & (a <= np.pi), a, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class HeadPose:
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 1.0

    def __post_init__(self):
        if not self.tz > 0:
            raise ContractError(f"head pose needs tz > 0, got {self.tz}")
        for name in ("yaw", "pitch", "roll"):
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))
        for name in ("tx", "ty", "tz"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll, self.tx, self.ty, self.tz])

    @classmethod
    def from_array(cls, p: Sequence[float]) -> "HeadPose":
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.size != 6:
            raise ShapeError(f"a head pose has 6 parameters, got {p.size}")
        return cls(*map(float, p))

    def degrees(self) -> tuple[float, float, float]:
        return tuple(math.degrees(a) for a in (self.yaw, self.pitch, self.roll))


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float
    side: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ContractError(f"focal length must be positive, got {self.focal}")
        if not (0 <= self.cx <= self.side and 0 <= self.cy <= self.side):
            raise ContractError("principal point must lie inside the image")

    @classmethod
    def default(cls, side: int) -> "CameraIntrinsics":
        """Virtual camera: focal 1.5 x image side, principal point at the centre."""
        return cls(focal=1.5 * side, cx=side / 2.0, cy=side / 2.0, side=int(side))


@dataclass(frozen=True)
class RigidFaceModel:
    points: np.ndarray
    outer_eyes: tuple[int, int]
    pupils: tuple[tuple[int, ...], tuple[int, ...]]
    flip: tuple[int, ...] | None = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"model points must be L x 3, got {pts.shape}")
        L = pts.shape[0]
        if L < 4:
            raise DegenerateInputError(f"a rigid model needs at least 4 points, got {L}")
        centred = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centred, compute_uv=False)
        if sv[2] <= 1e-9 * sv[0]:
            raise DegenerateInputError("model points are coplanar; pose is not observable")
        eyes = tuple(int(i) for i in self.outer_eyes)
        pupils = tuple(tuple(int(i) for i in np.atleast_1d(g)) for g in self.pupils)
        if len(eyes) != 2 or eyes[0] == eyes[1] or len(pupils) != 2 or set(pupils[0]) == set(pupils[1]):
            raise ContractError("outer_eyes and pupils must each name two distinct landmarks")
        for i in eyes + pupils[0] + pupils[1]:
            if not 0 <= i < L:
                raise ContractError(f"semantic index {i} out of range for {L} points")
        flip = None
        if self.flip is not None:
            flip = tuple(int(i) for i in self.flip)
            if sorted(flip) != list(range(L)):
                raise ContractError("flip map must be a permutation of the landmark indices")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "outer_eyes", eyes)
        object.__setattr__(self, "pupils", pupils)
        object.__setattr__(self, "flip", flip)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    def to_json(self) -> dict:
        doc = {
            "points": self.points.tolist(),
            "outer_eyes": list(self.outer_eyes),
            "pupils": [list(g) if len(g) > 1 else g[0] for g in self.pupils],
        }
        if self.flip is not None:
            doc["flip"] = list(self.flip)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RigidFaceModel":
        try:
            return cls(
                points=np.asarray(doc["points"], dtype=float),
                outer_eyes=tuple(doc["outer_eyes"]),
                pupils=tuple(doc["pupils"]),
                flip=doc.get("flip"),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed 3D model document: {exc}") from exc


def load_face_model(path: str | Path) -> RigidFaceModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return RigidFaceModel.from_json(doc)


def save_face_model(model: RigidFaceModel, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh)


def canonical_face_model() -> RigidFaceModel:
    """The bundled 68-point rigid model (iBUG ordering, unit outer-eye distance)."""
    text = resources.files("gatcascade").joinpath("data/face68.json").read_text()
    return RigidFaceModel.from_json(json.loads(text))


# ----------------------------------------------------------------- projection


def _rot_factors(yaw, pitch, roll):
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sp, -cp], [0, cp, -sp]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sr, -cr, 0], [cr, -sr, 0], [0, 0, 0]])
    return (Rx, Ry, Rz), (dRx, dRy, dRz)


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    (Rx, Ry, Rz), _ = _rot_factors(yaw, pitch, roll)
    return Rz @ Ry @ Rx


def _points_of(model) -> np.ndarray:
    return model.points if isinstance(model, RigidFaceModel) else np.asarray(model, dtype=float)


def _pose_array(pose) -> np.ndarray:
    return pose.as_array() if isinstance(pose, HeadPose) else np.asarray(pose, dtype=float)


def _camera_points(X, p):
    R = rotation_matrix(p[0], p[1], p[2])
    return X @ R.T + p[3:6]


def project(model, pose, cam: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of the posed model: (L, 3) points -> (L, 2) pixels."""
    X = _points_of(model)
    P = _camera_points(X, _pose_array(pose))
    if np.any(P[:, 2] <= MIN_DEPTH):
        raise BehindCameraError("a model point lies behind the camera for this pose")
    return cam.focal * P[:, :2] / P[:, 2:3] + np.array([cam.cx, cam.cy])


def init_shape(model, pose, cam: CameraIntrinsics) -> np.ndarray:
    """Initial cascade shape ``x_0``: the rigid model projected with ``pose``."""
    return project(model, pose, cam)


def projection_jacobian(model, pose, cam: CameraIntrinsics) -> np.ndarray:
    """Analytic d(pixels)/d(pose) as an (L, 2, 6) array.

    Pose parameter order is (yaw, pitch, roll, tx, ty, tz).
    """
    X = _points_of(model)
    p = _pose_array(pose)
    (Rx, Ry, Rz), (dRx, dRy, dRz) = _rot_factors(p[0], p[1], p[2])
    R = Rz @ Ry @ Rx
    P = X @ R.T + p[3:6]
    if np.any(P[:, 2] <= MIN_DEPTH):
        raise BehindCameraError("a model point lies behind the camera for this pose")
    dR = [Rz @ dRy @ Rx, Rz @ Ry @ dRx, dRz @ Ry @ Rx]
    dP = np.empty((X.shape[0], 3, 6))
    for k in range(3):
        dP[:, :, k] = X @ dR[k].T
    dP[:, :, 3:] = np.eye(3)
    z = P[:, 2]
    f = cam.focal
    J = np.empty((X.shape[0], 2, 6))
    J[:, 0] = f * (dP[:, 0] / z[:, None] - P[:, 0, None] * dP[:, 2] / (z * z)[:, None])
    J[:, 1] = f * (dP[:, 1] / z[:, None] - P[:, 1, None] * dP[:, 2] / (z * z)[:, None])
    return J


# ----------------------------------------------------------------- pose fitting


@dataclass
class PoseFit:
    pose: HeadPose
    rmse: float
    iterations: int
    converged: bool
    costs: list[float]

    @property
    def status(self) -> str:
        return "converged" if self.converged else "unconverged"


def _initial_pose(X, obs, cam, eyes):
    d = obs[eyes[1]] - obs[eyes[0]]
    md = X[eyes[1], :2] - X[eyes[0], :2]
    roll = math.atan2(d[1], d[0]) - math.atan2(md[1], md[0])
    mc = X.mean(axis=0)
    model_size = np.sqrt(((X[:, :2] - mc[:2]) ** 2).sum(axis=1).mean())
    obs_c = obs.mean(axis=0)
    obs_size = np.sqrt(((obs - obs_c) ** 2).sum(axis=1).mean())
    depth = cam.focal * model_size / obs_size
    Rm = rotation_matrix(0.0, 0.0, roll) @ mc
    tz = depth - Rm[2]
    tx = (obs_c[0] - cam.cx) * depth / cam.focal - Rm[0]
    ty = (obs_c[1] - cam.cy) * depth / cam.focal - Rm[1]
    return np.array([0.0, 0.0, roll, tx, ty, tz])


def fit_pose(
    model: RigidFaceModel,
    observed,
    cam: CameraIntrinsics,
    max_iter: int = 100,
    step_tol: float = 1e-10,
    damping: float = 1e-3,
) -> PoseFit:
    """Fit a 6-DoF pose to 2D landmarks by damped Gauss-Newton.

    Minimises the mean squared reprojection distance. The damping term is
    ``damping * diag(J^T J)``; it is divided by 10 after an accepted step and
    multiplied by 10 after a rejected one. Stops when a step's norm drops
    below ``step_tol`` or after ``max_iter`` trial steps; in the latter case
    the best pose found is returned with ``converged=False``.
    """
    X = model.points
    obs = np.asarray(observed, dtype=float)
    if obs.shape != (X.shape[0], 2):
        raise ShapeError(f"observed landmarks {obs.shape} do not match model with {X.shape[0]} points")
    if not np.all(np.isfinite(obs)):
        raise DegenerateInputError("observed landmarks contain non-finite values")
    sv = np.linalg.svd(obs - obs.mean(axis=0), compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateInputError("observed landmarks are collinear")

    L = X.shape[0]

    def residual(p):
        P = _camera_points(X, p)
        if np.any(P[:, 2] <= MIN_DEPTH):
            return None
        return (cam.focal * P[:, :2] / P[:, 2:3] + [cam.cx, cam.cy] - obs).reshape(-1)

    p = _initial_pose(X, obs, cam, model.outer_eyes)
    r = residual(p)
    if r is None:
        raise DegenerateInputError("initial pose estimate places the model behind the camera")
    cost = float(r @ r) / L
    costs = [cost]
    lam = damping
    converged = False
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        J = projection_jacobian(X, p, cam).reshape(2 * L, 6)
        JtJ = J.T @ J
        g = J.T @ r
        A = JtJ + lam * np.diag(np.diag(JtJ))
        try:
            step = -np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        trial = p + step
        rt = residual(trial)
        ct = float(rt @ rt) / L if rt is not None else np.inf
        if ct <= cost:
            p, r, cost = trial, rt, ct
            costs.append(cost)
            lam = max(lam / 10, 1e-12)
            if np.linalg.norm(step) < step_tol or cost == 0.0:
                converged = True
                break
        else:
            lam *= 10
            if np.linalg.norm(step) < step_tol:
                converged = True
                break
    p[:3] = wrap_angle(p[:3])
    return PoseFit(HeadPose.from_array(p), math.sqrt(cost), iterations, converged, costs)


# ---------------------------------------------------------------- pose metric


def _angles_of(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        arr = np.atleast_2d(poses)
        return arr[:, :3].astype(float)
    return np.array([[q.yaw, q.pitch, q.roll] if isinstance(q, HeadPose) else list(q)[:3] for q in poses], dtype=float)


def pose_mae(predicted, truth) -> dict[str, float]:
    """Per-angle mean absolute error in degrees, plus their mean.

    Angle differences are wrapped to (-180, 180] before taking magnitudes.
    """
    a = _angles_of(predicted)
    b = _angles_of(truth)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInputError("pose_mae needs at least one pose")
    if a.shape != b.shape:
        raise ShapeError(f"pose lists differ in length: {len(a)} vs {len(b)}")
    diff = np.degrees(np.abs(wrap_angle(a - b)))
    mae = diff.mean(axis=0)
    return {"yaw": float(mae[0]), "pitch": float(mae[1]), "roll": float(mae[2]), "mean": float(mae.mean())}
