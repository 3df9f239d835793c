"""Landmark evaluation: NME under three normalisations, CED, AUC, FR and NPE90.

All percentages are on the 0-100 scale. ``fr`` counts images strictly
above the threshold; ``npe90`` is the nearest-rank 90th percentile.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateInputError, EmptyInputError, FormatError, ShapeError
from .fileio import atomic_write_text
from .geometry import pose_mae

NORM_KINDS = ("inter_ocular", "inter_pupil", "box")


@dataclass(frozen=True)
class NormalizationSpec:
    """How the per-image scale ``d`` is measured on the truth shape.

    ``inter_ocular`` takes two landmark indices (outer eye corners);
    ``inter_pupil`` takes two index groups whose means are the pupils;
    ``box`` uses the geometric mean of the truth bounding box sides.
    """

    kind: str
    indices: tuple = ()

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ContractError(f"normalisation kind must be one of {NORM_KINDS}, got {self.kind!r}")
        if self.kind == "box":
            object.__setattr__(self, "indices", ())
            return
        if len(self.indices) != 2:
            raise ContractError(f"{self.kind} normalisation needs two index entries")
        if self.kind == "inter_ocular":
            idx = tuple(int(i) for i in self.indices)
            if idx[0] == idx[1]:
                raise ContractError("outer eye indices must differ")
        else:
            idx = tuple(tuple(int(i) for i in np.atleast_1d(g)) for g in self.indices)
            if not idx[0] or not idx[1]:
                raise ContractError("pupil index groups must be non-empty")
        for i in np.concatenate([np.atleast_1d(g) for g in idx]).astype(int):
            if i < 0:
                raise ContractError(f"negative landmark index {i}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def for_model(cls, model, kind: str = "inter_ocular") -> "NormalizationSpec":
        if kind == "inter_ocular":
            return cls(kind, tuple(model.outer_eyes))
        if kind == "inter_pupil":
            return cls(kind, tuple(model.pupils))
        return cls(kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "indices": [list(g) if isinstance(g, tuple) else g for g in self.indices]}


def normalizer(truth, spec: NormalizationSpec) -> float:
    truth = np.asarray(truth, dtype=float)
    L = truth.shape[0]
    if spec.kind == "box":
        w, h = truth.max(axis=0) - truth.min(axis=0)
        d = math.sqrt(max(w, 0.0) * max(h, 0.0))
    else:
        flat = np.concatenate([np.atleast_1d(g) for g in spec.indices]).astype(int)
        if flat.max() >= L:
            raise ContractError(f"normalisation index {flat.max()} out of range for {L} landmarks")
        if spec.kind == "inter_ocular":
            a, b = truth[spec.indices[0]], truth[spec.indices[1]]
        else:
            a = truth[list(spec.indices[0])].mean(axis=0)
            b = truth[list(spec.indices[1])].mean(axis=0)
        d = float(np.linalg.norm(a - b))
    if not d > 0:
        raise DegenerateInputError(f"normaliser is {d}; truth shape is degenerate for {spec.kind}")
    return d


def per_image_nme(pred, truth, norm: NormalizationSpec) -> float:
    """``100 * mean_l |pred_l - truth_l| / d`` in percent."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} must both be (L, 2)")
    d = normalizer(truth, norm)
    return float(100.0 * np.linalg.norm(pred - truth, axis=1).mean() / d)


@dataclass(frozen=True)
class CEDCurve:
    """Sorted per-image NMEs; ``fraction(e)`` is the share with NME <= e."""

    errors: np.ndarray

    def __post_init__(self):
        e = np.sort(np.asarray(self.errors, dtype=float).reshape(-1))
        if np.any(~np.isfinite(e)):
            raise ContractError("CED errors must be finite")
        e.setflags(write=False)
        object.__setattr__(self, "errors", e)

    @property
    def n(self) -> int:
        return int(self.errors.size)

    def fraction(self, e: float) -> float:
        if self.n == 0:
            raise EmptyInputError("empty CED curve")
        return float(np.searchsorted(self.errors, e, side="right")) / self.n

    def to_csv(self) -> str:
        """Step points ``error,fraction`` at every distinct NME."""
        if self.n == 0:
            return "error,fraction\n"
        vals, counts = np.unique(self.errors, return_counts=True)
        cum = np.cumsum(counts) / self.n
        rows = ["error,fraction"] + [f"{v!r},{c!r}" for v, c in zip(vals.tolist(), cum.tolist())]
        return "\n".join(rows) + "\n"


def _nonempty(ced: CEDCurve) -> CEDCurve:
    if not isinstance(ced, CEDCurve):
        ced = CEDCurve(ced)
    if ced.n == 0:
        raise EmptyInputError("metric needs at least one image")
    return ced


def fr(ced, threshold: float) -> float:
    ced = _nonempty(ced)
    if not threshold > 0:
        raise ContractError("threshold must be > 0")
    above = ced.n - int(np.searchsorted(ced.errors, threshold, side="right"))
    return 100.0 * above / ced.n


def auc(ced, threshold: float) -> float:
    """Area under the empirical CED on ``[0, threshold]``, normalised to 100.

    The CED is piecewise constant between sorted errors, so the integral is
    a finite sum of rectangles.
    """
    ced = _nonempty(ced)
    if not threshold > 0:
        raise ContractError("threshold must be > 0")
    e = np.clip(ced.errors, 0.0, threshold)
    edges = np.concatenate([e, [threshold]])
    widths = np.diff(edges)
    heights = np.arange(1, ced.n + 1) / ced.n
    return 100.0 * float(np.dot(widths, heights)) / threshold


def npe90(ced) -> float:
    ced = _nonempty(ced)
    k = -(-9 * ced.n // 10) - 1  # ceil(0.9 N) - 1 in exact integer arithmetic
    return float(ced.errors[k])


@dataclass
class MetricsReport:
    nme: float
    auc: dict[float, float]
    fr: dict[float, float]
    npe90: float
    count: int
    thresholds: tuple[float, ...]
    norm: str
    subsets: dict[str, "MetricsReport"] = field(default_factory=dict)
    pose: dict[str, float] | None = None

    def to_dict(self) -> dict:
        d = {
            "count": self.count,
            "norm": self.norm,
            "nme": self.nme,
            "auc": {repr(float(k)): v for k, v in self.auc.items()},
            "fr": {repr(float(k)): v for k, v in self.fr.items()},
            "npe90": self.npe90,
            "thresholds": [float(t) for t in self.thresholds],
        }
        if self.pose is not None:
            d["pose_mae"] = self.pose
        if self.subsets:
            d["subsets"] = {k: v.to_dict() for k, v in sorted(self.subsets.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def report_from_errors(nmes, thresholds=(10.0,), norm: str = "inter_ocular", subsets=None) -> MetricsReport:
    """Aggregate per-image NMEs, optionally broken down by a subset tag per image."""
    nmes = np.asarray(nmes, dtype=float).reshape(-1)
    ced = _nonempty(CEDCurve(nmes))
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds:
        raise ContractError("at least one threshold is required")
    rep = MetricsReport(
        nme=float(nmes.mean()),
        auc={t: auc(ced, t) for t in thresholds},
        fr={t: fr(ced, t) for t in thresholds},
        npe90=npe90(ced),
        count=int(nmes.size),
        thresholds=thresholds,
        norm=norm,
    )
    if subsets is not None:
        tags = list(subsets)
        if len(tags) != nmes.size:
            raise ShapeError(f"{len(tags)} subset tags for {nmes.size} images")
        for tag in sorted({t for t in tags if t is not None}):
            mask = np.array([t == tag for t in tags])
            rep.subsets[tag] = report_from_errors(nmes[mask], thresholds, norm)
    return rep


# --------------------------------------------------------------------- files


def read_landmark_file(path) -> list[dict]:
    """Parse a JSON Lines file of ``{"id", "landmarks", "subset"?, "pose"?}`` records."""
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "id" not in rec or "landmarks" not in rec:
                raise FormatError(f"{path}:{lineno}: record needs 'id' and 'landmarks'")
            try:
                pts = np.asarray(rec["landmarks"], dtype=float)
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{lineno}: landmarks are not numeric") from None
            if pts.ndim != 2 or pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
                raise FormatError(f"{path}:{lineno}: landmarks must be a finite [[x, y], ...] list")
            pose = rec.get("pose")
            if pose is not None:
                pose = np.asarray(pose, dtype=float)
                if pose.shape != (6,):
                    raise FormatError(f"{path}:{lineno}: pose must have 6 numbers")
            rid = str(rec["id"])
            if rid in seen:
                raise FormatError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            records.append({"id": rid, "landmarks": pts, "subset": rec.get("subset"), "pose": pose})
    return records


def write_landmark_file(path, records) -> None:
    atomic_write_text(path, format_landmark_records(records))


def format_landmark_records(records) -> str:
    lines = []
    for r in records:
        rec = {"id": r["id"], "landmarks": np.asarray(r["landmarks"], dtype=float).tolist()}
        if r.get("subset") is not None:
            rec["subset"] = r["subset"]
        if r.get("pose") is not None:
            rec["pose"] = np.asarray(r["pose"], dtype=float).tolist()
        lines.append(json.dumps(rec))
    return "".join(line + "\n" for line in lines)


def evaluate_records(pred: list[dict], truth: list[dict], norm: NormalizationSpec, thresholds=(10.0,)):
    """Match records by id and score them; returns ``(report, ced)``."""
    pmap = {r["id"]: r for r in pred}
    tids = [r["id"] for r in truth]
    missing = sorted(set(tids) - set(pmap))
    extra = sorted(set(pmap) - set(tids))
    if missing or extra:
        raise FormatError(f"prediction/truth ids differ: missing {missing[:20]}, extra {extra[:20]}")
    if not truth:
        raise EmptyInputError("no records to evaluate")
    nmes, tags, pp, tp = [], [], [], []
    for t in truth:
        p = pmap[t["id"]]
        try:
            nmes.append(per_image_nme(p["landmarks"], t["landmarks"], norm))
        except ShapeError as exc:
            raise ShapeError(f"id {t['id']!r}: {exc}") from None
        tags.append(t.get("subset"))
        if p.get("pose") is not None and t.get("pose") is not None:
            pp.append(p["pose"])
            tp.append(t["pose"])
    has_tags = any(tag is not None for tag in tags)
    rep = report_from_errors(nmes, thresholds, norm.kind, tags if has_tags else None)
    if pp and len(pp) == len(truth):
        rep.pose = pose_mae(np.array(pp), np.array(tp))
    return rep, CEDCurve(np.array(nmes))


def evaluate_files(pred_file, truth_file, norm: NormalizationSpec, thresholds=(10.0,)):
    return evaluate_records(read_landmark_file(pred_file), read_landmark_file(truth_file), norm, thresholds)
