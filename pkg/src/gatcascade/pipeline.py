"""End-to-end helpers shared by the command line, the demos and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import backbone_forward, init_backbone
from .checkpoint import Checkpoint
from .config import RunConfig
from .geometry import canonical_face_model
from .metrics import CEDCurve, NormalizationSpec, auc, fr, per_image_nme, report_from_errors
from .regressor import init_cascade, run_cascade
from .synthdata import Dataset, generate_dataset
from .training import train


def generate_splits(cfg: RunConfig, model=None) -> tuple[Dataset, Dataset]:
    model = model if model is not None else canonical_face_model()
    return generate_dataset(model, cfg.split("train")), generate_dataset(model, cfg.split("test"))


def train_run(cfg: RunConfig, train_ds: Dataset, log_stream=None, eval_fn=None) -> tuple[Checkpoint, list[dict]]:
    """Initialise from ``cfg.seed``, train, and package the result as a checkpoint."""
    params = init_cascade(cfg.cascade, cfg.seed)
    backbone = None
    if cfg.backbone is not None:
        backbone = (cfg.backbone, init_backbone(cfg.backbone, cfg.seed + 1))
    result = train(train_ds, cfg.cascade, params, cfg.train, log_stream=log_stream, eval_fn=eval_fn, backbone=backbone)
    ck = Checkpoint(
        cfg.cascade,
        result.params,
        cfg.backbone,
        None if backbone is None else backbone[1],
        meta={"run_config": cfg.to_dict(), "adam_steps": result.adam.step},
    )
    return ck, result.log


def feature_maps_for(ck: Checkpoint, dataset: Dataset, idx) -> np.ndarray:
    """Synthetic maps, or the backbone's last-stage maps when the checkpoint has one."""
    if ck.backbone is None:
        return dataset.feature_maps(idx)
    outs = backbone_forward(dataset.images(idx), ck.backbone, ck.backbone_cfg)
    return outs[-1].features.data


@dataclass
class Prediction:
    trajectory: np.ndarray
    attentions: list | None = None


def predict(ck: Checkpoint, dataset: Dataset, idx=None, batch_size: int = 50, keep_attention: bool = False) -> Prediction:
    """Trajectories ``(K+1, N, L, 2)`` in image pixels; no gradient tape is recorded."""
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx, dtype=int)
    chunks, atts = [], []
    for start in range(0, len(idx), batch_size):
        sel = idx[start : start + batch_size]
        out = run_cascade(ck.cascade, ck.cascade_cfg, feature_maps_for(ck, dataset, sel), dataset.init_shapes(sel))
        chunks.append(np.stack(out.arrays()))
        if keep_attention:
            atts.append([[A.data for A in step] for step in out.attentions])
    traj = np.concatenate(chunks, axis=1) if chunks else np.zeros((ck.cascade_cfg.steps + 1, 0, ck.cascade_cfg.num_landmarks, 2))
    if keep_attention:
        merged = [[np.concatenate([a[t][s] for a in atts]) for s in range(len(atts[0][t]))] for t in range(len(atts[0]))]
        return Prediction(traj, merged)
    return Prediction(traj)


def step_nmes(trajectory: np.ndarray, truths: np.ndarray, norm: NormalizationSpec) -> np.ndarray:
    """Per-image NME for every shape in the trajectory: ``(K+1, N)``."""
    return np.array([[per_image_nme(x, t, norm) for x, t in zip(shapes, truths)] for shapes in trajectory])


def steps_table(trajectory: np.ndarray, truths: np.ndarray, norm: NormalizationSpec, threshold: float = 10.0) -> list[dict]:
    """One row per refinement step ``t = 1..K``: mean NME, AUC and FR at ``threshold``."""
    nmes = step_nmes(trajectory, truths, norm)
    rows = []
    for t in range(1, nmes.shape[0]):
        ced = CEDCurve(nmes[t])
        rows.append({"step": t, "nme": float(nmes[t].mean()), "auc": auc(ced, threshold), "fr": fr(ced, threshold)})
    return rows


def final_report(trajectory: np.ndarray, dataset: Dataset, norm: NormalizationSpec, thresholds):
    nmes = step_nmes(trajectory[-1:], dataset.truths(), norm)[0]
    tags = [s.subset for s in dataset.samples]
    return report_from_errors(nmes, thresholds, norm.kind, tags if any(t is not None for t in tags) else None)
