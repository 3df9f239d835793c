"""Command-line entry point: ``gatcascade <command> ...``.

Data goes to stdout or to files, logs go to stderr. Every output file is
written to a temporary sibling first and renamed into place, so a failed
command never leaves a partial file behind.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, default_config_json, load_run_config
from .errors import GatCascadeError, TrainingError
from .fileio import atomic_write_text
from .geometry import CameraIntrinsics, fit_pose, load_face_model
from .metrics import NORM_KINDS, NormalizationSpec, evaluate_files, format_landmark_records, read_landmark_file
from .pipeline import final_report, generate_splits, predict, steps_table, train_run
from .synthdata import read_dataset, write_dataset

log = logging.getLogger("gatcascade")

EXIT_USAGE = 2
EXIT_ERROR = 1
EXIT_NONFINITE = 3


def _split_dir(data: str, split: str) -> Path:
    root = Path(data)
    return root / split if (root / split / "manifest.json").exists() else root


def _run_config_of(ck) -> RunConfig:
    return RunConfig.from_dict(ck.meta["run_config"], env={})


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    train_ds, test_ds = generate_splits(cfg)
    out = Path(args.out)
    write_dataset(out / "train", train_ds)
    write_dataset(out / "test", test_ds)
    atomic_write_text(out / "run_config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train_ds)} train and {len(test_ds)} test samples to {out} (seed {cfg.seed})")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    train_ds = read_dataset(_split_dir(args.data, "train"))
    log.info("training on %d samples for %d epochs (seed %d)", len(train_ds), cfg.train.epochs, cfg.seed)
    buf = io.StringIO()
    log_path = args.log or str(args.out) + ".log.jsonl"
    try:
        ck, history = train_run(cfg, train_ds, log_stream=buf)
    except TrainingError as exc:
        atomic_write_text(log_path, buf.getvalue())
        log.error("training aborted: %s", exc)
        return EXIT_NONFINITE
    final = history[-1]["loss"] if history else float("nan")
    atomic_write_text(log_path, buf.getvalue())
    if not math.isfinite(final):
        log.error("final loss is not finite (%r); checkpoint not written", final)
        return EXIT_NONFINITE
    save_checkpoint(args.out, ck)
    print(json.dumps({"checkpoint": str(args.out), "log": log_path, "final_loss": final, "epochs": len(history)}))
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    cfg = _run_config_of(ck)
    ds = read_dataset(_split_dir(args.data, "test"))
    norm = NormalizationSpec.for_model(ds.model, args.norm or cfg.eval.norm)
    thresholds = tuple(args.threshold) if args.threshold else cfg.eval.thresholds
    traj = predict(ck, ds).trajectory
    report = final_report(traj, ds, norm, thresholds)
    if args.pred_out:
        recs = [{"id": s.id, "landmarks": traj[-1, i]} for i, s in enumerate(ds.samples)]
        atomic_write_text(args.pred_out, format_landmark_records(recs))
    if args.steps_table:
        rows = steps_table(traj, ds.truths(), norm, thresholds[0])
        text = format_steps_table(rows, thresholds[0])
    else:
        text = report.to_json()
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def format_steps_table(rows: list[dict], threshold: float) -> str:
    t = f"{threshold:g}"
    lines = [f"{'step':>4}  {'NME':>8}  {'AUC' + t:>8}  {'FR' + t:>8}"]
    for r in rows:
        lines.append(f"{r['step']:>4}  {r['nme']:8.4f}  {r['auc']:8.4f}  {r['fr']:8.4f}")
    return "\n".join(lines) + "\n"


def cmd_fit_pose(args) -> int:
    model = load_face_model(args.model3d)
    cam = CameraIntrinsics.default(args.image_side)
    records = read_landmark_file(args.landmarks)
    out, rmses = [], []
    for r in records:
        if r["landmarks"].shape[0] != model.num_points:
            raise GatCascadeError(f"id {r['id']!r}: {r['landmarks'].shape[0]} landmarks, model has {model.num_points}")
        fit = fit_pose(model, r["landmarks"], cam)
        rmses.append(fit.rmse)
        out.append(
            json.dumps(
                {
                    "id": r["id"],
                    "pose": fit.pose.as_array().tolist(),
                    "rmse": fit.rmse,
                    "iterations": fit.iterations,
                    "status": fit.status,
                }
            )
        )
    text = "".join(line + "\n" for line in out)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if rmses:
        log.info("fitted %d poses; reprojection RMSE mean %.6g px, max %.6g px", len(rmses), float(np.mean(rmses)), max(rmses))
    return 0


def _norm_from_args(args) -> NormalizationSpec:
    if args.norm == "box":
        return NormalizationSpec("box")
    if args.indices:
        groups = [tuple(int(i) for i in g.split(",")) for g in args.indices.split(";")]
        if args.norm == "inter_ocular":
            if len(groups) == 1 and len(groups[0]) == 2:
                return NormalizationSpec("inter_ocular", groups[0])
            return NormalizationSpec("inter_ocular", tuple(g[0] for g in groups))
        return NormalizationSpec("inter_pupil", tuple(groups))
    if args.model3d:
        return NormalizationSpec.for_model(load_face_model(args.model3d), args.norm)
    from .geometry import canonical_face_model

    return NormalizationSpec.for_model(canonical_face_model(), args.norm)


def cmd_metrics(args) -> int:
    norm = _norm_from_args(args)
    thresholds = tuple(args.threshold) if args.threshold else (10.0,)
    report, ced = evaluate_files(args.pred, args.truth, norm, thresholds)
    if args.ced_out:
        atomic_write_text(args.ced_out, ced.to_csv())
    text = report.to_json()
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_dump_attention(args) -> int:
    ck = load_checkpoint(args.ckpt)
    ds = read_dataset(_split_dir(args.data, "test"))
    ids = [s.id for s in ds.samples]
    if args.id not in ids:
        raise GatCascadeError(f"sample {args.id!r} not in {args.data}")
    i = ids.index(args.id)
    pred = predict(ck, ds, idx=[i], keep_attention=True)
    out = Path(args.out)
    written = []
    for t, step in enumerate(pred.attentions, start=1):
        for s, A in enumerate(step, start=1):
            buf = io.StringIO()
            np.savetxt(buf, A[0], delimiter=",", fmt="%.17g")
            name = f"attention_step{t}_layer{s}.csv"
            atomic_write_text(out / name, buf.getvalue())
            written.append(name)
    rows = ["step,landmark,x,y"]
    for t, shape in enumerate(pred.trajectory[:, 0]):
        rows += [f"{t},{l},{x!r},{y!r}" for l, (x, y) in enumerate(shape.tolist())]
    atomic_write_text(out / "trajectory.csv", "\n".join(rows) + "\n")
    written.append("trajectory.csv")
    print(json.dumps({"id": args.id, "files": written}))
    return 0


def cmd_default_config(args) -> int:
    text = default_config_json()
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gatcascade", description="Graph-attention cascade for face landmark regression.")
    p.add_argument("-v", "--verbose", action="store_true", help="log debug messages to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic train/test splits")
    g.add_argument("--config", required=True, help="run config JSON")
    g.add_argument("--out", required=True, help="output directory (gets train/ and test/)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a cascade and write a checkpoint")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="metrics log path (default: <out>.log.jsonl)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the test split")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="dataset directory from gen-data")
    e.add_argument("--steps-table", action="store_true", help="print per-step NME/AUC/FR rows instead of the report")
    e.add_argument("--norm", choices=NORM_KINDS, help="override the configured normalisation")
    e.add_argument("--threshold", type=float, action="append", help="AUC/FR threshold in percent (repeatable)")
    e.add_argument("--out", help="also write the printed output here")
    e.add_argument("--pred-out", help="write final predictions as JSON Lines")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fit-pose", help="fit 6-DoF head poses to landmark files")
    f.add_argument("--model3d", required=True, help="rigid 3D model JSON")
    f.add_argument("--landmarks", required=True, help="JSON Lines of {id, landmarks}")
    f.add_argument("--image-side", type=int, default=256, help="image side of the virtual camera (default 256)")
    f.add_argument("--out", help="output JSON Lines (default: stdout)")
    f.set_defaults(func=cmd_fit_pose)

    m = sub.add_parser("metrics", help="score prediction files against truth files")
    m.add_argument("--pred", required=True, help="prediction JSON Lines")
    m.add_argument("--truth", required=True, help="truth JSON Lines")
    m.add_argument("--norm", required=True, choices=NORM_KINDS, help="normalisation kind")
    m.add_argument("--indices", help="normaliser indices: 'a,b' for eye corners or 'a,b,..;c,d,..' for pupil groups")
    m.add_argument("--model3d", help="take normaliser indices from this 3D model (default: bundled 68-point model)")
    m.add_argument("--threshold", type=float, action="append", help="AUC/FR threshold in percent (repeatable)")
    m.add_argument("--ced-out", help="write the CED curve as CSV")
    m.add_argument("--out", help="also write the report here")
    m.set_defaults(func=cmd_metrics)

    d = sub.add_parser("dump-attention", help="write attention matrices and trajectory of one sample")
    d.add_argument("--ckpt", required=True, help="checkpoint path")
    d.add_argument("--data", required=True, help="dataset directory")
    d.add_argument("--id", required=True, help="sample id")
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=cmd_dump_attention)

    c = sub.add_parser("default-config", help="print the default run config")
    c.add_argument("--out", help="write to this file instead of stdout")
    c.set_defaults(func=cmd_default_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # own handler on the package logger, bound to the current stderr
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    saved = log.level, log.propagate
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.propagate = False
    try:
        return args.func(args)
    except GatCascadeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_ERROR
    except KeyError as exc:
        print(f"error: missing field {exc}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        log.removeHandler(handler)
        log.setLevel(saved[0])
        log.propagate = saved[1]


if __name__ == "__main__":
    sys.exit(main())
