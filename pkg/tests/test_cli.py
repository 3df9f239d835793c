import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gatcascade.cli import EXIT_ERROR, EXIT_NONFINITE, build_parser, main
from gatcascade.geometry import CameraIntrinsics, HeadPose, canonical_face_model, project, save_face_model
from gatcascade.metrics import write_landmark_file
from gatcascade.synthdata import read_dataset

TINY_RUN = {
    "version": 1,
    "seed": 2,
    "train_count": 8,
    "test_count": 4,
    "data": {"image_side": 64, "feature_side": 16, "margin": 2.0},
    "cascade": {
        "dim": 8, "visual_hidden": 8, "posenc_hidden": 8, "windows": [4.0, 2.0],
        "crop_side": 3, "image_side": 64, "feature_side": 16,
    },
    "train": {"epochs": 1, "batch_size": 4},
}


def write_config(path, **overrides):
    d = json.loads(json.dumps(TINY_RUN))
    for section, values in overrides.items():
        d[section].update(values)
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.json")
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "model.ckpt")]) == 0
    return root


def files_of(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


class TestHelp:
    COMMANDS = ["gen-data", "train", "eval", "fit-pose", "metrics", "dump-attention", "default-config"]

    @pytest.mark.parametrize("cmd", COMMANDS)
    def test_every_flag_documented(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        sub = build_parser()._subparsers._group_actions[0].choices[cmd]
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text
            assert action.help, f"{cmd} {action.option_strings} has no help"

    def test_commands_listed(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        text = capsys.readouterr().out
        assert all(c in text for c in self.COMMANDS)

    def test_missing_command_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2


class TestPipeline:
    def test_gen_data_output(self, run):
        assert (run / "data" / "train" / "manifest.json").exists()
        assert len(read_dataset(run / "data" / "train")) == 8
        assert len(read_dataset(run / "data" / "test")) == 4

    def test_gen_data_prints_count_and_seed(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
        out = capsys.readouterr().out
        assert "8 train" in out and "4 test" in out and "seed 2" in out

    def test_seed_env_override(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("SPIGA_SEED", "9")
        cfg = write_config(tmp_path / "c.json")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
        assert "seed 9" in capsys.readouterr().out

    def test_train_writes_checkpoint_and_log(self, run):
        assert (run / "model.ckpt").stat().st_size > 0
        lines = (run / "model.ckpt.log.jsonl").read_text().splitlines()
        assert lines and all(np.isfinite(json.loads(line)["loss"]) for line in lines)

    def test_eval_report(self, run, capsys):
        assert main(["eval", "--ckpt", str(run / "model.ckpt"), "--data", str(run / "data")]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["count"] == 4 and np.isfinite(report["nme"])

    def test_steps_table_has_k_rows(self, run, capsys):
        assert main(["eval", "--ckpt", str(run / "model.ckpt"), "--data", str(run / "data"), "--steps-table"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split() == ["step", "NME", "AUC10", "FR10"]
        body = [l.split() for l in lines[1:]]
        assert [r[0] for r in body] == ["1", "2"]

    def test_eval_pred_out_scores_like_report(self, run, tmp_path, capsys):
        pred = tmp_path / "pred.jsonl"
        assert main(["eval", "--ckpt", str(run / "model.ckpt"), "--data", str(run / "data"), "--pred-out", str(pred)]) == 0
        report = json.loads(capsys.readouterr().out)
        ds = read_dataset(run / "data" / "test")
        truth = tmp_path / "truth.jsonl"
        write_landmark_file(truth, [{"id": s.id, "landmarks": s.truth} for s in ds.samples])
        assert main(["metrics", "--pred", str(pred), "--truth", str(truth), "--norm", "inter_ocular"]) == 0
        again = json.loads(capsys.readouterr().out)
        assert again["nme"] == pytest.approx(report["nme"], rel=1e-12)

    def test_dump_attention(self, run, tmp_path, capsys):
        ds = read_dataset(run / "data" / "test")
        sid = ds.samples[1].id
        out = tmp_path / "att"
        assert main(["dump-attention", "--ckpt", str(run / "model.ckpt"), "--data", str(run / "data"), "--id", sid, "--out", str(out)]) == 0
        names = json.loads(capsys.readouterr().out)["files"]
        assert sorted(names) == sorted(
            [f"attention_step{t}_layer{s}.csv" for t in (1, 2) for s in (1, 2)] + ["trajectory.csv"]
        )
        A = np.loadtxt(out / "attention_step1_layer1.csv", delimiter=",")
        assert A.shape == (68, 68)
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.diag(A) == 0)
        traj = (out / "trajectory.csv").read_text().splitlines()
        assert traj[0] == "step,landmark,x,y" and len(traj) == 1 + 3 * 68

    def test_dump_attention_unknown_id(self, run, tmp_path, capsys):
        code = main(["dump-attention", "--ckpt", str(run / "model.ckpt"), "--data", str(run / "data"), "--id", "nope", "--out", str(tmp_path / "a")])
        assert code == EXIT_ERROR and "nope" in capsys.readouterr().err
        assert not (tmp_path / "a").exists()

    def test_idempotent(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        outs = []
        for name in ("a", "b"):
            d = tmp_path / name
            assert main(["gen-data", "--config", str(cfg), "--out", str(d / "data")]) == 0
            assert main(["train", "--config", str(cfg), "--data", str(d / "data"), "--out", str(d / "m.ckpt")]) == 0
            assert main(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data"), "--out", str(d / "report.json")]) == 0
            outs.append(files_of(d))
        capsys.readouterr()
        assert outs[0].keys() == outs[1].keys() and outs[0] == outs[1]


class TestMetricsCommand:
    @pytest.fixture
    def truth_file(self, tmp_path, rng):
        path = tmp_path / "truth.jsonl"
        write_landmark_file(path, [{"id": f"s{i}", "landmarks": rng.uniform(0, 256, size=(68, 2))} for i in range(5)])
        return path

    def test_identical_files_score_zero(self, truth_file, tmp_path, capsys):
        ced = tmp_path / "ced.csv"
        assert main(["metrics", "--pred", str(truth_file), "--truth", str(truth_file), "--norm", "box", "--ced-out", str(ced)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["nme"] == 0.0 and report["fr"]["10.0"] == 0.0 and report["auc"]["10.0"] == 100.0
        assert ced.read_text().startswith("error,fraction")

    @pytest.mark.parametrize("norm, extra", [("inter_ocular", ["--indices", "36,45"]), ("inter_pupil", ["--indices", "36,39;42,45"])])
    def test_explicit_indices(self, truth_file, norm, extra, capsys):
        assert main(["metrics", "--pred", str(truth_file), "--truth", str(truth_file), "--norm", norm] + extra) == 0
        assert json.loads(capsys.readouterr().out)["nme"] == 0.0

    def test_missing_file(self, truth_file, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = main(["metrics", "--pred", str(tmp_path / "none.jsonl"), "--truth", str(truth_file), "--norm", "box", "--out", str(out)])
        assert code == EXIT_ERROR
        err = capsys.readouterr().err
        assert err.startswith("error:") and "none.jsonl" in err
        assert not out.exists()

    def test_missing_id(self, truth_file, tmp_path, capsys):
        lines = truth_file.read_text().splitlines()
        pred = tmp_path / "pred.jsonl"
        pred.write_text("\n".join(lines[:-1]) + "\n")
        assert main(["metrics", "--pred", str(pred), "--truth", str(truth_file), "--norm", "box"]) == EXIT_ERROR
        assert "s4" in capsys.readouterr().err

    def test_bad_norm_is_usage_error(self, truth_file):
        with pytest.raises(SystemExit) as exc:
            main(["metrics", "--pred", str(truth_file), "--truth", str(truth_file), "--norm", "cheeks"])
        assert exc.value.code == 2


class TestFitPose:
    def test_recovers_poses(self, tmp_path, capsys):
        model = canonical_face_model()
        model_path = tmp_path / "model.json"
        save_face_model(model, model_path)
        cam = CameraIntrinsics.default(256)
        poses = [HeadPose(0.17, -0.09, 0.05, 0.02, -0.01, 4.0), HeadPose(-0.35, 0.14, -0.21, -0.05, 0.03, 3.8)]
        lm = tmp_path / "lm.jsonl"
        write_landmark_file(lm, [{"id": f"p{i}", "landmarks": project(model, p, cam)} for i, p in enumerate(poses)])
        assert main(["fit-pose", "--model3d", str(model_path), "--landmarks", str(lm)]) == 0
        captured = capsys.readouterr()
        rows = [json.loads(l) for l in captured.out.splitlines()]
        assert [r["id"] for r in rows] == ["p0", "p1"]
        for r, p in zip(rows, poses):
            np.testing.assert_allclose(r["pose"], p.as_array(), atol=1e-6)
            assert r["rmse"] < 1e-8 and r["status"] == "converged"
        assert "reprojection RMSE" in captured.err

    def test_landmark_count_mismatch(self, tmp_path, capsys):
        model_path = tmp_path / "model.json"
        save_face_model(canonical_face_model(), model_path)
        lm = tmp_path / "lm.jsonl"
        write_landmark_file(lm, [{"id": "x", "landmarks": np.zeros((5, 2))}])
        out = tmp_path / "poses.jsonl"
        code = main(["fit-pose", "--model3d", str(model_path), "--landmarks", str(lm), "--out", str(out)])
        assert code == EXIT_ERROR and "5 landmarks" in capsys.readouterr().err
        assert not out.exists()


class TestErrors:
    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**TINY_RUN, "extra": 1}))
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == EXIT_ERROR
        assert "extra" in capsys.readouterr().err
        assert not (tmp_path / "d").exists()

    def test_wrong_version(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**TINY_RUN, "version": 7}))
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == EXIT_ERROR
        assert "version" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        code = main(["train", "--config", str(cfg), "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m.ckpt")])
        assert code == EXIT_ERROR and capsys.readouterr().err.startswith("error:")
        assert not (tmp_path / "m.ckpt").exists()

    def test_corrupt_checkpoint(self, run, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["eval", "--ckpt", str(bad), "--data", str(run / "data")]) == EXIT_ERROR
        assert capsys.readouterr().err.startswith("error:")

    def test_nonfinite_training_exit_code(self, run, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", train={"lr": 1e300})
        ck = tmp_path / "m.ckpt"
        code = main(["train", "--config", str(cfg), "--data", str(run / "data"), "--out", str(ck)])
        assert code == EXIT_NONFINITE
        assert "non-finite" in capsys.readouterr().err
        assert not ck.exists()


class TestDefaultConfig:
    def test_stdout_and_file_agree(self, tmp_path, capsys):
        assert main(["default-config"]) == 0
        text = capsys.readouterr().out
        assert main(["default-config", "--out", str(tmp_path / "c.json")]) == 0
        assert (tmp_path / "c.json").read_text() == text
        assert json.loads(text)["version"] == 1

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "gatcascade", "default-config"], capture_output=True, text=True, check=True)
        assert json.loads(res.stdout)["train_count"] == 2000
