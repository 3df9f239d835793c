import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatcascade.errors import BehindCameraError, ContractError, DegenerateInputError, EmptyInputError, ShapeError
from gatcascade.geometry import (
    CameraIntrinsics,
    HeadPose,
    RigidFaceModel,
    fit_pose,
    init_shape,
    load_face_model,
    pose_mae,
    project,
    projection_jacobian,
    rotation_matrix,
    save_face_model,
    wrap_angle,
)


def random_pose(rng, tz=(3.6, 4.4)):
    yaw, pitch, roll = np.radians(rng.uniform([-30, -20, -20], [30, 20, 20]))
    tx, ty = rng.uniform(-0.1, 0.1, size=2)
    return HeadPose(yaw, pitch, roll, tx, ty, rng.uniform(*tz))


@pytest.fixture
def cam100():
    return CameraIntrinsics(focal=100.0, cx=128.0, cy=128.0, side=256)


class TestProject:
    def test_point_on_optical_axis(self, cam100):
        pts = np.array([[0.0, 0.0, 0.0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
        x = project(pts, HeadPose(tz=5.0), cam100)
        np.testing.assert_allclose(x[0], [128, 128])

    def test_unit_x_offset(self, cam100):
        x = project(np.array([[1.0, 0, 0]]), HeadPose(tz=5.0), cam100)
        np.testing.assert_allclose(x[0], [148, 128])

    def test_roll_pi_rotates_about_principal_point(self, face, cam):
        base = project(face, HeadPose(tz=4.0), cam)
        rolled = project(face, HeadPose(roll=math.pi, tz=4.0), cam)
        pp = np.array([cam.cx, cam.cy])
        np.testing.assert_allclose(rolled - pp, -(base - pp), atol=1e-9)

    def test_behind_camera(self, face, cam):
        with pytest.raises(BehindCameraError):
            project(face, HeadPose(yaw=math.pi, tz=0.01), cam)

    def test_rotation_order(self):
        y, p, r = 0.3, -0.2, 0.7
        Rx = rotation_matrix(0, p, 0)
        Ry = rotation_matrix(y, 0, 0)
        Rz = rotation_matrix(0, 0, r)
        np.testing.assert_allclose(rotation_matrix(y, p, r), Rz @ Ry @ Rx, atol=1e-15)

    def test_rotation_is_orthonormal(self, rng):
        for _ in range(20):
            R = rotation_matrix(*rng.uniform(-np.pi, np.pi, 3))
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) == pytest.approx(1.0)

    def test_init_shape_is_projection(self, face, cam, rng):
        p = random_pose(rng)
        np.testing.assert_array_equal(init_shape(face, p, cam), project(face, p, cam))

    def test_jacobian_matches_central_differences(self, face, cam, rng):
        for _ in range(20):
            p = random_pose(rng).as_array()
            J = projection_jacobian(face, p, cam)
            h = 1e-6
            num = np.empty_like(J)
            for k in range(6):
                e = np.zeros(6)
                e[k] = h
                num[:, :, k] = (project(face, p + e, cam) - project(face, p - e, cam)) / (2 * h)
            rel = np.abs(J - num) / np.maximum(1.0, np.abs(J))
            assert rel.max() < 1e-6


class TestTypes:
    def test_pose_requires_positive_depth(self):
        with pytest.raises(ContractError):
            HeadPose(tz=0.0)

    def test_angles_wrapped(self):
        p = HeadPose(yaw=3 * math.pi / 2, tz=1.0)
        assert p.yaw == pytest.approx(-math.pi / 2)
        assert HeadPose(roll=-math.pi, tz=1).roll == math.pi

    @given(st.floats(-100, 100, allow_nan=False))
    def test_wrap_angle_range(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)

    def test_from_array_size(self):
        with pytest.raises(ShapeError):
            HeadPose.from_array([0, 0, 0])

    def test_camera_invariants(self):
        with pytest.raises(ContractError):
            CameraIntrinsics(focal=-1, cx=1, cy=1, side=4)
        with pytest.raises(ContractError):
            CameraIntrinsics(focal=1, cx=10, cy=1, side=4)

    def test_default_camera(self):
        c = CameraIntrinsics.default(256)
        assert (c.focal, c.cx, c.cy) == (384.0, 128.0, 128.0)

    def test_coplanar_model_rejected(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
        with pytest.raises(DegenerateInputError):
            RigidFaceModel(pts, (0, 1), ((2,), (3,)))

    def test_too_few_points(self):
        with pytest.raises(DegenerateInputError):
            RigidFaceModel(np.eye(3), (0, 1), ((1,), (2,)))

    def test_semantic_indices_checked(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        with pytest.raises(ContractError):
            RigidFaceModel(pts, (0, 0), ((2,), (3,)))
        with pytest.raises(ContractError):
            RigidFaceModel(pts, (0, 9), ((2,), (3,)))


class TestCanonicalModel:
    def test_shape_and_eye_distance(self, face):
        assert face.num_points == 68
        i, j = face.outer_eyes
        assert np.linalg.norm(face.points[i] - face.points[j]) == pytest.approx(1.0)

    def test_mirror_symmetric(self, face):
        mirrored = face.points[list(face.flip)] * [-1, 1, 1]
        np.testing.assert_allclose(mirrored, face.points, atol=1e-12)

    def test_json_round_trip(self, face, tmp_path):
        path = tmp_path / "model.json"
        save_face_model(face, path)
        back = load_face_model(path)
        np.testing.assert_array_equal(back.points, face.points)
        assert back.outer_eyes == face.outer_eyes
        assert back.pupils == face.pupils
        doc = json.loads(path.read_text())
        assert set(doc) >= {"points", "outer_eyes", "pupils"}


class TestFitPose:
    def test_exact_round_trip(self, face, cam, rng):
        for _ in range(50):
            p = random_pose(rng)
            fit = fit_pose(face, project(face, p, cam), cam)
            assert fit.converged
            assert np.abs(fit.pose.as_array() - p.as_array()).max() < 1e-6
            assert fit.rmse < 1e-8

    def test_identity_frontal(self, face, cam):
        fit = fit_pose(face, project(face, HeadPose(tz=4.0), cam), cam)
        np.testing.assert_allclose(fit.pose.as_array()[:3], 0.0, atol=1e-6)

    def test_noisy_rmse_within_twice_noise(self, face, cam, rng):
        sigma = 0.5
        rmses = []
        for _ in range(100):
            p = random_pose(rng)
            obs = project(face, p, cam) + rng.normal(0, sigma, size=(68, 2))
            fit = fit_pose(face, obs, cam)
            rmses.append(fit.rmse)
            x0 = init_shape(face, fit.pose, cam)
            # x_0 from the fitted pose sits within the fit residual of the observations
            assert np.sqrt(((x0 - obs) ** 2).sum(axis=1).mean()) == pytest.approx(fit.rmse, rel=1e-9)
        assert max(rmses) <= 2 * sigma

    def test_costs_non_increasing(self, face, cam, rng):
        for _ in range(20):
            obs = project(face, random_pose(rng), cam) + rng.normal(0, 1.0, size=(68, 2))
            costs = fit_pose(face, obs, cam).costs
            assert all(b <= a for a, b in zip(costs, costs[1:]))

    def test_unconverged_flag(self, face, cam, rng):
        obs = project(face, random_pose(rng), cam)
        fit = fit_pose(face, obs, cam, max_iter=1)
        assert not fit.converged and fit.status == "unconverged"
        assert fit.iterations == 1

    def test_collinear_observation(self, face, cam):
        obs = np.stack([np.linspace(0, 100, 68), np.linspace(0, 50, 68)], axis=1)
        with pytest.raises(DegenerateInputError):
            fit_pose(face, obs, cam)

    def test_wrong_count(self, face, cam):
        with pytest.raises(ShapeError):
            fit_pose(face, np.zeros((5, 2)), cam)


class TestPoseMAE:
    def test_zero(self):
        p = [HeadPose(0.1, 0.2, 0.3, tz=1)]
        assert pose_mae(p, p)["mean"] == 0

    def test_two_degrees(self):
        out = pose_mae([HeadPose(yaw=math.radians(2), tz=1)], [HeadPose(tz=1)])
        assert out["yaw"] == pytest.approx(2.0)
        assert out["mean"] == pytest.approx(2.0 / 3)

    def test_wrap_around(self):
        out = pose_mae([HeadPose(yaw=math.radians(179), tz=1)], [HeadPose(yaw=math.radians(-179), tz=1)])
        assert out["yaw"] == pytest.approx(2.0)

    def test_symmetric(self, rng):
        a = rng.uniform(-np.pi, np.pi, size=(30, 6))
        b = rng.uniform(-np.pi, np.pi, size=(30, 6))
        assert pose_mae(a, b) == pytest.approx(pose_mae(b, a), abs=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            pose_mae([], [])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            pose_mae(np.zeros((2, 6)), np.zeros((3, 6)))
