import numpy as np
import pytest

from gatcascade.geometry import CameraIntrinsics, canonical_face_model
from gatcascade.regressor import CascadeConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def face():
    return canonical_face_model()


@pytest.fixture(scope="session")
def cam():
    return CameraIntrinsics.default(256)


@pytest.fixture
def tiny_cfg():
    """The small cascade used for gradient checks: L=5, D=8, C=4, K=2, S=2."""
    return CascadeConfig(
        num_landmarks=5,
        channels=4,
        dim=8,
        visual_hidden=8,
        posenc_hidden=8,
        gat_layers=2,
        windows=(4.0, 2.0),
        crop_side=3,
        image_side=16,
        feature_side=16,
    )


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one summary line per acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        assert ok, line

    return record
