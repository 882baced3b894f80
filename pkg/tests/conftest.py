import numpy as np
import pytest
import torch

from geovox.geometry import CameraIntrinsics, CameraView, look_at
from geovox.scenes import make_bundle


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def bundle():
    return make_bundle(3)


@pytest.fixture
def small_view():
    K = CameraIntrinsics(50.0, 50.0, 31.5, 23.5, 64, 48)
    pose = look_at([0.0, -3.0, 0.0], [0.0, 0.0, 0.0])
    rng = np.random.default_rng(0)
    return CameraView(K, pose, rng.random((48, 64, 3)))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
