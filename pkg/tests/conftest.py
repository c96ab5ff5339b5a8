import numpy as np
import pytest

from qslam.geometry import CameraIntrinsics


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def k100():
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 100)


def unit_sphere_points(n, rng):
    p = rng.normal(size=(n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)
