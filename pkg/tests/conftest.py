import numpy as np
import pytest

from panocalib.geometry import CameraIntrinsics, Pose, random_rotation
from panocalib.sim import build_room


@pytest.fixture(scope="session")
def room():
    return build_room()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def K():
    return CameraIntrinsics(1746.0, 1744.0, 640.0, 512.0, 1280, 1024)


def random_pose(rng, scale=1.0, src="src", dst="dst"):
    return Pose(random_rotation(rng), rng.normal(0.0, scale, 3), src, dst)
