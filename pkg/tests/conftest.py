import numpy as np
import pytest

from ndfcal.geometry import DESK_CAMERA, CameraIntrinsics, EyePose
from ndfcal.optics import OpticsModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def optics():
    return OpticsModel()


@pytest.fixture(scope="session")
def flat_optics():
    """Oracle without direction coupling: every display pixel is a fixed 3D point."""
    return OpticsModel(kappa=0.0)


@pytest.fixture(scope="session")
def desk():
    return DESK_CAMERA


@pytest.fixture(scope="session")
def small_camera():
    return CameraIntrinsics.from_fov(48, 36, 90.0)


@pytest.fixture
def origin_pose():
    return EyePose()
