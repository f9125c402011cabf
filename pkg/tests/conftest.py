import numpy as np
import pytest

from bevkit.camera import CameraModel
from bevkit.config import BevConfig, DepthBinning


@pytest.fixture
def toy_bev():
    return BevConfig.toy()


@pytest.fixture
def camera():
    return CameraModel.forward_facing()


@pytest.fixture
def bins():
    return DepthBinning()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
