import numpy as np
import pytest

from pe_rhc.costs import StageCostSpec, box_corners, synth_terminal
from pe_rhc.linsys import NoiseModel, SystemParams
from pe_rhc.rhc import PolytopeU


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def scalar_setup():
    """Scalar plant A=0.8, B=1 with unit quadratic costs and a wide box."""
    theta = SystemParams(0.8, 1.0, S=2.0)
    costs = StageCostSpec.quadratic(1.0, 1.0)
    terminal = synth_terminal(box_corners(theta, 0.1))
    U = PolytopeU.from_box(-1.0, 1.0, 1)
    return theta, costs, terminal, U


@pytest.fixture
def planar_setup():
    """Two-state, one-input plant used by the excitation and coverage checks."""
    theta = SystemParams(np.diag([0.5, -0.5]), [[1.0], [1.0]], S=2.0)
    costs = StageCostSpec.quadratic(np.eye(2), np.eye(1))
    terminal = synth_terminal(box_corners(theta, 0.1))
    U = PolytopeU.from_box(-1.0, 1.0, 1)
    noise = NoiseModel(1e-3)
    return theta, noise, costs, terminal, U
