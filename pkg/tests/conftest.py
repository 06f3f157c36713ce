import numpy as np
import pytest

from volerr.kinematics import MachineGeometry


@pytest.fixture
def geom():
    """Workshop-plausible geometry with nonzero lever arms everywhere."""
    return MachineGeometry(
        bed_to_x=[0.0, 0.0, 600.0],
        x_to_z=[0.0, 0.0, 0.0],
        z_to_spindle=[0.0, 0.0, 0.0],
        bed_to_y=[0.0, 0.0, 0.0],
        y_to_a=[0.0, -80.0, 120.0],
        a_to_c=[0.0, 80.0, 80.0],
        tool_length_mm=150.0,
        ball_offset_mm=[40.0, 0.0, 120.0],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)


def random_poses(rng, n):
    """Pose sets that exercise every axis (A and C must vary for rank)."""
    q = np.empty((n, 5))
    q[:, 0] = rng.uniform(-250.0, 250.0, n)
    q[:, 1] = rng.uniform(-250.0, 250.0, n)
    q[:, 2] = rng.uniform(-200.0, 200.0, n)
    q[:, 3] = rng.uniform(-1.2, 1.2, n)
    q[:, 4] = rng.uniform(-np.pi, np.pi, n)
    return q
