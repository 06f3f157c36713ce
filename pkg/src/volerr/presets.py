"""Ready-made geometry, test part program and campaign configurations.

The demo program keeps the tool tip on the workpiece ball at every
waypoint: the rotary axes are chosen freely and the linear axes are
solved so the nominal tool-to-ball deviation vanishes there.  Between
waypoints the joints interpolate linearly, so the nominal deviation
stays small but nonzero, which is exactly the regime the decomposition
is meant for.
"""

from __future__ import annotations

import numpy as np

from .kinematics import RAD_PER_DEG, MachineGeometry, dkt
from .virtual_machine import (
    CampaignConfig,
    MotionTerm,
    ServoParams,
    StructureParams,
    TrajectoryProgram,
)

DEMO_FEEDS_MM_MIN = [1000.0, 1800.0, 3240.0, 5832.0, 10498.0, 18896.0]

# rotary waypoints (deg); the C reversal near the middle produces a
# near-square corner in joint space with all five axes active
_DEMO_A_DEG = [0.0, 1.5, 3.0, 4.0, 4.5, 4.0, 3.0, 1.5, 0.0,
               -1.5, -3.0, -4.0, -4.5, -4.0, -3.0, -1.5, 0.0, 1.0]
_DEMO_C_DEG = [0.0, 2.0, 4.5, 7.0, 9.5, 12.0, 14.5, 17.0, 19.5,
               17.0, 14.5, 12.0, 9.5, 7.0, 4.5, 2.0, 0.0, 2.5]


def default_geometry() -> MachineGeometry:
    """A compact trunnion machine with the A swivel at 45 degrees."""
    return MachineGeometry(
        bed_to_x=np.array([0.0, 0.0, 600.0]),
        x_to_z=np.array([0.0, 0.0, 0.0]),
        z_to_spindle=np.array([0.0, 0.0, 0.0]),
        bed_to_y=np.array([0.0, 0.0, 0.0]),
        y_to_a=np.array([0.0, -80.0, 120.0]),
        a_to_c=np.array([0.0, 80.0, 80.0]),
        tool_length_mm=150.0,
        ball_offset_mm=np.array([40.0, 0.0, 120.0]),
    )


def tracking_waypoint(geom: MachineGeometry, a_rad: float,
                      c_rad: float) -> np.ndarray:
    """Joint pose with the given rotary angles and zero nominal deviation.

    With the linear joints at zero the deviation is tau0; X and Z add
    directly to it and Y subtracts, so the solve is exact.
    """
    tau0 = dkt(np.array([0.0, 0.0, 0.0, a_rad, c_rad]), geom)
    return np.array([-tau0[0], tau0[1], -tau0[2], a_rad, c_rad])


def make_tracking_program(geom: MachineGeometry, feed_mm_min: float,
                          a_deg=None, c_deg=None, **kwargs
                          ) -> TrajectoryProgram:
    """Ball-tracking program through rotary waypoints."""
    a_deg = _DEMO_A_DEG if a_deg is None else a_deg
    c_deg = _DEMO_C_DEG if c_deg is None else c_deg
    if len(a_deg) != len(c_deg):
        raise ValueError("waypoint lists must have equal length")
    points = np.array([
        tracking_waypoint(geom, a * RAD_PER_DEG, c * RAD_PER_DEG)
        for a, c in zip(a_deg, c_deg)])
    kwargs.setdefault("corner_tolerance_units", 1.2)
    kwargs.setdefault("vmax", np.array([500.0, 500.0, 500.0, 360.0, 360.0]))
    kwargs.setdefault("amax", np.full(5, 100000.0))
    # fast, large tag: its slope must dwarf sensor noise for the clock
    # offset between streams to be recoverable to one sample
    kwargs.setdefault("tag_amplitude_mm", 4.0)
    kwargs.setdefault("tag_duration_s", 0.05)
    return TrajectoryProgram(points=points, feed_mm_min=feed_mm_min, **kwargs)


def demo_structure(noise_um: float = 0.3) -> StructureParams:
    return StructureParams(
        dq_true=np.array([60e-6, -45e-6, 80e-6, -70e-6, 55e-6, -65e-6,
                          40e-6, 0.020]),
        motion_terms=[
            MotionTerm("X", np.array([0.8, 0.0, 0.6]), 0.25, 80.0),
            MotionTerm("Y", np.array([0.0, 1.0, 0.0]), 0.2, 60.0, 0.7),
            MotionTerm("Z", np.array([0.3, 0.3, 0.9]), 0.25, 70.0, 1.9),
            MotionTerm("A", np.array([0.0, 0.7, 0.7]), 0.3, 30.0, 0.4),
            MotionTerm("C", np.array([0.6, 0.8, 0.0]), 0.35, 25.0, 2.6),
        ],
        drift_um=np.zeros(3),
        compliance_um_per_m_s2={
            "X": np.array([2.5, 0.9, 0.75]),
            "Y": np.array([0.75, 2.8, 0.6]),
            "Z": np.array([0.4, 0.75, 2.2]),
        },
        noise_um=noise_um,
    )


DEMO_DRIFT_UM = [
    [0.0, 0.0, 0.0],
    [0.6, -0.4, 0.3],
    [1.1, -0.8, 0.55],
    [1.7, -1.2, 0.85],
    [2.2, -1.6, 1.1],
    [2.8, -2.1, 1.4],
]


def demo_campaign_config(noise_um: float = 0.3,
                         seed: int = 20260816) -> CampaignConfig:
    """Six-feed benchmark campaign with every error source active."""
    geom = default_geometry()
    return CampaignConfig(
        geometry=geom,
        program=make_tracking_program(geom, DEMO_FEEDS_MM_MIN[0]),
        feeds_mm_min=list(DEMO_FEEDS_MM_MIN),
        servo=ServoParams(mode="second_order", natural_frequency_hz=150.0,
                          damping=1.0),
        structure=demo_structure(noise_um=noise_um),
        drift_per_session_um=[list(d) for d in DEMO_DRIFT_UM],
        seed=seed,
    )


def small_campaign_config(seed: int = 7) -> CampaignConfig:
    """Two feeds over a short path; handy for determinism checks."""
    geom = default_geometry()
    prog = make_tracking_program(
        geom, 3000.0,
        a_deg=[0.0, 1.5, 3.0, 2.0, 0.5],
        c_deg=[0.0, 2.5, 5.5, 8.0, 9.5])
    return CampaignConfig(
        geometry=geom,
        program=prog,
        feeds_mm_min=[3000.0, 9000.0],
        servo=ServoParams(mode="second_order", natural_frequency_hz=150.0,
                          damping=1.0),
        structure=demo_structure(noise_um=0.3),
        drift_per_session_um=[[0.0, 0.0, 0.0], [0.8, -0.5, 0.4]],
        seed=seed,
    )


def write_demo_config(path, noise_um: float = 0.3,
                      seed: int = 20260816) -> None:
    demo_campaign_config(noise_um=noise_um, seed=seed).save(path)
