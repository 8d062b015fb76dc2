"""fleetplan: multi-vehicle trajectory planning for Ackermann fleets.

Pipeline: a centralized prioritized spatiotemporal search produces a coarse,
collision-free plan at a large step size; a decentralized sequential-convex
stage then refines it into a smooth, kinematically exact joint trajectory.
"""
from fleetplan.geometry import (
    ControlInput,
    OrientedBox,
    State,
    VehicleParams,
    disc_centers,
    footprint,
    normalize_angle,
    pair_distance,
    sat_overlap,
    step_kinematics,
)
from fleetplan.instance import (
    AgentTask,
    MvtpInstance,
    Plan,
    VerificationReport,
    generate_random_instance,
    parse_instance,
    serialize_instance,
    validate_plan,
)

__version__ = "0.1.0"

__all__ = [
    "AgentTask",
    "ControlInput",
    "MvtpInstance",
    "OrientedBox",
    "Plan",
    "State",
    "VehicleParams",
    "VerificationReport",
    "disc_centers",
    "footprint",
    "generate_random_instance",
    "normalize_angle",
    "pair_distance",
    "parse_instance",
    "sat_overlap",
    "serialize_instance",
    "step_kinematics",
    "validate_plan",
]
