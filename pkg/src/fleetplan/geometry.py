"""Vehicle geometry: kinematic stepping, footprints and collision predicates.

All poses are rear-axle poses (x, y, theta) with theta in (-pi, pi].
A state adds the steering angle phi; controls are (v, omega) with
omega the steering rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "VehicleParams",
    "State",
    "ControlInput",
    "OrientedBox",
    "normalize_angle",
    "step_kinematics",
    "footprint",
    "box_corners",
    "sat_overlap",
    "disc_centers",
    "pair_distance",
]


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]; angles already in range pass through exactly."""
    if -math.pi < a <= math.pi:
        return a
    a = (a + math.pi) % (2.0 * math.pi) - math.pi
    if a <= -math.pi:
        a = math.pi
    return a


@dataclass(frozen=True)
class VehicleParams:
    """Ackermann vehicle dimensions and limits.

    L is the wheelbase, L_F/L_B the distances from the rear axle to the
    front/back edge of the body, W the body width.  Limits are symmetric.
    """

    L: float = 1.5        # wheelbase [m]
    L_F: float = 2.0      # rear axle to front bumper [m]
    L_B: float = 1.0      # rear axle to rear bumper [m]
    W: float = 2.0        # body width [m]
    v_max: float = 1.0    # speed limit [m/s]
    omega_max: float = 1.0  # steering rate limit [rad/s]
    phi_max: float = 0.6  # steering angle limit [rad]

    @property
    def length(self) -> float:
        return self.L_F + self.L_B

    @property
    def center_offset(self) -> float:
        # body center sits ahead of the rear axle
        return (self.L_F - self.L_B) / 2.0

    @property
    def front_disc_offset(self) -> float:
        return (3.0 * self.L_F - self.L_B) / 4.0

    @property
    def rear_disc_offset(self) -> float:
        return (self.L_F - 3.0 * self.L_B) / 4.0

    @property
    def disc_radius(self) -> float:
        # radius of the two covering discs; each disc must contain one
        # half of the body rectangle
        return math.hypot((self.L_F + self.L_B) / 4.0, self.W / 2.0)

    @property
    def min_turn_radius(self) -> float:
        return self.L / math.tan(self.phi_max)

    @property
    def circumradius(self) -> float:
        # circle around the whole body, centered at the body center
        return math.hypot(self.length / 2.0, self.W / 2.0)


@dataclass(frozen=True)
class State:
    x: float
    y: float
    theta: float
    phi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.phi])


@dataclass(frozen=True)
class ControlInput:
    v: float
    omega: float


def step_kinematics(z: State, u: ControlInput, dt: float, params: VehicleParams) -> State:
    """One forward-Euler step of the kinematic bicycle model."""
    return State(
        z.x + u.v * math.cos(z.theta) * dt,
        z.y + u.v * math.sin(z.theta) * dt,
        normalize_angle(z.theta + u.v * math.tan(z.phi) / params.L * dt),
        z.phi + u.omega * dt,
    )


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle given by center, half extents and heading."""

    cx: float
    cy: float
    hx: float
    hy: float
    heading: float = 0.0


def footprint(z: State, params: VehicleParams) -> OrientedBox:
    """Body rectangle of the vehicle at state z."""
    oc = params.center_offset
    return OrientedBox(
        z.x + oc * math.cos(z.theta),
        z.y + oc * math.sin(z.theta),
        params.length / 2.0,
        params.W / 2.0,
        z.theta,
    )


def box_corners(box: OrientedBox) -> np.ndarray:
    """Corners in counter-clockwise order, shape (4, 2)."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    ux, uy = c * box.hx, s * box.hx
    vx, vy = -s * box.hy, c * box.hy
    return np.array(
        [
            [box.cx + ux + vx, box.cy + uy + vy],
            [box.cx - ux + vx, box.cy - uy + vy],
            [box.cx - ux - vx, box.cy - uy - vy],
            [box.cx + ux - vx, box.cy + uy - vy],
        ]
    )


def _axes(box: OrientedBox) -> tuple[tuple[float, float], tuple[float, float]]:
    c, s = math.cos(box.heading), math.sin(box.heading)
    return (c, s), (-s, c)


def _proj_radius(box: OrientedBox, ax: tuple[float, float]) -> float:
    c, s = math.cos(box.heading), math.sin(box.heading)
    # |u . ax| * hx + |v . ax| * hy
    return box.hx * abs(c * ax[0] + s * ax[1]) + box.hy * abs(-s * ax[0] + c * ax[1])


def sat_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis overlap test for two oriented rectangles.

    Closed-set semantics: boxes that merely touch count as overlapping.
    """
    dx, dy = b.cx - a.cx, b.cy - a.cy
    for ax in (*_axes(a), *_axes(b)):
        dist = abs(dx * ax[0] + dy * ax[1])
        if dist > _proj_radius(a, ax) + _proj_radius(b, ax):
            return False
    return True


def disc_centers(z: State, params: VehicleParams) -> np.ndarray:
    """Centers of the two covering discs, shape (2, 2): front row first."""
    c, s = math.cos(z.theta), math.sin(z.theta)
    f, r = params.front_disc_offset, params.rear_disc_offset
    return np.array([[z.x + f * c, z.y + f * s], [z.x + r * c, z.y + r * s]])


def pair_distance(zi: State, zj: State, params: VehicleParams) -> float:
    """Conservative clearance between two vehicles.

    Minimum over the four disc-center pairs minus both disc radii; positive
    values certify that the footprints do not intersect.
    """
    ci = disc_centers(zi, params)
    cj = disc_centers(zj, params)
    d = np.hypot(
        ci[:, None, 0] - cj[None, :, 0], ci[:, None, 1] - cj[None, :, 1]
    )
    return float(d.min()) - 2.0 * params.disc_radius


# ---------------------------------------------------------------------------
# vectorized variants used in the planner hot paths


def states_to_array(states: list[State]) -> np.ndarray:
    return np.array([[z.x, z.y, z.theta, z.phi] for z in states])


def footprint_params_arr(poses: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Footprint centers and headings for poses (N, >=3) -> (N, 3)."""
    oc = params.center_offset
    th = poses[:, 2]
    out = np.empty((poses.shape[0], 3))
    out[:, 0] = poses[:, 0] + oc * np.cos(th)
    out[:, 1] = poses[:, 1] + oc * np.sin(th)
    out[:, 2] = th
    return out


def boxes_hit_aabbs(
    poses: np.ndarray,
    params: VehicleParams,
    acx: np.ndarray,
    acy: np.ndarray,
    ahx: np.ndarray,
    ahy: np.ndarray,
) -> np.ndarray:
    """For each pose, does the body rectangle hit any axis-aligned box?

    poses has shape (N, >=3); the a* arrays describe the boxes.  Returns a
    boolean mask of shape (N,).  Touching counts as a hit.
    """
    if acx.size == 0 or poses.shape[0] == 0:
        return np.zeros(poses.shape[0], dtype=bool)
    fp = footprint_params_arr(poses, params)
    hl, hw = params.length / 2.0, params.W / 2.0
    c = np.cos(fp[:, 2])[:, None]
    s = np.sin(fp[:, 2])[:, None]
    dx = acx[None, :] - fp[:, 0:1]
    dy = acy[None, :] - fp[:, 1:2]
    ac, asn = np.abs(c), np.abs(s)
    # world axes
    ok1 = np.abs(dx) <= ahx[None, :] + hl * ac + hw * asn
    ok2 = np.abs(dy) <= ahy[None, :] + hl * asn + hw * ac
    # vehicle axes
    ok3 = np.abs(dx * c + dy * s) <= hl + ahx[None, :] * ac + ahy[None, :] * asn
    ok4 = np.abs(-dx * s + dy * c) <= hw + ahx[None, :] * asn + ahy[None, :] * ac
    return (ok1 & ok2 & ok3 & ok4).any(axis=1)


def boxes_outside_map(
    poses: np.ndarray, params: VehicleParams, width: float, height: float
) -> np.ndarray:
    """True where any footprint corner leaves [0, width] x [0, height].
    The map is a closed set: corners exactly on the boundary are inside.  A
    hair of slack absorbs the ~1e-16 rounding of the corner rotation so that
    edge-touching poses (e.g. heading pi) do not flip outside."""
    eps = 1e-9
    fp = footprint_params_arr(poses, params)
    hl, hw = params.length / 2.0, params.W / 2.0
    ac, asn = np.abs(np.cos(fp[:, 2])), np.abs(np.sin(fp[:, 2]))
    ex = hl * ac + hw * asn
    ey = hl * asn + hw * ac
    return (
        (fp[:, 0] - ex < -eps)
        | (fp[:, 0] + ex > width + eps)
        | (fp[:, 1] - ey < -eps)
        | (fp[:, 1] + ey > height + eps)
    )


def boxes_hit_boxes(
    poses_a: np.ndarray, poses_b: np.ndarray, params: VehicleParams
) -> np.ndarray:
    """Pairwise SAT between footprints of poses_a (N,) and poses_b (K,).

    Returns an (N, K) boolean matrix; both sets share the same vehicle.
    """
    n, k = poses_a.shape[0], poses_b.shape[0]
    if n == 0 or k == 0:
        return np.zeros((n, k), dtype=bool)
    fa = footprint_params_arr(poses_a, params)
    fb = footprint_params_arr(poses_b, params)
    hl, hw = params.length / 2.0, params.W / 2.0
    dx = fb[None, :, 0] - fa[:, None, 0]
    dy = fb[None, :, 1] - fa[:, None, 1]
    ok = np.ones((n, k), dtype=bool)
    for th_small, sign in ((fa[:, None, 2], 1), (fb[None, :, 2], -1)):
        c, s = np.cos(th_small), np.sin(th_small)
        # other box heading relative to this axis frame
        rel = sign * (fb[None, :, 2] - fa[:, None, 2])
        rc, rs = np.abs(np.cos(rel)), np.abs(np.sin(rel))
        pu = dx * c + dy * s
        pv = -dx * s + dy * c
        ok &= np.abs(pu) <= hl + hl * rc + hw * rs
        ok &= np.abs(pv) <= hw + hl * rs + hw * rc
    return ok


def disc_centers_arr(poses: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Disc centers for poses (N, >=3) -> (N, 2, 2), front disc first."""
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    f, r = params.front_disc_offset, params.rear_disc_offset
    out = np.empty((poses.shape[0], 2, 2))
    out[:, 0, 0] = poses[:, 0] + f * c
    out[:, 0, 1] = poses[:, 1] + f * s
    out[:, 1, 0] = poses[:, 0] + r * c
    out[:, 1, 1] = poses[:, 1] + r * s
    return out


def discs_hit_aabbs(
    poses: np.ndarray,
    params: VehicleParams,
    acx: np.ndarray,
    acy: np.ndarray,
    ahx: np.ndarray,
    ahy: np.ndarray,
) -> np.ndarray:
    """For each pose, does either covering disc overlap any axis-aligned box?

    Conservative compared to the exact footprint test: the discs cover the
    rectangle, so a disc-clear pose is always footprint-clear.  Returns a
    boolean mask of shape (N,).
    """
    if acx.size == 0 or poses.shape[0] == 0:
        return np.zeros(poses.shape[0], dtype=bool)
    cen = disc_centers_arr(poses, params).reshape(-1, 2)   # (2N, 2)
    dx = np.maximum(np.abs(cen[:, 0:1] - acx[None, :]) - ahx[None, :], 0.0)
    dy = np.maximum(np.abs(cen[:, 1:2] - acy[None, :]) - ahy[None, :], 0.0)
    hit = (dx * dx + dy * dy) < params.disc_radius ** 2
    return hit.any(axis=1).reshape(-1, 2).any(axis=1)


def discs_outside_map(
    poses: np.ndarray, params: VehicleParams, width: float, height: float
) -> np.ndarray:
    """True where either covering disc sticks out of [0,width] x [0,height]."""
    eps = 1e-9
    cen = disc_centers_arr(poses, params)
    r = params.disc_radius
    x, y = cen[..., 0], cen[..., 1]
    out = (x < r - eps) | (x > width - r + eps) | (y < r - eps) | (y > height - r + eps)
    return out.any(axis=1)


def discs_hit_discs(
    poses_a: np.ndarray, poses_b: np.ndarray, params: VehicleParams
) -> np.ndarray:
    """Pairwise disc-overlap test between two pose sets -> (N, K) bool.

    True when any of the four center pairs is closer than 2 r_v; conservative
    for the footprints for the same reason as discs_hit_aabbs.
    """
    n, k = poses_a.shape[0], poses_b.shape[0]
    if n == 0 or k == 0:
        return np.zeros((n, k), dtype=bool)
    ca = disc_centers_arr(poses_a, params)   # (N, 2, 2)
    cb = disc_centers_arr(poses_b, params)   # (K, 2, 2)
    d = ca[:, None, :, None, :] - cb[None, :, None, :, :]
    d2 = (d * d).sum(axis=-1).min(axis=(2, 3))
    return d2 < (2.0 * params.disc_radius) ** 2
