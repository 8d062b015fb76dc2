"""Problem instances, plan containers, file formats and the plan verifier.

The verifier (validate_plan) is the single source of truth for feasibility:
both planning stages are judged against it, never against their own checks.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from fleetplan.geometry import (
    OrientedBox,
    State,
    VehicleParams,
    boxes_hit_aabbs,
    boxes_outside_map,
    boxes_hit_boxes,
    disc_centers_arr,
    footprint,
    normalize_angle,
    sat_overlap,
)

__all__ = [
    "AgentTask",
    "MvtpInstance",
    "Plan",
    "Violation",
    "VerificationReport",
    "parse_instance",
    "serialize_instance",
    "load_instance",
    "save_instance",
    "generate_random_instance",
    "generate_room_instance",
    "validate_plan",
    "write_plan",
    "read_plan",
]

# verifier tolerances; documented in every VerificationReport
KINEMATIC_EPS = 1e-6   # per-step re-simulation error [m, rad]
BOUNDARY_POS_EPS = 1e-3   # endpoint position tolerance [m]
BOUNDARY_ANG_EPS = 1e-2   # endpoint angle tolerance [rad]
LIMIT_EPS = 1e-4   # control/steering box tolerance


@dataclass(frozen=True)
class AgentTask:
    id: int
    start: State
    goal: State


@dataclass
class MvtpInstance:
    map_width: float
    map_height: float
    obstacles: list[OrientedBox]
    agents: list[AgentTask]
    vehicle: VehicleParams

    def __post_init__(self) -> None:
        self._obstacle_arrays = None

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def obstacle_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Obstacle centers and half extents as flat arrays (cached)."""
        if self._obstacle_arrays is None:
            if self.obstacles:
                self._obstacle_arrays = (
                    np.array([o.cx for o in self.obstacles]),
                    np.array([o.cy for o in self.obstacles]),
                    np.array([o.hx for o in self.obstacles]),
                    np.array([o.hy for o in self.obstacles]),
                )
            else:
                z = np.zeros(0)
                self._obstacle_arrays = (z, z, z, z)
        return self._obstacle_arrays


class InstanceError(ValueError):
    pass


def _check_instance(inst: MvtpInstance) -> None:
    if inst.n_agents < 1:
        raise InstanceError("instance needs at least one agent")
    ids = [a.id for a in inst.agents]
    if len(set(ids)) != len(ids):
        raise InstanceError("duplicate agent ids")
    acx, acy, ahx, ahy = inst.obstacle_arrays()
    boxes: list[tuple[int, str, OrientedBox]] = []
    for a in inst.agents:
        for name, z in (("start", a.start), ("goal", a.goal)):
            pose = np.array([[z.x, z.y, z.theta, z.phi]])
            if boxes_outside_map(pose, inst.vehicle, inst.map_width, inst.map_height)[0]:
                raise InstanceError(f"agent {a.id} {name} footprint leaves the map")
            if boxes_hit_aabbs(pose, inst.vehicle, acx, acy, ahx, ahy)[0]:
                raise InstanceError(f"agent {a.id} {name} collides with an obstacle")
            boxes.append((a.id, name, footprint(z, inst.vehicle)))
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            ai, ni, bi = boxes[i]
            aj, nj, bj = boxes[j]
            if ai == aj:
                continue  # an agent's own start/goal pair may overlap
            if sat_overlap(bi, bj):
                raise InstanceError(
                    f"agent {ai} {ni} overlaps agent {aj} {nj}"
                )


# ---------------------------------------------------------------------------
# instance file format (YAML)


def serialize_instance(inst: MvtpInstance, header: str | None = None) -> str:
    v = inst.vehicle
    doc = {
        "map": {"width": float(inst.map_width), "height": float(inst.map_height)},
        "vehicle": {
            "L": float(v.L),
            "L_F": float(v.L_F),
            "L_B": float(v.L_B),
            "W": float(v.W),
            "v_max": float(v.v_max),
            "omega_max": float(v.omega_max),
            "phi_max": float(v.phi_max),
        },
        "obstacles": [
            {"cx": float(o.cx), "cy": float(o.cy), "hx": float(o.hx), "hy": float(o.hy)}
            for o in inst.obstacles
        ],
        "agents": [
            {
                "id": int(a.id),
                "start": [float(a.start.x), float(a.start.y), float(a.start.theta)],
                "goal": [float(a.goal.x), float(a.goal.y), float(a.goal.theta)],
            }
            for a in inst.agents
        ],
    }
    out = io.StringIO()
    if header:
        for line in header.splitlines():
            out.write(f"# {line}\n")
    yaml.safe_dump(doc, out, sort_keys=False, default_flow_style=None)
    return out.getvalue()


def parse_instance(text: str) -> MvtpInstance:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise InstanceError(f"malformed instance document: {e}") from e
    if not isinstance(doc, dict):
        raise InstanceError("instance document is not a mapping")
    try:
        m = doc["map"]
        vd = doc["vehicle"]
        vehicle = VehicleParams(
            L=float(vd["L"]),
            L_F=float(vd["L_F"]),
            L_B=float(vd["L_B"]),
            W=float(vd["W"]),
            v_max=float(vd["v_max"]),
            omega_max=float(vd["omega_max"]),
            phi_max=float(vd["phi_max"]),
        )
        obstacles = [
            OrientedBox(float(o["cx"]), float(o["cy"]), float(o["hx"]), float(o["hy"]))
            for o in doc.get("obstacles") or []
        ]
        agents = []
        for a in doc.get("agents") or []:
            sx, sy, sth = (float(c) for c in a["start"])
            gx, gy, gth = (float(c) for c in a["goal"])
            agents.append(
                AgentTask(
                    int(a["id"]),
                    State(sx, sy, normalize_angle(sth)),
                    State(gx, gy, normalize_angle(gth)),
                )
            )
    except (KeyError, TypeError) as e:
        raise InstanceError(f"missing or malformed field: {e}") from e
    inst = MvtpInstance(float(m["width"]), float(m["height"]), obstacles, agents, vehicle)
    _check_instance(inst)
    return inst


def load_instance(path) -> MvtpInstance:
    with open(path) as f:
        return parse_instance(f.read())


def save_instance(path, inst: MvtpInstance, header: str | None = None) -> None:
    with open(path, "w") as f:
        f.write(serialize_instance(inst, header))


# ---------------------------------------------------------------------------
# random scenario generation

_POSE_TRIES = 4000


def _sample_pose(
    rng: np.random.Generator,
    size: float,
    vehicle: VehicleParams,
    acx, acy, ahx, ahy,
    taken: list[OrientedBox],
    clearance: float,
    end_margin: float,
) -> State:
    """Rejection-sample one start/goal pose.

    Besides keeping the footprint clear, both covering discs must stay
    end_margin beyond their radius away from walls and obstacles, so that the
    refinement stage's eroded workspace still contains the endpoint discs.
    """
    r_safe = vehicle.disc_radius + end_margin
    lo, hi = r_safe, size - r_safe
    if hi <= lo:
        raise InstanceError("map too small for the vehicle")
    for _ in range(_POSE_TRIES):
        x = rng.uniform(lo, hi)
        y = rng.uniform(lo, hi)
        th = normalize_angle(rng.uniform(-math.pi, math.pi))
        z = State(x, y, th)
        pose = np.array([[x, y, th, 0.0]])
        discs = disc_centers_arr(pose, vehicle)[0]
        if (discs < r_safe).any() or (discs > size - r_safe).any():
            continue
        if acx.size:
            inside = (
                (np.abs(acx[None, :] - discs[:, 0:1]) <= ahx[None, :] + r_safe)
                & (np.abs(acy[None, :] - discs[:, 1:2]) <= ahy[None, :] + r_safe)
            )
            if inside.any():
                continue
        fp = footprint(z, vehicle)
        grown = OrientedBox(fp.cx, fp.cy, fp.hx + clearance / 2.0, fp.hy + clearance / 2.0, fp.heading)
        if any(
            sat_overlap(grown, OrientedBox(t.cx, t.cy, t.hx + clearance / 2.0, t.hy + clearance / 2.0, t.heading))
            for t in taken
        ):
            continue
        return z
    raise InstanceError("pose placement failed; scenario density too high")


def generate_random_instance(
    seed: int,
    size: float,
    n_obstacles: int,
    n_agents: int,
    vehicle: VehicleParams | None = None,
    clearance: float = 1.5,
    end_margin: float = 0.15,
    half_extent_range: tuple[float, float] = (0.5, 2.0),
) -> MvtpInstance:
    """Seeded random scenario: rectangular obstacles plus agent start/goal poses."""
    if n_agents < 1:
        raise InstanceError("n_agents must be >= 1")
    vehicle = vehicle or VehicleParams()
    rng = np.random.default_rng(seed)
    obstacles = []
    for _ in range(n_obstacles):
        hx = rng.uniform(*half_extent_range)
        hy = rng.uniform(*half_extent_range)
        cx = rng.uniform(hx, size - hx)
        cy = rng.uniform(hy, size - hy)
        obstacles.append(OrientedBox(cx, cy, hx, hy))
    inst = MvtpInstance(size, size, obstacles, [], vehicle)
    acx, acy, ahx, ahy = inst.obstacle_arrays()
    taken: list[OrientedBox] = []
    agents = []
    for i in range(n_agents):
        s = _sample_pose(rng, size, vehicle, acx, acy, ahx, ahy, taken, clearance, end_margin)
        taken.append(footprint(s, vehicle))
        g = _sample_pose(rng, size, vehicle, acx, acy, ahx, ahy, taken, clearance, end_margin)
        taken.append(footprint(g, vehicle))
        agents.append(AgentTask(i, s, g))
    inst.agents = agents
    _check_instance(inst)
    return inst


def generate_room_instance(
    seed: int,
    size: float,
    n_agents: int,
    vehicle: VehicleParams | None = None,
    rooms: int = 4,
    door: float = 2.0,
    wall: float = 0.3,
    clearance: float = 1.5,
    end_margin: float = 0.15,
) -> MvtpInstance:
    """Room-grid scenario: a rooms x rooms wall lattice with one random door per edge."""
    if n_agents < 1:
        raise InstanceError("n_agents must be >= 1")
    vehicle = vehicle or VehicleParams()
    rng = np.random.default_rng(seed)
    pitch = size / rooms
    hw = wall / 2.0
    obstacles = []

    def wall_segments(lo: float, hi: float) -> list[tuple[float, float]]:
        # one door gap per room edge, uniformly placed
        gap0 = rng.uniform(lo, hi - door)
        return [(lo, gap0), (gap0 + door, hi)]

    for k in range(1, rooms):
        c = k * pitch
        for r in range(rooms):
            lo, hi = r * pitch, (r + 1) * pitch
            for a, b in wall_segments(lo, hi):
                if b - a > 1e-9:
                    obstacles.append(OrientedBox(c, (a + b) / 2.0, hw, (b - a) / 2.0))
            for a, b in wall_segments(lo, hi):
                if b - a > 1e-9:
                    obstacles.append(OrientedBox((a + b) / 2.0, c, (b - a) / 2.0, hw))
    inst = MvtpInstance(size, size, obstacles, [], vehicle)
    acx, acy, ahx, ahy = inst.obstacle_arrays()
    taken: list[OrientedBox] = []
    agents = []
    for i in range(n_agents):
        s = _sample_pose(rng, size, vehicle, acx, acy, ahx, ahy, taken, clearance, end_margin)
        taken.append(footprint(s, vehicle))
        g = _sample_pose(rng, size, vehicle, acx, acy, ahx, ahy, taken, clearance, end_margin)
        taken.append(footprint(g, vehicle))
        agents.append(AgentTask(i, s, g))
    inst.agents = agents
    _check_instance(inst)
    return inst


# ---------------------------------------------------------------------------
# plans


@dataclass
class Plan:
    """Joint trajectory sampled at a fixed interval.

    states[i] has shape (T, 4) with rows (x, y, theta, phi); controls[i] has
    shape (T-1, 2) with rows (v, omega), u_t acting between samples t and t+1.
    All agents share the same T (goal-padded).
    """

    states: list[np.ndarray]
    controls: list[np.ndarray]
    dt: float
    tau_f: float

    @property
    def n_agents(self) -> int:
        return len(self.states)

    @property
    def horizon(self) -> int:
        return self.states[0].shape[0]


@dataclass(frozen=True)
class Violation:
    kind: str  # boundary | kinematic | control_limit | static | inter_agent | off_map
    agent: int
    t: int
    magnitude: float
    partner: int = -1


@dataclass
class VerificationReport:
    violations: list[Violation] = field(default_factory=list)
    epsilons: dict[str, float] = field(
        default_factory=lambda: {
            "kinematic": KINEMATIC_EPS,
            "boundary_pos": BOUNDARY_POS_EPS,
            "boundary_ang": BOUNDARY_ANG_EPS,
            "control_limit": LIMIT_EPS,
        }
    )

    @property
    def feasible(self) -> bool:
        return not self.violations

    def count(self, kind: str) -> int:
        return sum(1 for v in self.violations if v.kind == kind)

    def summary(self) -> str:
        if self.feasible:
            return "feasible: no violations"
        kinds = sorted({v.kind for v in self.violations})
        parts = [f"{k}={self.count(k)}" for k in kinds]
        return f"infeasible: {len(self.violations)} violations ({', '.join(parts)})"


def _ang_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a - b + math.pi) % (2.0 * math.pi) - math.pi
    return np.abs(d)


def validate_plan(instance: MvtpInstance, plan: Plan, dt: float | None = None) -> VerificationReport:
    """Check a plan against the instance; every violation becomes report data."""
    if plan.n_agents != instance.n_agents:
        raise ValueError("plan/instance agent count mismatch")
    if plan.horizon < 1:
        raise ValueError("empty plan")
    dt = plan.dt if dt is None else dt
    v = instance.vehicle
    rep = VerificationReport()
    acx, acy, ahx, ahy = instance.obstacle_arrays()
    T = plan.horizon

    for idx, task in enumerate(instance.agents):
        zs = plan.states[idx]
        us = plan.controls[idx]
        if zs.shape[0] != T:
            raise ValueError("trajectories have unequal lengths")
        # endpoint boundary conditions
        for t_chk, ref in ((0, task.start), (T - 1, task.goal)):
            dp = math.hypot(zs[t_chk, 0] - ref.x, zs[t_chk, 1] - ref.y)
            da = abs(normalize_angle(zs[t_chk, 2] - ref.theta))
            if dp > BOUNDARY_POS_EPS or da > BOUNDARY_ANG_EPS:
                rep.violations.append(Violation("boundary", task.id, t_chk, max(dp, da)))
        # kinematic consistency: one exact step from each sample
        if T > 1:
            c, s = np.cos(zs[:-1, 2]), np.sin(zs[:-1, 2])
            px = zs[:-1, 0] + us[:, 0] * c * dt
            py = zs[:-1, 1] + us[:, 0] * s * dt
            pth = zs[:-1, 2] + us[:, 0] * np.tan(zs[:-1, 3]) / v.L * dt
            pphi = zs[:-1, 3] + us[:, 1] * dt
            err = np.maximum(
                np.hypot(px - zs[1:, 0], py - zs[1:, 1]),
                np.maximum(_ang_diff(pth, zs[1:, 2]), np.abs(pphi - zs[1:, 3])),
            )
            for t in np.nonzero(err > KINEMATIC_EPS)[0]:
                rep.violations.append(Violation("kinematic", task.id, int(t) + 1, float(err[t])))
            # control and steering boxes
            over_v = np.abs(us[:, 0]) - v.v_max
            over_w = np.abs(us[:, 1]) - v.omega_max
            for t in np.nonzero((over_v > LIMIT_EPS) | (over_w > LIMIT_EPS))[0]:
                rep.violations.append(
                    Violation("control_limit", task.id, int(t), float(max(over_v[t], over_w[t])))
                )
        over_phi = np.abs(zs[:, 3]) - v.phi_max
        for t in np.nonzero(over_phi > LIMIT_EPS)[0]:
            rep.violations.append(Violation("control_limit", task.id, int(t), float(over_phi[t])))
        # map containment and static obstacles
        off = boxes_outside_map(zs, v, instance.map_width, instance.map_height)
        for t in np.nonzero(off)[0]:
            rep.violations.append(Violation("off_map", task.id, int(t), 0.0))
        hit = boxes_hit_aabbs(zs, v, acx, acy, ahx, ahy)
        for t in np.nonzero(hit)[0]:
            rep.violations.append(Violation("static", task.id, int(t), 0.0))

    # pairwise collisions, disc-distance broadphase first
    if plan.n_agents > 1:
        discs = np.stack([disc_centers_arr(zs, v) for zs in plan.states])  # (M,T,2,2)
        two_rv = 2.0 * v.disc_radius
        for i in range(plan.n_agents):
            for j in range(i + 1, plan.n_agents):
                d = discs[i][:, :, None, :] - discs[j][:, None, :, :]
                dmin = np.sqrt((d * d).sum(axis=-1)).min(axis=(1, 2))
                for t in np.nonzero(dmin <= two_rv)[0]:
                    hit = boxes_hit_boxes(
                        plan.states[i][t : t + 1], plan.states[j][t : t + 1], v
                    )[0, 0]
                    if hit:
                        rep.violations.append(
                            Violation(
                                "inter_agent",
                                instance.agents[i].id,
                                int(t),
                                float(two_rv - dmin[t]),
                                partner=instance.agents[j].id,
                            )
                        )
    return rep


# ---------------------------------------------------------------------------
# plan file format


def write_plan(path, plan: Plan) -> None:
    with open(path, "w") as f:
        f.write(f"# dt={plan.dt!r} tau_f={plan.tau_f!r} agents={plan.n_agents}\n")
        f.write("agent_id,t_index,time_s,x,y,theta,phi,v,omega\n")
        for i, zs in enumerate(plan.states):
            us = plan.controls[i]
            for t in range(zs.shape[0]):
                v, w = (us[t] if t < us.shape[0] else (0.0, 0.0))
                row = (t * plan.dt, zs[t, 0], zs[t, 1], zs[t, 2], zs[t, 3], v, w)
                f.write(f"{i},{t}," + ",".join(repr(float(c)) for c in row) + "\n")


def read_plan(path) -> Plan:
    with open(path) as f:
        head = f.readline()
        if not head.startswith("#"):
            raise ValueError("plan file missing header line")
        meta = dict(tok.split("=") for tok in head[1:].split() if "=" in tok)
        dt = float(meta["dt"])
        tau_f = float(meta["tau_f"])
        f.readline()  # column names
        rows: dict[int, list[list[float]]] = {}
        for line in f:
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            rows.setdefault(int(vals[0]), []).append([float(x) for x in vals[2:]])
    states, controls = [], []
    for i in sorted(rows):
        arr = np.array(rows[i])
        states.append(arr[:, 1:5])
        controls.append(arr[:-1, 5:7])
    return Plan(states, controls, dt, tau_f)
