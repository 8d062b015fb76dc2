"""Time-indexed kinematic search for one vehicle among moving neighbors.

The search runs over (x, y, yaw, time) nodes connected by fixed-arc-length
motion primitives at full speed, treats already-planned agents as dynamic
obstacles sampled at the search's time quantum, and reaches the goal pose
exactly through a bounded-curvature analytic tail.

Direction reversals must pass through a wait quantum: the vehicle cannot swap
its steering lock instantaneously, so a plan that flips travel direction holds
the cusp pose for one quantum first, giving the downstream smoother stopped
time in which the steering can swing.
"""
from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, replace as dc_replace
from typing import NamedTuple

import numpy as np

from . import reeds_shepp as rs
from .geometry import (
    VehicleParams,
    discs_hit_aabbs,
    discs_hit_discs,
    discs_outside_map,
    normalize_angle,
)

_SQRT2 = math.sqrt(2.0)
# an 8-connected grid path overestimates the free-space shortest path by at
# most 1/cos(pi/8); scaling down restores a lower bound
_GRID_DISCOUNT = math.cos(math.pi / 8.0)
_NBRS8 = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]


@dataclass(frozen=True)
class GridSpec:
    """Search resolution and knobs; cell defaults to delta_s/sqrt(2) so one
    motion step always changes cell or yaw bin."""

    delta_s: float = 2.0
    n_yaw: int = 72
    cell: float = 0.0          # 0 -> derived from delta_s
    sample_ds: float = 0.5     # intermediate collision-sample spacing
    reverse_penalty: float = 1.0
    rs_radius: float = 12.0    # curve heuristic/shot activation distance
    max_steps: int = 256       # time-index cap
    width: float = math.inf
    height: float = math.inf

    def __post_init__(self):
        if self.cell <= 0.0:
            object.__setattr__(self, "cell", self.delta_s / _SQRT2)

    def for_instance(self, inst) -> "GridSpec":
        return dc_replace(self, width=inst.map_width, height=inst.map_height)


class DiscreteState(NamedTuple):
    ix: int
    iy: int
    iyaw: int
    it: int


def discretize(z, grid: GridSpec, it: int = 0) -> DiscreteState:
    """Nearest cell center and yaw bin; exact boundary ties go to the lower index."""
    if hasattr(z, "x"):
        x, y, th = z.x, z.y, z.theta
    else:
        x, y, th = float(z[0]), float(z[1]), float(z[2])
    if not (0.0 <= x <= grid.width and 0.0 <= y <= grid.height):
        raise ValueError("state outside map")

    def axis_index(v: float) -> int:
        s = v / grid.cell
        i = math.floor(s)
        if i == s and i > 0:
            i -= 1
        return int(i)

    w = 2.0 * math.pi / grid.n_yaw
    s = th / w
    lo = math.floor(s + 0.5)
    if lo - 0.5 == s:  # exactly between bins lo-1 and lo
        k = min((int(lo) - 1) % grid.n_yaw, int(lo) % grid.n_yaw)
    else:
        k = int(lo) % grid.n_yaw
    return DiscreteState(axis_index(x), axis_index(y), k, it)


@dataclass(frozen=True)
class Segment:
    """One time quantum of motion: signed direction, steering, arc length.
    direction 0 is a wait (hold the pose for the quantum)."""

    direction: float
    steer: float
    length: float

    @property
    def is_wait(self) -> bool:
        return self.direction == 0.0


@dataclass
class CoarseTrajectory:
    agent_id: int
    states: np.ndarray               # (T+1, 4), phi column zero
    segments: tuple[Segment, ...]    # segments[t] maps states[t] -> states[t+1]
    quantum: float                   # seconds per segment

    @property
    def horizon(self) -> int:
        return len(self.segments)

    @property
    def makespan_s(self) -> float:
        return len(self.segments) * self.quantum


def advance_pose(x, y, th, direction, steer, length, wheelbase):
    """Exact constant-curvature advance by a signed arc length."""
    if direction == 0.0 or length == 0.0:
        return x, y, th
    s = direction * length
    if steer == 0.0:
        return x + s * math.cos(th), y + s * math.sin(th), th
    kappa = math.tan(steer) / wheelbase
    dth = kappa * s
    nx = x + (math.sin(th + dth) - math.sin(th)) / kappa
    ny = y - (math.cos(th + dth) - math.cos(th)) / kappa
    return nx, ny, normalize_angle(th + dth)


class DynamicObstacleSet:
    """Higher-priority trajectories indexed by time quantum, parked at their
    final state beyond their own horizon."""

    def __init__(self, state_arrays):
        arrays = [np.asarray(a, dtype=float) for a in state_arrays]
        self.count = len(arrays)
        if self.count:
            T = max(a.shape[0] for a in arrays)
            poses = np.empty((self.count, T, 3))
            for k, a in enumerate(arrays):
                poses[k, : a.shape[0]] = a[:, :3]
                poses[k, a.shape[0]:] = a[-1, :3]
            self.poses = poses
        else:
            self.poses = np.zeros((0, 1, 3))
        self.horizon = self.poses.shape[1] - 1

    @classmethod
    def from_trajectories(cls, trajectories) -> "DynamicObstacleSet":
        return cls([t.states for t in trajectories])

    def at(self, t: int) -> np.ndarray:
        return self.poses[:, min(t, self.horizon), :]

    def window(self, t0: int) -> np.ndarray:
        """All poses from t0 through the horizon, flattened to (K*(H-t0+1), 3)."""
        t0 = min(t0, self.horizon)
        return self.poses[:, t0:, :].reshape(-1, 3)


@dataclass
class CurveToGoal:
    curve: rs.RsCurve
    samples: np.ndarray


def analytic_expand(z, goal, params: VehicleParams, ds_sample: float = 0.5) -> CurveToGoal | None:
    """Minimal bounded-curvature curve to the goal, finely sampled; the caller
    is responsible for collision-checking it before accepting."""
    curve = rs.shortest_path((z.x, z.y, z.theta), (goal.x, goal.y, goal.theta),
                             params.min_turn_radius)
    if curve is None:
        return None
    samples = rs.sample_curve((z.x, z.y, z.theta), curve, ds_sample)
    return CurveToGoal(curve, samples)


def _split_curve(curve: rs.RsCurve, delta_s: float, wheelbase: float):
    """Cut a curve at cusps and delta_s marks into (direction, steer, length)
    pieces, each at most delta_s long (one time quantum each)."""
    pieces = []
    for seg in curve.segments:
        d = 1.0 if seg.length >= 0.0 else -1.0
        steer = math.atan(seg.curvature * wheelbase)
        rem = abs(seg.length)
        while rem > 1e-9:
            ln = min(delta_s, rem)
            pieces.append((d, steer, ln))
            rem -= ln
    return pieces


class _Primitive(NamedTuple):
    direction: float
    steer: float
    samples: np.ndarray  # (n, 3) local poses along the arc, endpoint last


def _primitive_table(grid: GridSpec, params: VehicleParams):
    acts = []
    n = max(1, int(round(grid.delta_s / grid.sample_ds)))
    sigma = np.arange(1, n + 1) * (grid.delta_s / n)
    for direction in (1.0, -1.0):
        for steer in (0.0, params.phi_max, -params.phi_max):
            s = direction * sigma
            if steer == 0.0:
                local = np.stack([s, np.zeros_like(s), np.zeros_like(s)], axis=1)
            else:
                kappa = math.tan(steer) / params.L
                ths = kappa * s
                local = np.stack([np.sin(ths) / kappa, (1.0 - np.cos(ths)) / kappa, ths], axis=1)
            acts.append(_Primitive(direction, steer, local))
    acts.append(_Primitive(0.0, 0.0, np.zeros((1, 3))))  # wait
    return acts


@dataclass
class LowLevelResult:
    status: str                      # ok | timeout | exhausted
    trajectory: CoarseTrajectory | None
    expansions: int
    elapsed_s: float

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class LowLevelPlanner:
    """Caches per-instance data (obstacle arrays, flood fills, primitives) so
    repeated single-agent searches stay cheap."""

    def __init__(self, instance, grid: GridSpec):
        if not math.isfinite(grid.width):
            grid = grid.for_instance(instance)
        self.inst = instance
        self.grid = grid
        self.params = instance.vehicle
        self.quantum = grid.delta_s / self.params.v_max
        self.r_min = self.params.min_turn_radius
        self._obs = instance.obstacle_arrays()
        prims = _primitive_table(grid, self.params)
        self._prims = prims
        self._stack = np.vstack([p.samples for p in prims])
        slices, row = [], 0
        for p in prims:
            slices.append(slice(row, row + p.samples.shape[0]))
            row += p.samples.shape[0]
        self._slices = slices
        self._end_rows = np.array([s.stop - 1 for s in slices])
        self._fills: dict[int, np.ndarray] = {}
        self._task_by_id = {a.id: a for a in instance.agents}

    # -- heuristic ---------------------------------------------------------

    def _flood(self, agent_id: int) -> np.ndarray:
        """Distances-to-goal on the 8-connected cell grid (meters)."""
        if agent_id in self._fills:
            return self._fills[agent_id]
        cell = self.grid.cell
        nx = max(1, int(math.ceil(self.inst.map_width / cell)))
        ny = max(1, int(math.ceil(self.inst.map_height / cell)))
        cx = (np.arange(nx)[:, None] + 0.5) * cell
        cy = (np.arange(ny)[None, :] + 0.5) * cell
        acx, acy, ahx, ahy = self._obs
        blocked = np.zeros((nx, ny), dtype=bool)
        for k in range(acx.shape[0]):
            blocked |= (np.abs(cx - acx[k]) <= ahx[k]) & (np.abs(cy - acy[k]) <= ahy[k])
        gkey = discretize(self._task_by_id[agent_id].goal, self.grid)
        blocked[gkey.ix, gkey.iy] = False
        dist = np.full((nx, ny), np.inf)
        dist[gkey.ix, gkey.iy] = 0.0
        diag = cell * _SQRT2
        heap = [(0.0, gkey.ix, gkey.iy)]
        while heap:
            d, i, j = heapq.heappop(heap)
            if d > dist[i, j]:
                continue
            for di, dj in _NBRS8:
                ii, jj = i + di, j + dj
                if 0 <= ii < nx and 0 <= jj < ny and not blocked[ii, jj]:
                    nd = d + (diag if di and dj else cell)
                    if nd < dist[ii, jj] - 1e-12:
                        dist[ii, jj] = nd
                        heapq.heappush(heap, (nd, ii, jj))
        self._fills[agent_id] = dist
        return dist

    def _h(self, fill, goal, x, y, th) -> float:
        cell = self.grid.cell
        i = min(int(x / cell), fill.shape[0] - 1)
        j = min(int(y / cell), fill.shape[1] - 1)
        d = fill[i, j]
        hg = max(0.0, d * _GRID_DISCOUNT - cell * _SQRT2) if math.isfinite(d) else 0.0
        de = math.hypot(goal.x - x, goal.y - y)
        if de <= self.grid.rs_radius:
            hr = rs.path_length((x, y, th), (goal.x, goal.y, goal.theta), self.r_min)
        else:
            hr = de
        return max(hg, hr) / self.params.v_max

    def heuristic(self, agent_id: int, pose) -> float:
        """Admissible cost-to-go estimate in seconds (exposed for tests)."""
        fill = self._flood(agent_id)
        goal = self._task_by_id[agent_id].goal
        return self._h(fill, goal, float(pose[0]), float(pose[1]), float(pose[2]))

    # -- main search -------------------------------------------------------

    def plan(self, agent_id: int, dyn: DynamicObstacleSet | None = None,
             time_budget: float | None = None, deadline: float | None = None) -> LowLevelResult:
        t0 = time.monotonic()
        if deadline is None:
            deadline = math.inf if time_budget is None else t0 + time_budget
        if dyn is None:
            dyn = DynamicObstacleSet([])
        grid, par = self.grid, self.params
        task = self._task_by_id[agent_id]
        goal = task.goal
        goal_pose = np.array([goal.x, goal.y, goal.theta])
        fill = self._flood(agent_id)
        quantum = self.quantum
        acx, acy, ahx, ahy = self._obs
        have_obs = acx.shape[0] > 0

        def h_of(x, y, th):
            return self._h(fill, goal, x, y, th)

        # node store (structure-of-arrays; parent chain reconstructs the path)
        nxs: list[float] = []
        nys: list[float] = []
        nths: list[float] = []
        ngs: list[float] = []
        nits: list[int] = []
        nparent: list[int] = []
        nact: list[int] = []
        ndir: list[int] = []     # sign of the last motion; 0 after a wait/start
        best: dict[tuple, float] = {}
        open_heap: list[tuple[float, int, int]] = []
        counter = 0
        expansions = 0

        def push(x, y, th, g, it, parent, act, dirsign, key):
            nonlocal counter
            idx = len(nxs)
            nxs.append(x); nys.append(y); nths.append(th)
            ngs.append(g); nits.append(it); nparent.append(parent); nact.append(act)
            ndir.append(dirsign)
            best[key] = g
            heapq.heappush(open_heap, (g + h_of(x, y, th), counter, idx))
            counter += 1

        def try_shot(x, y, th, it, last_dir):
            curve = rs.shortest_path((x, y, th), (goal.x, goal.y, goal.theta), self.r_min)
            if curve is None:
                return None
            pieces = _split_curve(curve, grid.delta_s, par.L)
            if pieces and last_dir and pieces[0][0] * last_dir < 0:
                return None      # reversal needs a dwell; the wait successor covers it
            # a cusp inside the curve holds the pose for one quantum
            timed = []
            for p in pieces:
                if timed and timed[-1][0] * p[0] < 0:
                    timed.append((0.0, 0.0, 0.0))
                timed.append(p)
            if it + len(timed) > grid.max_steps:
                return None
            fine, _ = _piece_poses(x, y, th, pieces, grid.sample_ds, par.L)
            if fine.shape[0]:
                if discs_outside_map(fine, par, self.inst.map_width, self.inst.map_height).any():
                    return None
                if have_obs and discs_hit_aabbs(fine, par, acx, acy, ahx, ahy).any():
                    return None
            if dyn.count:
                px, py, pth = x, y, th
                for m, (d, steer, ln) in enumerate(timed):
                    px, py, pth = advance_pose(px, py, pth, d, steer, ln, par.L)
                    if discs_hit_discs(np.array([[px, py, pth]]), dyn.at(it + 1 + m), par).any():
                        return None
                # staying parked at the goal must remain safe for all later times
                if discs_hit_discs(goal_pose[None, :], dyn.window(it + len(timed)), par).any():
                    return None
            return timed

        def build(idx, pieces):
            chain = []
            while idx >= 0:
                chain.append(idx)
                idx = nparent[idx]
            chain.reverse()
            states = [(nxs[i], nys[i], nths[i], 0.0) for i in chain]
            segments = [None] * (len(chain) - 1)
            for si, i in enumerate(chain[1:]):
                p = self._prims[nact[i]]
                segments[si] = Segment(p.direction, p.steer,
                                       grid.delta_s if p.direction else 0.0)
            x, y, th = states[-1][0], states[-1][1], states[-1][2]
            for d, steer, ln in pieces:
                x, y, th = advance_pose(x, y, th, d, steer, ln, par.L)
                states.append((x, y, th, 0.0))
                segments.append(Segment(d, steer, ln))
            traj = CoarseTrajectory(agent_id, np.array(states, dtype=float),
                                    tuple(segments), quantum)
            _replay_check(traj, par)
            return traj

        sx, sy = task.start.x, task.start.y
        start_th = normalize_angle(task.start.theta)
        push(sx, sy, start_th, 0.0, 0, -1, -1, 0,
             (discretize((sx, sy, start_th), grid, 0), 0))

        shot_countdown = 0
        pops = 0
        while open_heap:
            pops += 1
            if pops % 64 == 0 and time.monotonic() > deadline:
                return LowLevelResult("timeout", None, expansions, time.monotonic() - t0)
            _, _, idx = heapq.heappop(open_heap)
            x, y, th, it = nxs[idx], nys[idx], nths[idx], nits[idx]
            last_dir = ndir[idx]
            key = (discretize((x, y, th), grid, it), last_dir)
            if ngs[idx] > best.get(key, math.inf):
                continue  # superseded by a cheaper node at the same key

            if shot_countdown <= 0:
                pieces = try_shot(x, y, th, it, last_dir)
                if pieces is not None:
                    return LowLevelResult("ok", build(idx, pieces), expansions,
                                          time.monotonic() - t0)
                shot_countdown = int(math.hypot(goal.x - x, goal.y - y) / grid.delta_s)
            else:
                shot_countdown -= 1

            if it >= grid.max_steps:
                continue
            expansions += 1

            cth, sth = math.cos(th), math.sin(th)
            st = self._stack
            wx = x + st[:, 0] * cth - st[:, 1] * sth
            wy = y + st[:, 0] * sth + st[:, 1] * cth
            poses = np.stack([wx, wy, th + st[:, 2]], axis=1)
            bad = discs_outside_map(poses, par, self.inst.map_width, self.inst.map_height)
            if have_obs:
                bad |= discs_hit_aabbs(poses, par, acx, acy, ahx, ahy)
            if dyn.count:
                hit_dyn = discs_hit_discs(poses[self._end_rows], dyn.at(it + 1), par).any(axis=1)
            else:
                hit_dyn = np.zeros(len(self._prims), dtype=bool)

            g = ngs[idx]
            for a, prim in enumerate(self._prims):
                if hit_dyn[a] or bad[self._slices[a]].any():
                    continue
                if prim.direction and last_dir and prim.direction * last_dir < 0:
                    continue  # reversal only out of a dwell
                er = self._end_rows[a]
                ex, ey = wx[er], wy[er]
                eth = normalize_angle(th + st[er, 2])
                g2 = g + quantum * (grid.reverse_penalty if prim.direction < 0 else 1.0)
                dir2 = int(prim.direction) if prim.direction else 0
                key2 = (discretize((ex, ey, eth), grid, it + 1), dir2)
                if g2 < best.get(key2, math.inf) - 1e-12:
                    push(ex, ey, eth, g2, it + 1, idx, a, dir2, key2)

        return LowLevelResult("exhausted", None, expansions, time.monotonic() - t0)


def _piece_poses(x, y, th, pieces, ds, wheelbase):
    """Fine poses along curve pieces (for static checks) and piece endpoints."""
    fine, ends = [], []
    for d, steer, ln in pieces:
        n = max(1, int(math.ceil(ln / ds - 1e-9)))
        for m in range(1, n + 1):
            fine.append(advance_pose(x, y, th, d, steer, ln * m / n, wheelbase))
        x, y, th = fine[-1]
        ends.append((x, y, th))
    if not fine:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.array(fine), np.array(ends)


def _replay_check(traj: CoarseTrajectory, params: VehicleParams):
    """Forward-simulating the segments must reproduce the stored states."""
    x, y, th = traj.states[0, 0], traj.states[0, 1], traj.states[0, 2]
    for t, seg in enumerate(traj.segments):
        x, y, th = advance_pose(x, y, th, seg.direction, seg.steer, seg.length, params.L)
        s = traj.states[t + 1]
        dth = abs(normalize_angle(th - s[2]))
        if max(abs(x - s[0]), abs(y - s[1]), dth) > 1e-9:
            raise RuntimeError("coarse trajectory replay mismatch")


def plan_single(instance, agent_id: int, dyn: DynamicObstacleSet | None,
                grid: GridSpec, time_budget: float | None = None,
                planner: LowLevelPlanner | None = None) -> LowLevelResult:
    """One-shot single-agent search; reuse a LowLevelPlanner when calling repeatedly."""
    if planner is None:
        planner = LowLevelPlanner(instance, grid)
    return planner.plan(agent_id, dyn, time_budget=time_budget)
