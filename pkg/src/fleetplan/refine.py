"""Sequential convex refinement of coarse multi-vehicle plans.

The coarse search output is only resolution-feasible: between its samples the
vehicles may brush each other (type A), clip obstacles (type B), or poke out
of the map (type C).  This module interpolates the coarse plan onto a fine
uniform time grid, splits the joint problem into independent per-agent QPs
(separating planes between neighbors, trust regions, axis-aligned corridors),
and iterates the QPs until the independent validator accepts the rolled-out
plan.
"""

from __future__ import annotations

import math
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import VehicleParams, disc_centers_arr
from .instance import MvtpInstance, Plan, validate_plan
from .qp import QpProblem, solve as qp_solve

_SQRT2 = math.sqrt(2.0)


def _clip(x, lo, hi):
    return lo if x < lo else hi if x > hi else x


class RelocationError(RuntimeError):
    """No safe position found for a corridor seed point."""


@dataclass
class RefineConfig:
    n_interp: int = 3                 # points inserted per coarse segment
    R_trust: float = 0.6              # meters, per disc coordinate
    alpha_v: float = 1.0
    alpha_omega: float = 1.0
    max_sqp_iters: int = 10
    convergence_eps: float | None = None   # default 1e-3 * sqrt(#vars)
    corridor_max_extent: float = 10.0

    def __post_init__(self):
        if self.n_interp < 0:
            raise ValueError("n_interp must be >= 0")
        for name in ("R_trust", "alpha_v", "alpha_omega", "corridor_max_extent"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_sqp_iters < 1:
            raise ValueError("max_sqp_iters must be >= 1")
        if self.convergence_eps is not None and self.convergence_eps <= 0:
            raise ValueError("convergence_eps must be positive")


@dataclass
class InterpolatedPlan:
    """Per-agent state/control arrays on a common uniform grid.

    Headings are kept unwrapped (continuous along each trajectory) so that the
    later linearizations never see artificial 2*pi jumps.
    """

    agent_ids: list
    states: np.ndarray      # (M, T, 4)
    controls: np.ndarray    # (M, T-1, 2)
    dt: float

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @property
    def tau_f(self) -> float:
        return (self.states.shape[1] - 1) * self.dt

    def index(self, agent_id) -> int:
        return self.agent_ids.index(agent_id)

    def as_plan(self) -> Plan:
        return Plan(
            states=[self.states[m] for m in range(self.states.shape[0])],
            controls=[self.controls[m] for m in range(self.controls.shape[0])],
            dt=self.dt,
            tau_f=self.tau_f,
        )


def _arc_sample(x, y, th, direction, steer, s, wheelbase):
    # exact constant-curvature advance, heading left unwrapped
    if direction == 0.0 or s == 0.0:
        return x, y, th
    ds = direction * s
    if steer == 0.0:
        return x + ds * math.cos(th), y + ds * math.sin(th), th
    kappa = math.tan(steer) / wheelbase
    dth = kappa * ds
    nx = x + (math.sin(th + dth) - math.sin(th)) / kappa
    ny = y - (math.cos(th + dth) - math.cos(th)) / kappa
    return nx, ny, th + dth


def interpolate(trajs_by_id, params: VehicleParams, cfg: RefineConfig,
                order=None) -> InterpolatedPlan:
    """Resample each coarse trajectory along its exact arcs.

    Every coarse segment is split into n_interp+1 sub-steps of duration
    dt = quantum/(n_interp+1); all agents are padded to the longest horizon by
    parking at their final pose.
    """
    order = sorted(trajs_by_id) if order is None else list(order)
    trajs = [trajs_by_id[a] for a in order]
    quantum = trajs[0].quantum
    sub = cfg.n_interp + 1
    dt = quantum / sub
    T = max(tr.horizon for tr in trajs) * sub + 1
    M = len(trajs)
    states = np.zeros((M, T, 4))
    controls = np.zeros((M, max(T - 1, 0), 2))

    for m, tr in enumerate(trajs):
        x, y, th = (float(tr.states[0, 0]), float(tr.states[0, 1]),
                    float(tr.states[0, 2]))
        states[m, 0, :3] = (x, y, th)
        idx = 0
        for seg in tr.segments:
            step = seg.length / sub
            v = seg.direction * step / dt
            x0, y0, th0 = x, y, th
            for j in range(sub):
                controls[m, idx, 0] = v
                states[m, idx, 3] = 0.0 if seg.is_wait else seg.steer
                x, y, th = _arc_sample(x0, y0, th0, seg.direction, seg.steer,
                                       (j + 1) * step, params.L)
                idx += 1
                states[m, idx, :3] = (x, y, th)
        if idx + 1 < T:
            states[m, idx + 1:] = states[m, idx]
        # steering rate implied by the phi profile (spikes at segment joints
        # are fine: this is a linearization point, not a feasible plan)
        if T > 1:
            controls[m, :, 1] = np.diff(states[m, :, 3]) / dt
    return InterpolatedPlan(list(order), states, controls, dt)


def _track_guess(states, controls, dt, params: VehicleParams):
    """Re-drive one sampled trajectory with the discrete Euler model.

    The interpolated guess is arc-exact, starts mid-steer and switches phi
    instantaneously between segments, none of which the Euler recursion with
    box-limited controls can reproduce.  Instead of chasing samples with a
    feedback tracker, replay the guess's own piecewise-constant controls:
    nominal speed per step, nominal steer smoothed into rate-feasible ramps
    centered on each segment junction (a centered ramp cancels the heading
    error of the swing to second order), pre-wound through rest spans.  A
    small-gain lateral/heading regulator rides on top to bleed off the
    residual drift; it is weak enough never to fight the feedforward.

    The result is dynamically exact by construction — a valid linearization
    point with no defect to absorb — and stays within a small fraction of
    the trust region of the guess; the residual goal mismatch is left for
    the QP's own boundary handling on the final approach.
    """
    T = states.shape[0]
    out_s = states.copy()
    out_u = controls.copy() if controls.size else controls
    if T < 2:
        return out_s, out_u
    n = T - 1
    L = params.L
    vmax, wmax, pmax = params.v_max, params.omega_max, params.phi_max
    rate = wmax * dt

    v_nom = np.clip(controls[:, 0], -vmax, vmax)
    moving = np.abs(v_nom) > 1e-9
    # steer per step: segment steer while moving, next segment's steer
    # carried backward through rest spans (pre-wind; trailing rest holds 0)
    prof = np.clip(states[:n, 3], -pmax, pmax)
    carry = 0.0
    for t in range(n - 1, -1, -1):
        if moving[t]:
            carry = prof[t]
        else:
            prof[t] = carry
    # center a rate-limited ramp on every junction between moving steps;
    # segments span several steps while ramps span at most wmax/phi-swing
    # of them, so ramps never collide
    ff = prof.copy()
    for J in range(1, n):
        a, b = prof[J - 1], prof[J]
        if a == b or not (moving[J - 1] and moving[J]):
            continue
        sg = 1.0 if b > a else -1.0
        span = (b - a) / (sg * rate)
        t0 = J - 0.5 * span
        lo = max(0, int(math.floor(t0)) - 1)
        hi = min(n, int(math.ceil(t0 + span)) + 1)
        for t in range(lo, hi):
            ff[t] = a + sg * rate * _clip(t - t0, 0.0, span)

    x, y = float(states[0, 0]), float(states[0, 1])
    th, ph = float(states[0, 2]), 0.0
    for t in range(n):
        v = float(v_nom[t])
        fb = 0.0
        if moving[t]:
            # error in the frame of the time-matched guess pose; reverse
            # motion flips the sign of the heading damping term
            cth, sth = math.cos(states[t, 2]), math.sin(states[t, 2])
            lat = -sth * (x - states[t, 0]) + cth * (y - states[t, 1])
            eth = math.remainder(th - states[t, 2], 2.0 * math.pi)
            s = 1.0 if v > 0.0 else -1.0
            fb = _clip(-0.12 * lat - s * 0.5 * eth, -0.2, 0.2)
        want = (ff[min(t + 1, n - 1)] if t + 1 < n else 0.0) + fb
        ph_next = _clip(_clip(want, -pmax, pmax), ph - rate, ph + rate)
        out_s[t] = (x, y, th, ph)
        out_u[t] = (v, (ph_next - ph) / dt)
        x += dt * v * math.cos(th)
        y += dt * v * math.sin(th)
        th += dt * v * math.tan(ph) / L
        ph = ph_next
    out_s[T - 1] = (x, y, th, ph)
    return out_s, out_u


def classify_guess(plan: InterpolatedPlan, instance: MvtpInstance) -> dict:
    """Count the minor-collision types in the interpolated guess:
    A inter-vehicle, B static obstacle, C off-map."""
    rep = validate_plan(instance, plan.as_plan())
    kinds = {"inter_agent": "A", "static": "B", "off_map": "C"}
    out = {"A": 0, "B": 0, "C": 0}
    for v in rep.violations:
        k = kinds.get(v.kind)
        if k:
            out[k] += 1
    return out


# ---------------------------------------------------------------------------
# neighbor pairs and separating planes


def _all_discs(plan: InterpolatedPlan, params) -> np.ndarray:
    return np.stack([disc_centers_arr(plan.states[m], params)
                     for m in range(plan.states.shape[0])])  # (M,T,2,2)


def _pair_min_dist(da, db):
    # (T,2,2) x (T,2,2) -> (T,) min over the four disc-center combinations
    d = da[:, :, None, :] - db[:, None, :, :]
    return np.sqrt((d * d).sum(axis=-1)).min(axis=(1, 2))


def find_neighbor_pairs(plan: InterpolatedPlan, params: VehicleParams,
                        cfg: RefineConfig):
    """All (i, j, t), i < j, whose clearance is at most 2*sqrt(2)*R_trust.

    A per-timestep spatial hash on rear-axle positions prunes the quadratic
    scan; candidates are then filtered with the exact disc distance.
    """
    thresh = 2.0 * _SQRT2 * cfg.R_trust
    center_gap = thresh + 2.0 * params.disc_radius
    M, T = plan.states.shape[:2]
    ids = plan.agent_ids
    discs = _all_discs(plan, params)
    out = []
    if M < 2:
        return out
    reach = max(abs(params.front_disc_offset), abs(params.rear_disc_offset))
    cell = center_gap + 2.0 * reach  # axle distance bound for any candidate
    xy = plan.states[:, :, :2]
    cand = set()
    for t in range(T):
        buckets = defaultdict(list)
        for m in range(M):
            buckets[(int(xy[m, t, 0] // cell), int(xy[m, t, 1] // cell))].append(m)
        for (cx, cy), members in buckets.items():
            near = []
            for ox in (-1, 0, 1):
                for oy in (-1, 0, 1):
                    near.extend(buckets.get((cx + ox, cy + oy), ()))
            for a in members:
                for b in near:
                    if a < b:
                        cand.add((a, b))
    for a, b in sorted(cand):
        dmin = _pair_min_dist(discs[a], discs[b]) - 2.0 * params.disc_radius
        for t in np.nonzero(dmin <= thresh)[0]:
            out.append((ids[a], ids[b], int(t)))
    out.sort()
    return out


@dataclass
class SeparationConstraints:
    """Half-planes on disc centers, grouped per agent and timestamp.

    planes[agent_id][t] is a list of (disc, nx, ny, rhs) meaning
    nx*Y[disc].x + ny*Y[disc].y <= rhs.
    """

    planes: dict


def build_separation(pairs, plan: InterpolatedPlan, params: VehicleParams,
                     cfg: RefineConfig) -> SeparationConstraints:
    """Perpendicular-bisector planes for every neighbor pair, offset by the
    disc radius toward the owning agent; each agent of the pair gets the
    mirrored constraint, so the planes partition the gap."""
    discs = _all_discs(plan, params)
    offset = params.disc_radius
    planes = {a: defaultdict(list) for a in plan.agent_ids}
    for (i, j, t) in pairs:
        mi, mj = plan.index(i), plan.index(j)
        for di in (0, 1):
            for dj in (0, 1):
                a = discs[mi, t, di]
                b = discs[mj, t, dj]
                n = b - a
                ln = math.hypot(n[0], n[1])
                if ln < 1e-9:
                    # coincident centers: fall back to the rear-axle bisector,
                    # then to an arbitrary 1e-3 jitter direction
                    n = plan.states[mj, t, :2] - plan.states[mi, t, :2]
                    ln = math.hypot(n[0], n[1])
                    if ln < 1e-9:
                        n = np.array([1e-3, 0.0])
                        ln = 1e-3
                ux, uy = n[0] / ln, n[1] / ln
                mid = 0.5 * (a + b)
                rhs = ux * mid[0] + uy * mid[1]
                planes[i][t].append((di, ux, uy, rhs - offset))
                planes[j][t].append((dj, -ux, -uy, -rhs - offset))
    return SeparationConstraints({a: dict(p) for a, p in planes.items()})


# ---------------------------------------------------------------------------
# corridors


def _point_clearance(px, py, obs):
    acx, acy, ahx, ahy = obs
    dx = np.maximum(np.abs(px - acx) - ahx, 0.0)
    dy = np.maximum(np.abs(py - acy) - ahy, 0.0)
    return np.hypot(dx, dy)


def _safe(px, py, map_wh, obs, r) -> bool:
    w, h = map_wh
    if px < r or px > w - r or py < r or py > h - r:
        return False
    if obs[0].size == 0:
        return True
    return bool(_point_clearance(px, py, obs).min() >= r)


def relocate_unsafe_point(p, map_wh, obstacles, r, max_extra=6.0):
    """Move a corridor seed into free eroded space.

    Off-map points are projected onto the eroded boundary.  A point inside a
    dilated obstacle is pushed radially out of that obstacle's circumscribed
    circle; if other obstacles still cover it, the point is rotated around the
    obstacle center in fixed angular increments at escalating radii.
    """
    w, h = map_wh
    acx, acy, ahx, ahy = obstacles
    px = min(max(float(p[0]), r), w - r)
    py = min(max(float(p[1]), r), h - r)
    if acx.size == 0 or _point_clearance(px, py, obstacles).min() >= r:
        return np.array([px, py])
    k = int(np.argmin(_point_clearance(px, py, obstacles)))
    circ = math.hypot(ahx[k], ahy[k]) + r
    base = math.atan2(py - acy[k], px - acx[k])
    if math.hypot(px - acx[k], py - acy[k]) < 1e-9:
        base = 0.0
    offs = np.array([0.0])
    steps = np.arange(1, 12)
    offs = np.concatenate([offs, np.stack([steps, -steps], 1).ravel() * (math.pi / 12.0)])
    radius = circ + 1e-6
    while radius <= circ + max_extra:
        ang = base + offs
        cx = acx[k] + radius * np.cos(ang)
        cy = acy[k] + radius * np.sin(ang)
        for qx, qy in zip(cx, cy):
            if _safe(qx, qy, map_wh, obstacles, r):
                return np.array([qx, qy])
        radius += 0.25 * r
    raise RelocationError(f"no safe relocation near ({p[0]:.2f}, {p[1]:.2f})")


def _grow(u0, u1, v_start, v_limit, ocu, ocv, hu, hv, r):
    """Largest v_hi <= v_limit keeping the box [u0,u1] x [.., v_hi] clear of
    every obstacle dilated by r, growing from the current edge v_start.

    The entry box is clear, so an obstacle binds only when its dilated
    content inside the strip lies wholly at or beyond v_start; grazing
    contact points inside the box's own range (left by a previous growth
    direction capping exactly on a boundary) must not bind."""
    if ocu.size == 0:
        return max(v_start, v_limit)
    du = np.maximum(np.maximum(u0 - (ocu + hu), (ocu - hu) - u1), 0.0)
    near = du < r
    if not near.any():
        return max(v_start, v_limit)
    lift = np.sqrt(np.maximum(r * r - du[near] ** 2, 0.0))
    vlo = ocv[near] - hv[near] - lift
    binding = vlo >= v_start - 1e-9
    if not binding.any():
        return max(v_start, v_limit)
    return max(v_start, min(v_limit, float(vlo[binding].min())))


@dataclass
class CorridorBoxes:
    """Axis-aligned bounds on the disc-center vector Y=[xF,yF,xR,yR]."""

    lo: np.ndarray   # (T, 4)
    hi: np.ndarray   # (T, 4)


def build_corridor(states, instance: MvtpInstance, cfg: RefineConfig) -> CorridorBoxes:
    """One safe box per timestamp and disc around the current iterate.

    Starting from the (relocated) disc center, the box edges are extended
    clockwise — up, right, down, left — until a dilated obstacle, the eroded
    map boundary, or corridor_max_extent stops them.
    """
    params = instance.vehicle
    r = params.disc_radius
    obs = instance.obstacle_arrays()
    acx, acy, ahx, ahy = obs
    w, h = instance.map_width, instance.map_height
    ext = cfg.corridor_max_extent
    Y = disc_centers_arr(np.asarray(states), params)   # (T, 2, 2)
    T = Y.shape[0]
    lo = np.empty((T, 4))
    hi = np.empty((T, 4))
    for t in range(T):
        for d in (0, 1):
            p = Y[t, d]
            if not _safe(p[0], p[1], (w, h), obs, r):
                p = relocate_unsafe_point(p, (w, h), obs, r, max_extra=ext)
            x0 = x1 = float(p[0])
            y0 = y1 = float(p[1])
            y1 = _grow(x0, x1, y1, min(h - r, p[1] + ext), acx, acy, ahx, ahy, r)
            x1 = _grow(y0, y1, x1, min(w - r, p[0] + ext), acy, acx, ahy, ahx, r)
            y0 = -_grow(x0, x1, -y0, min(-r, -(p[1] - ext)), acx, -acy, ahx, ahy, r)
            x0 = -_grow(y0, y1, -x0, min(-r, -(p[0] - ext)), acy, -acx, ahy, ahx, r)
            lo[t, 2 * d:2 * d + 2] = (x0, y0)
            hi[t, 2 * d:2 * d + 2] = (x1, y1)
    return CorridorBoxes(lo, hi)


# ---------------------------------------------------------------------------
# linearization


@dataclass
class LinearDynamics:
    A: np.ndarray   # (T-1, 4, 4) state Jacobians
    B: np.ndarray   # (T-1, 4, 2) control Jacobians
    c: np.ndarray   # (T-1, 4)    Taylor remainders
    D: np.ndarray   # (T, 4, 4)   state -> disc-center Jacobians
    e: np.ndarray   # (T, 4)      disc-map remainders


def _euler_step_arr(z, u, L, dt):
    out = np.empty_like(z)
    out[:, 0] = z[:, 0] + u[:, 0] * np.cos(z[:, 2]) * dt
    out[:, 1] = z[:, 1] + u[:, 0] * np.sin(z[:, 2]) * dt
    out[:, 2] = z[:, 2] + u[:, 0] * np.tan(z[:, 3]) / L * dt
    out[:, 3] = z[:, 3] + u[:, 1] * dt
    return out


def linearize_dynamics(states, controls, params: VehicleParams, dt) -> LinearDynamics:
    """Exact Jacobians of the Euler step and of the state->disc map at the
    iterate, with remainders chosen so the affine models reproduce the
    nonlinear maps exactly at the linearization point."""
    z = np.asarray(states, dtype=float)
    u = np.asarray(controls, dtype=float)
    T = z.shape[0]
    L = params.L
    th, ph, v = z[:-1, 2], z[:-1, 3], u[:, 0]
    A = np.tile(np.eye(4), (T - 1, 1, 1))
    A[:, 0, 2] = -v * np.sin(th) * dt
    A[:, 1, 2] = v * np.cos(th) * dt
    A[:, 2, 3] = v * dt / (L * np.cos(ph) ** 2)
    B = np.zeros((T - 1, 4, 2))
    B[:, 0, 0] = np.cos(th) * dt
    B[:, 1, 0] = np.sin(th) * dt
    B[:, 2, 0] = np.tan(ph) / L * dt
    B[:, 3, 1] = dt
    f = _euler_step_arr(z[:-1], u, L, dt)
    c = f - np.einsum("tij,tj->ti", A, z[:-1]) - np.einsum("tij,tj->ti", B, u)

    tha = z[:, 2]
    fo, ro = params.front_disc_offset, params.rear_disc_offset
    D = np.zeros((T, 4, 4))
    D[:, 0, 0] = D[:, 1, 1] = D[:, 2, 0] = D[:, 3, 1] = 1.0
    D[:, 0, 2] = -fo * np.sin(tha)
    D[:, 1, 2] = fo * np.cos(tha)
    D[:, 2, 2] = -ro * np.sin(tha)
    D[:, 3, 2] = ro * np.cos(tha)
    Y = disc_centers_arr(z, params).reshape(T, 4)
    e = Y - np.einsum("tij,tj->ti", D, z)
    return LinearDynamics(A, B, c, D, e)


# ---------------------------------------------------------------------------
# per-agent QP


def assemble_qp(start, goal, states, controls, lin: LinearDynamics,
                corridor: CorridorBoxes, planes_by_t, Y0, params: VehicleParams,
                cfg: RefineConfig, vbar0: float):
    """Quadratic subproblem for one agent at the current iterate.

    Decision vector: all states then all controls.  Returns None when the
    corridor/trust intersection is empty (the iterate has been squeezed out).
    Constraint rows, in order: linearized dynamics equalities, start and goal
    equalities, control boxes, steering-angle boxes, disc boxes (corridor
    intersected with the trust region), separating planes.
    """
    z = np.asarray(states, dtype=float)
    T = z.shape[0]
    nz, nu = 4 * T, 2 * (T - 1)
    n = nz + nu

    ylo = np.maximum(corridor.lo, Y0 - cfg.R_trust)
    yhi = np.minimum(corridor.hi, Y0 + cfg.R_trust)
    gap = ylo - yhi
    if np.any(gap > 1e-9):
        return None
    mid = 0.5 * (ylo + yhi)
    tight = gap > 0
    ylo[tight] = mid[tight]
    yhi[tight] = mid[tight]

    # objective: alpha_v * sum dv^2 + alpha_omega * sum omega^2, with the
    # first dv measured against the previous iterate's initial speed
    nv = T - 1
    rows, cols, vals = [], [], []
    vidx = nz + 2 * np.arange(nv)
    main = np.full(nv, 2.0)
    main[-1] = 1.0
    rows.append(vidx); cols.append(vidx); vals.append(2.0 * cfg.alpha_v * main)
    if nv > 1:
        rows.append(vidx[:-1]); cols.append(vidx[1:])
        vals.append(np.full(nv - 1, -2.0 * cfg.alpha_v))
        rows.append(vidx[1:]); cols.append(vidx[:-1])
        vals.append(np.full(nv - 1, -2.0 * cfg.alpha_v))
    widx = vidx + 1
    rows.append(widx); cols.append(widx)
    vals.append(np.full(nv, 2.0 * cfg.alpha_omega))
    P = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsc()
    q = np.zeros(n)
    q[nz] = -2.0 * cfg.alpha_v * vbar0

    ar, ac, av, lb, ub = [], [], [], [], []
    row0 = 0

    # dynamics equalities
    nd = 4 * (T - 1)
    tt = np.repeat(np.arange(T - 1), 4)
    ii = np.tile(np.arange(4), T - 1)
    rdyn = np.arange(nd)
    ar.append(rdyn); ac.append(4 * (tt + 1) + ii); av.append(np.ones(nd))
    ar.append(np.repeat(rdyn, 4))
    ac.append((4 * np.repeat(tt, 4) + np.tile(np.arange(4), nd)))
    av.append(-lin.A.reshape(-1))
    ar.append(np.repeat(rdyn, 2))
    ac.append(nz + 2 * np.repeat(tt, 2) + np.tile(np.arange(2), nd))
    av.append(-lin.B.reshape(-1))
    lb.append(lin.c.reshape(-1)); ub.append(lin.c.reshape(-1))
    row0 += nd

    # endpoint equalities; the goal heading is lifted to the iterate's branch
    g_th = goal[2] + 2.0 * math.pi * round((z[-1, 2] - goal[2]) / (2.0 * math.pi))
    bc = np.array([start[0], start[1], start[2], 0.0,
                   goal[0], goal[1], g_th, 0.0])
    ar.append(row0 + np.arange(8))
    ac.append(np.concatenate([np.arange(4), 4 * (T - 1) + np.arange(4)]))
    av.append(np.ones(8))
    lb.append(bc); ub.append(bc)
    row0 += 8

    # control boxes
    ar.append(row0 + np.arange(nu)); ac.append(nz + np.arange(nu))
    av.append(np.ones(nu))
    cb = np.tile([params.v_max, params.omega_max], T - 1)
    lb.append(-cb); ub.append(cb)
    row0 += nu

    # steering-angle boxes
    ar.append(row0 + np.arange(T)); ac.append(4 * np.arange(T) + 3)
    av.append(np.ones(T))
    lb.append(np.full(T, -params.phi_max)); ub.append(np.full(T, params.phi_max))
    row0 += T

    # disc boxes through the linearized state->disc map
    ny = 4 * T
    ry = np.arange(ny)
    ar.append(row0 + np.repeat(ry, 4))
    ac.append(4 * np.repeat(np.repeat(np.arange(T), 4), 4)
              + np.tile(np.arange(4), ny))
    av.append(lin.D.reshape(-1))
    lb.append((ylo - lin.e).reshape(-1)); ub.append((yhi - lin.e).reshape(-1))
    row0 += ny

    # separating planes
    prow, pcol, pval, pub = [], [], [], []
    for t, plist in planes_by_t.items():
        for (d, ux, uy, rhs) in plist:
            coeff = ux * lin.D[t, 2 * d] + uy * lin.D[t, 2 * d + 1]
            prow.extend([row0] * 4)
            pcol.extend(4 * t + np.arange(4))
            pval.extend(coeff)
            pub.append(rhs - ux * lin.e[t, 2 * d] - uy * lin.e[t, 2 * d + 1])
            row0 += 1
    if prow:
        ar.append(np.array(prow)); ac.append(np.array(pcol))
        av.append(np.array(pval))
        lb.append(np.full(len(pub), -np.inf)); ub.append(np.array(pub))

    A = sp.coo_matrix((np.concatenate(av),
                       (np.concatenate(ar), np.concatenate(ac))),
                      shape=(row0, n)).tocsc()
    return QpProblem(P, q, A, np.concatenate(lb), np.concatenate(ub))


def _unpack(x, T):
    return x[:4 * T].reshape(T, 4), x[4 * T:].reshape(T - 1, 2)


# ---------------------------------------------------------------------------
# exact rollout and the SQP loop


def rollout_controls(start, controls, params: VehicleParams, dt):
    """Integrate the clipped controls exactly from the start pose.

    Clipping keeps v and omega inside their boxes and prevents phi from
    leaving its range, so the produced plan is consistent with the verifier's
    step check by construction.
    """
    u = np.array(controls, dtype=float)
    T1 = u.shape[0]
    z = np.empty((T1 + 1, 4))
    z[0] = (start[0], start[1], start[2], 0.0)
    for t in range(T1):
        x, y, th, ph = z[t]
        v = min(max(u[t, 0], -params.v_max), params.v_max)
        w = min(max(u[t, 1], -params.omega_max), params.omega_max)
        w = min(max(w, (-params.phi_max - ph) / dt), (params.phi_max - ph) / dt)
        u[t] = (v, w)
        z[t + 1] = (x + v * math.cos(th) * dt,
                    y + v * math.sin(th) * dt,
                    th + v * math.tan(ph) / params.L * dt,
                    ph + w * dt)
    return z, u


@dataclass
class RefineTelemetry:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    qp_time_s: float = 0.0
    guess_collisions: dict = field(default_factory=dict)
    qp_rejections: list = field(default_factory=list)   # (agent, iteration)
    failure: dict | None = None


@dataclass
class RefineResult:
    status: str            # ok | qp_infeasible | relocation_failed | not_feasible | timeout
    plan: Plan | None
    telemetry: RefineTelemetry

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def sqp_refine(trajs_by_id, instance: MvtpInstance, cfg: RefineConfig | None = None,
               deadline=math.inf) -> RefineResult:
    """Iterate per-agent QPs until the rolled-out plan verifies.

    Separating planes and trust regions are anchored at the interpolated
    initial guess; corridors and linearizations are rebuilt from the current
    iterate each round.  Stops on verifier acceptance, iterate convergence,
    or the iteration cap; only a verifier-clean plan counts as success.
    """
    cfg = cfg or RefineConfig()
    params = instance.vehicle
    tele = RefineTelemetry()
    order = [a.id for a in instance.agents]
    guess = interpolate(trajs_by_id, params, cfg, order=order)
    tele.guess_collisions = classify_guess(guess, instance)
    M, T = guess.states.shape[:2]
    dt = guess.dt

    if not validate_plan(instance, guess.as_plan()).violations:
        return RefineResult("ok", guess.as_plan(), tele)
    if T < 2:
        tele.failure = {"reason": "degenerate_guess", "iteration": 0}
        return RefineResult("not_feasible", None, tele)

    # one extra quantum parked at the goal: the rollout below may land a hair
    # off, and the rest steps give the QP two-sided reach to close that gap
    pad = cfg.n_interp + 1
    guess = InterpolatedPlan(
        order,
        np.concatenate([guess.states,
                        np.repeat(guess.states[:, -1:], pad, axis=1)], axis=1),
        np.concatenate([guess.controls, np.zeros((M, pad, 2))], axis=1),
        dt)
    T = guess.states.shape[1]

    # linearize around an Euler re-drive of the guess: box-feasible controls,
    # exact start pose, no dynamics defect at any step
    base_s = np.empty_like(guess.states)
    base_u = np.empty_like(guess.controls)
    for m in range(M):
        base_s[m], base_u[m] = _track_guess(
            guess.states[m], guess.controls[m], dt, params)
    base = InterpolatedPlan(order, base_s, base_u, dt)

    pairs = find_neighbor_pairs(base, params, cfg)
    sep = build_separation(pairs, base, params, cfg)
    Y0 = {a: disc_centers_arr(base.states[m], params).reshape(T, 4)
          for m, a in enumerate(order)}

    nvars = M * (6 * T - 2)
    eps = cfg.convergence_eps
    if eps is None:
        eps = 1e-3 * math.sqrt(nvars)

    cur_s = base_s
    cur_u = base_u
    warm = {}

    def fail(status, agent, k, reason):
        tele.failure = {"reason": reason, "agent": agent, "iteration": k}
        return RefineResult(status, None, tele)

    for k in range(cfg.max_sqp_iters):
        if time.monotonic() > deadline:
            return fail("timeout", None, k, "deadline exceeded")
        new_s = np.empty_like(cur_s)
        new_u = np.empty_like(cur_u)
        for m, task in enumerate(instance.agents):
            aid = task.id
            try:
                corridor = build_corridor(cur_s[m], instance, cfg)
            except RelocationError as exc:
                return fail("relocation_failed", aid, k, str(exc))
            lin = linearize_dynamics(cur_s[m], cur_u[m], params, dt)
            qp = assemble_qp(task.start.as_array(), task.goal.as_array(),
                             cur_s[m], cur_u[m], lin, corridor,
                             sep.planes.get(aid, {}), Y0[aid], params, cfg,
                             vbar0=float(cur_u[m, 0, 0]))
            if qp is None:
                sol = None
            else:
                t0 = time.monotonic()
                sol = qp_solve(qp, warm=warm.get(aid),
                               eps_abs=1e-5, eps_rel=1e-5, max_iters=4000)
                tele.qp_time_s += time.monotonic() - t0
            if sol is None or sol.status == "primal_infeasible":
                # an over-constrained agent keeps its iterate this round;
                # neighbors still move, which often unblocks it later
                tele.qp_rejections.append((aid, k))
                new_s[m], new_u[m] = cur_s[m], cur_u[m]
                continue
            warm[aid] = sol
            new_s[m], new_u[m] = _unpack(sol.x, T)
        resid = float(np.sqrt(((new_s - cur_s) ** 2).sum()
                              + ((new_u - cur_u) ** 2).sum()))
        tele.residuals.append(resid)
        tele.iterations = k + 1
        cur_s, cur_u = new_s, new_u

        zs, us = [], []
        for m, task in enumerate(instance.agents):
            z, u = rollout_controls(task.start.as_array(), cur_u[m], params, dt)
            zs.append(z); us.append(u)
        plan = Plan(states=zs, controls=us, dt=dt, tau_f=(T - 1) * dt)
        if not validate_plan(instance, plan).violations:
            return RefineResult("ok", plan, tele)
        if resid < eps:
            break
    if tele.qp_rejections:
        agent, k = tele.qp_rejections[0]
        return fail("qp_infeasible", agent, k, "QP primal infeasible")
    return fail("not_feasible", None, tele.iterations,
                "iterate converged or capped while still infeasible")
