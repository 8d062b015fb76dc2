"""Independent oracles used by the unit and acceptance suites.

Everything here is deliberately written from first principles (dense sampling,
dense linear algebra, brute-force enumeration) rather than reusing library
internals, so the implementation and its checks stay on separate routes.
"""
from __future__ import annotations

import math

import numpy as np


def point_in_box(px: float, py: float, cx: float, cy: float, hx: float, hy: float,
                 heading: float, eps: float = 0.0) -> bool:
    """Closed-set membership of a point in an oriented rectangle."""
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = px - cx, py - cy
    return abs(dx * c + dy * s) <= hx + eps and abs(-dx * s + dy * c) <= hy + eps


def box_sample_points(cx, cy, hx, hy, heading, n=12) -> np.ndarray:
    """Grid of sample points covering a rectangle, corners and edges included."""
    u = np.linspace(-hx, hx, n)
    v = np.linspace(-hy, hy, n)
    uu, vv = np.meshgrid(u, v)
    c, s = math.cos(heading), math.sin(heading)
    xs = cx + uu * c - vv * s
    ys = cy + uu * s + vv * c
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def sampled_overlap(a, b, n=12) -> bool:
    """Point-sampling overlap oracle for two oriented rectangles.

    Finds an overlap whenever a sample point of one box lies inside the other
    (closed membership).  Misses only overlaps thinner than the sampling grid,
    so it can under-report but never over-report.
    """
    for pa in box_sample_points(a.cx, a.cy, a.hx, a.hy, a.heading, n):
        if point_in_box(pa[0], pa[1], b.cx, b.cy, b.hx, b.hy, b.heading):
            return True
    for pb in box_sample_points(b.cx, b.cy, b.hx, b.hy, b.heading, n):
        if point_in_box(pb[0], pb[1], a.cx, a.cy, a.hx, a.hy, a.heading):
            return True
    return False


def brute_pair_distance(zi, zj, params) -> float:
    """Enumerate all four disc-center pairs explicitly."""
    def centers(z):
        out = []
        for off in ((3.0 * params.L_F - params.L_B) / 4.0, (params.L_F - 3.0 * params.L_B) / 4.0):
            out.append((z.x + off * math.cos(z.theta), z.y + off * math.sin(z.theta)))
        return out

    best = math.inf
    for (ax, ay) in centers(zi):
        for (bx, by) in centers(zj):
            best = min(best, math.hypot(ax - bx, ay - by))
    return best - 2.0 * params.disc_radius


def fd_jacobians(z, u, dt, L, h=1e-7):
    """Central finite differences of the discrete kinematic step."""

    def f(zz, uu):
        x, y, th, phi = zz
        v, om = uu
        return np.array(
            [
                x + v * math.cos(th) * dt,
                y + v * math.sin(th) * dt,
                th + v * math.tan(phi) / L * dt,
                phi + om * dt,
            ]
        )

    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    A = np.zeros((4, 4))
    B = np.zeros((4, 2))
    for k in range(4):
        dz = np.zeros(4)
        dz[k] = h
        A[:, k] = (f(z + dz, u) - f(z - dz, u)) / (2 * h)
    for k in range(2):
        du = np.zeros(2)
        du[k] = h
        B[:, k] = (f(z, u + du) - f(z, u - du)) / (2 * h)
    return A, B


def fd_disc_jacobian(z, params, h=1e-7):
    """Central finite differences of the state -> disc-center map."""

    def y_of(zz):
        x, y, th, _ = zz
        f = (3.0 * params.L_F - params.L_B) / 4.0
        r = (params.L_F - 3.0 * params.L_B) / 4.0
        return np.array(
            [x + f * math.cos(th), y + f * math.sin(th), x + r * math.cos(th), y + r * math.sin(th)]
        )

    z = np.asarray(z, dtype=float)
    D = np.zeros((4, 4))
    for k in range(4):
        dz = np.zeros(4)
        dz[k] = h
        D[:, k] = (y_of(z + dz) - y_of(z - dz)) / (2 * h)
    return D


def kkt_solve(P, q, A, b):
    """Dense KKT solution of min 1/2 x'Px + q'x  s.t.  Ax = b."""
    n = P.shape[0]
    m = A.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = P
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([-q, b])
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n:]


def rollout_curve(start, segments):
    """Independent curve rollout: rotate about the explicit turn center.

    Segments are (curvature, signed length).  Arcs are replayed by rotating the
    pose around the geometric center of the turning circle, a different route
    from any incremental integration in the library.
    """
    x, y, th = float(start[0]), float(start[1]), float(start[2])
    for seg in segments:
        kappa = seg.curvature
        slen = seg.length
        if kappa == 0.0:
            x += slen * math.cos(th)
            y += slen * math.sin(th)
            continue
        r = 1.0 / kappa
        cx = x - r * math.sin(th)
        cy = y + r * math.cos(th)
        a = kappa * slen
        dx, dy = x - cx, y - cy
        ca, sa = math.cos(a), math.sin(a)
        x = cx + dx * ca - dy * sa
        y = cy + dx * sa + dy * ca
        th += a
    return x, y, th


def rs_lower_bound(start, goal, radius):
    """Any curvature-bounded curve is at least this long.

    Straight-line distance, and radius times the net heading change (heading
    only changes along arcs, each radian of which costs radius of travel).
    """
    d = math.hypot(goal[0] - start[0], goal[1] - start[1])
    dth = (goal[2] - start[2] + math.pi) % (2.0 * math.pi) - math.pi
    return max(d, radius * abs(dth))


def brute_neighbor_pairs(states, params, threshold):
    """O(M^2 T) scan for agent pairs within the given disc distance."""
    M = len(states)
    T = states[0].shape[0]
    out = set()
    for i in range(M):
        for j in range(i + 1, M):
            for t in range(T):
                zi = states[i][t]
                zj = states[j][t]

                class _Z:
                    pass

                a, b = _Z(), _Z()
                a.x, a.y, a.theta = zi[0], zi[1], zi[2]
                b.x, b.y, b.theta = zj[0], zj[1], zj[2]
                if brute_pair_distance(a, b, params) <= threshold:
                    out.add((i, j, t))
    return out
