"""Sparse convex QP solver via alternating-direction operator splitting.

    minimize    1/2 x' P x + q' x
    subject to  l <= A x <= u        (equality rows have l == u)

Single-threaded, deterministic: fixed iteration schedule, fixed sparse
factorization, no randomization anywhere, so identical inputs produce
bit-identical outputs.  Warm starts reuse (x, y) from a previous solution,
which is what makes repeated solves inside an SQP loop cheap.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

_SIGMA = 1e-6          # proximal term on the x update
_REG = 1e-9            # static regularization so PSD-only P still factors
_ALPHA = 1.6           # over-relaxation
_RHO0 = 0.1
_RHO_EQ_SCALE = 1e3    # equality rows get a stiffer penalty
_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_PINF_EPS = 1e-5


def _ninf(v) -> float:
    return 0.0 if v.size == 0 else float(np.max(np.abs(v)))


class QpProblem:
    """Problem data; P symmetric PSD, A sparse, elementwise l <= u."""

    def __init__(self, P, q, A=None, l=None, u=None):
        self.P = sp.csc_matrix(P)
        self.q = np.asarray(q, dtype=float).ravel()
        n = self.q.shape[0]
        if self.P.shape != (n, n):
            raise ValueError("P/q dimension mismatch")
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-9:
            raise ValueError("P must be symmetric")
        if A is None:
            A = sp.csc_matrix((0, n))
        self.A = sp.csc_matrix(A)
        if self.A.shape[1] != n:
            raise ValueError("A column count mismatch")
        m = self.A.shape[0]
        self.l = np.full(m, -np.inf) if l is None else np.asarray(l, dtype=float).ravel()
        self.u = np.full(m, np.inf) if u is None else np.asarray(u, dtype=float).ravel()
        if self.l.shape[0] != m or self.u.shape[0] != m:
            raise ValueError("bound dimension mismatch")
        if np.any(self.l > self.u):
            raise ValueError("l > u")
        self.n = n
        self.m = m

    def rho_multipliers(self) -> np.ndarray:
        out = np.ones(self.m)
        out[self.u - self.l < 1e-12] = _RHO_EQ_SCALE
        return out


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str            # optimal | primal_infeasible | max_iters
    primal_res: float
    dual_res: float
    iterations: int = 0


def kkt_residuals(qp: QpProblem, x, y) -> tuple[float, float]:
    """(max violation of l <= Ax <= u,  inf-norm of Px + q + A'y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    grad = qp.P @ x + qp.q
    if qp.m:
        Ax = qp.A @ x
        primal = max(float(np.max(qp.l - Ax, initial=0.0)), float(np.max(Ax - qp.u, initial=0.0)), 0.0)
        grad = grad + qp.A.T @ y
    else:
        primal = 0.0
    return primal, _ninf(grad)


def _factor(qp: QpProblem, rho_vec):
    H = qp.P + (_SIGMA + _REG) * sp.identity(qp.n, format="csc")
    K = sp.bmat([[H, qp.A.T], [qp.A, -sp.diags(1.0 / rho_vec)]], format="csc")
    return splu(K)


def _primal_infeasibility_certificate(qp: QpProblem, dy) -> bool:
    nd = _ninf(dy)
    if nd <= 1e-14:
        return False
    d = dy / nd
    if _ninf(qp.A.T @ d) > _PINF_EPS:
        return False
    pos = d > 0
    neg = d < 0
    if np.any(np.isinf(qp.u[pos])) or np.any(np.isinf(qp.l[neg])):
        return False
    support = float(qp.u[pos] @ d[pos] + qp.l[neg] @ d[neg])
    return support < -_PINF_EPS


def solve(qp: QpProblem, warm: QpSolution | None = None, *,
          eps_abs: float = 1e-6, eps_rel: float = 1e-6,
          max_iters: int = 20000, check_every: int = 25) -> QpSolution:
    n, m = qp.n, qp.m

    if m == 0:
        H = (qp.P + _REG * sp.identity(qp.n, format="csc")).tocsc()
        x = splu(H).solve(-qp.q)
        pr, du = kkt_residuals(qp, x, np.zeros(0))
        return QpSolution(x, np.zeros(0), "optimal", pr, du, 1)

    if warm is not None and warm.x.shape[0] == n and warm.y.shape[0] == m:
        x = warm.x.copy()
        y = warm.y.copy()
    else:
        x = np.zeros(n)
        y = np.zeros(m)

    mult = qp.rho_multipliers()
    rho_base = _RHO0
    rho = rho_base * mult
    lu = _factor(qp, rho)
    z = np.clip(qp.A @ x, qp.l, qp.u)

    status = "max_iters"
    iters = max_iters
    for k in range(1, max_iters + 1):
        rhs = np.concatenate([_SIGMA * x - qp.q, z - y / rho])
        sol = lu.solve(rhs)
        xt = sol[:n]
        nu = sol[n:]
        zt = z + (nu - y) / rho
        x = _ALPHA * xt + (1.0 - _ALPHA) * x
        z_pre = _ALPHA * zt + (1.0 - _ALPHA) * z
        y_prev = y
        z = np.clip(z_pre + y / rho, qp.l, qp.u)
        y = y_prev + rho * (z_pre - z)

        if k % check_every:
            continue

        Ax = qp.A @ x
        Px = qp.P @ x
        Aty = qp.A.T @ y
        r_prim = _ninf(Ax - z)
        r_dual = _ninf(Px + qp.q + Aty)
        eps_p = eps_abs + eps_rel * max(_ninf(Ax), _ninf(z))
        eps_d = eps_abs + eps_rel * max(_ninf(Px), _ninf(Aty), _ninf(qp.q))
        if r_prim <= eps_p and r_dual <= eps_d:
            status = "optimal"
            iters = k
            break
        if _primal_infeasibility_certificate(qp, y - y_prev):
            pr, du = kkt_residuals(qp, x, y)
            return QpSolution(x, y, "primal_infeasible", pr, du, k)

        # residual balancing: push rho toward equalizing scaled residuals
        num = r_prim / max(_ninf(Ax), _ninf(z), 1e-12)
        den = r_dual / max(_ninf(Px), _ninf(Aty), _ninf(qp.q), 1e-12)
        ratio = np.sqrt(num / max(den, 1e-18))
        new_base = float(np.clip(rho_base * ratio, _RHO_MIN, _RHO_MAX))
        if new_base > 5.0 * rho_base or new_base < rho_base / 5.0:
            rho_base = new_base
            rho = rho_base * mult
            lu = _factor(qp, rho)

    pr, du = kkt_residuals(qp, x, y)
    return QpSolution(x, y, status, pr, du, iters)
