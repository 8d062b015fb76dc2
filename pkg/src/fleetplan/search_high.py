"""Priority-based tree search over partial orderings of agents.

Each node holds a full set of single-agent trajectories plus a DAG of
priority pairs (i, j) meaning "j must stay clear of i".  Conflicts are
resolved depth-first by branching on the two orientations of one new pair
and replanning only the agents whose trajectories violate the grown order.
"""
from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .search_low import (
    CoarseTrajectory,
    DynamicObstacleSet,
    GridSpec,
    LowLevelPlanner,
)


@dataclass
class PbsNode:
    orders: frozenset  # pairs (i, j): agent j must avoid agent i
    trajs: dict        # agent id -> CoarseTrajectory
    conflicts: list    # (i, j, t) with i < j, disc overlap at time index t
    makespan: float
    depth: int = 0

    @property
    def feasible(self) -> bool:
        return all(t is not None for t in self.trajs.values())


@dataclass
class PbsTelemetry:
    nodes_expanded: int = 0
    low_level_calls: int = 0
    free_replans: int = 0
    root_time_s: float = 0.0
    total_time_s: float = 0.0


@dataclass
class PbsResult:
    status: str                  # ok | timeout | exhausted | root_infeasible
    node: PbsNode | None
    telemetry: PbsTelemetry
    quantum: float

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def trajectories(self) -> dict:
        return self.node.trajs if self.node is not None else {}


def _pad_states(trajs_by_id):
    """Per-agent pose arrays padded (parked at the end) to a common horizon."""
    T = max(t.states.shape[0] for t in trajs_by_id.values())
    out = {}
    for a, traj in trajs_by_id.items():
        s = traj.states[:, :3]
        if s.shape[0] < T:
            s = np.vstack([s, np.repeat(s[-1:], T - s.shape[0], axis=0)])
        out[a] = s
    return out, T


def _pair_conflict_times(sa, sb, params, first_only=False):
    """Time indices where two padded pose sequences come closer than the
    covering discs allow.  The disc metric (min center distance < 2 r_v) is
    what the downstream separating planes require, so the coarse stage polices
    exactly the clearance the refinement stage will need."""
    f = params.front_disc_offset
    r = params.rear_disc_offset
    ca, sa_ = np.cos(sa[:, 2]), np.sin(sa[:, 2])
    cb, sb_ = np.cos(sb[:, 2]), np.sin(sb[:, 2])
    pa = sa[:, :2]
    pb = sb[:, :2]
    da = np.stack([ca, sa_], axis=1)
    db = np.stack([cb, sb_], axis=1)
    dmin = np.full(sa.shape[0], np.inf)
    for oa in (f, r):
        for ob in (f, r):
            d = np.hypot(*(pa + oa * da - pb - ob * db).T)
            dmin = np.minimum(dmin, d)
    hits = np.nonzero(dmin < 2.0 * params.disc_radius - 1e-9)[0]
    out = [int(t) for t in hits]
    return out[:1] if first_only else out


def detect_conflicts(trajs_by_id, params):
    padded, _ = _pad_states(trajs_by_id)
    ids = sorted(trajs_by_id)
    out = []
    for n, a in enumerate(ids):
        for b in ids[n + 1:]:
            for t in _pair_conflict_times(padded[a], padded[b], params):
                out.append((a, b, t))
    return out


def pick_conflict(node: PbsNode):
    """Earliest time index, then lexicographically smallest agent pair."""
    return min(node.conflicts, key=lambda c: (c[2], c[0], c[1]))


def _ancestors(orders, agent):
    """All agents reachable upward from `agent` through (higher, lower) pairs."""
    parents = {}
    for hi, lo in orders:
        parents.setdefault(lo, set()).add(hi)
    seen = set()
    stack = [agent]
    while stack:
        for p in parents.get(stack.pop(), ()):
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def _topological(ids, orders):
    """Kahn's algorithm over the priority DAG, ties broken by agent id."""
    succ = {a: [] for a in ids}
    indeg = {a: 0 for a in ids}
    for hi, lo in sorted(orders):
        succ[hi].append(lo)
        indeg[lo] += 1
    ready = sorted(a for a in ids if indeg[a] == 0)
    heapq.heapify(ready)
    out = []
    while ready:
        a = heapq.heappop(ready)
        out.append(a)
        for b in succ[a]:
            indeg[b] -= 1
            if indeg[b] == 0:
                heapq.heappush(ready, b)
    if len(out) != len(ids):
        raise ValueError("priority order contains a cycle")
    return out


class PrioritySearch:
    def __init__(self, instance, grid: GridSpec, strategy: str = "depth_first",
                 warm_start: bool = True, worse_child_first: bool = False):
        if strategy not in ("depth_first", "best_first"):
            raise ValueError(f"unknown strategy {strategy!r}")
        self.inst = instance
        self.low = LowLevelPlanner(instance, grid)
        self.grid = self.low.grid
        self.params = instance.vehicle
        self.ids = sorted(a.id for a in instance.agents)
        self.strategy = strategy
        self.warm_start = warm_start
        self.worse_child_first = worse_child_first
        self.telemetry = PbsTelemetry()

    # -- node construction -------------------------------------------------

    def _make_node(self, orders, trajs, depth) -> PbsNode:
        conflicts = detect_conflicts(trajs, self.params)
        makespan = max(t.makespan_s for t in trajs.values())
        return PbsNode(frozenset(orders), trajs, conflicts, makespan, depth)

    def generate_root(self, deadline: float = math.inf) -> PbsNode | None:
        """Sequential warm start in id order; an agent that cannot be planned
        around its predecessors is planned freely instead.  The order pairs
        used for warming are NOT recorded — the root's order set is empty."""
        trajs = {}
        for a in self.ids:
            dyn = None
            if self.warm_start and trajs:
                dyn = DynamicObstacleSet.from_trajectories(
                    [trajs[b] for b in self.ids if b in trajs])
            res = self.low.plan(a, dyn, deadline=deadline)
            self.telemetry.low_level_calls += 1
            if not res.ok and dyn is not None and dyn.count:
                res = self.low.plan(a, None, deadline=deadline)
                self.telemetry.low_level_calls += 1
                self.telemetry.free_replans += 1
            if not res.ok:
                return None
            trajs[a] = res.trajectory
        return self._make_node(frozenset(), trajs, 0)

    def update_plan(self, node: PbsNode, new_pair, deadline: float = math.inf) -> PbsNode | None:
        """Child with one added pair: walk agents in topological order and
        replan exactly those currently colliding with an ancestor."""
        orders = set(node.orders)
        orders.add(tuple(new_pair))
        trajs = dict(node.trajs)
        padded, _ = _pad_states(trajs)
        for a in _topological(self.ids, orders):
            anc = sorted(_ancestors(orders, a))
            if not anc:
                continue
            dirty = any(
                _pair_conflict_times(padded[a], padded[b], self.params, first_only=True)
                for b in anc)
            if not dirty:
                continue
            dyn = DynamicObstacleSet.from_trajectories([trajs[b] for b in anc])
            res = self.low.plan(a, dyn, deadline=deadline)
            self.telemetry.low_level_calls += 1
            if not res.ok:
                return None
            trajs[a] = res.trajectory
            padded, _ = _pad_states(trajs)
        return self._make_node(orders, trajs, node.depth + 1)

    def expand(self, node: PbsNode, conflict, deadline: float = math.inf) -> list[PbsNode]:
        """Children for both orientations of the conflicting pair, ordered so
        the first list element should be explored first."""
        i, j, _ = conflict
        assert (i, j) not in node.orders and (j, i) not in node.orders
        ci = self.update_plan(node, (i, j), deadline)  # j yields to i
        cj = self.update_plan(node, (j, i), deadline)  # i yields to j
        if ci is None and cj is None:
            return []
        if ci is None:
            return [cj]
        if cj is None:
            return [ci]
        better_first = [ci, cj] if ci.makespan <= cj.makespan + 1e-12 else [cj, ci]
        if self.worse_child_first:
            better_first.reverse()
        return better_first

    # -- main loop ---------------------------------------------------------

    def solve(self, time_budget: float | None = None) -> PbsResult:
        t0 = time.monotonic()
        deadline = math.inf if time_budget is None else t0 + time_budget
        tele = self.telemetry
        root = self.generate_root(deadline)
        tele.root_time_s = time.monotonic() - t0
        if root is None:
            tele.total_time_s = time.monotonic() - t0
            status = "timeout" if time.monotonic() > deadline else "root_infeasible"
            return PbsResult(status, None, tele, self.low.quantum)

        counter = 0
        if self.strategy == "best_first":
            frontier = [(root.makespan, counter, root)]
        else:
            frontier = [root]

        while frontier:
            if time.monotonic() > deadline:
                tele.total_time_s = time.monotonic() - t0
                return PbsResult("timeout", None, tele, self.low.quantum)
            if self.strategy == "best_first":
                _, _, node = heapq.heappop(frontier)
            else:
                node = frontier.pop()
            if not node.conflicts:
                tele.total_time_s = time.monotonic() - t0
                return PbsResult("ok", node, tele, self.low.quantum)
            conflict = pick_conflict(node)
            tele.nodes_expanded += 1
            children = self.expand(node, conflict, deadline)
            if self.strategy == "best_first":
                for c in children:
                    counter += 1
                    heapq.heappush(frontier, (c.makespan, counter, c))
            else:
                # stack: push in reverse so children[0] is popped first
                for c in reversed(children):
                    frontier.append(c)

        tele.total_time_s = time.monotonic() - t0
        status = "timeout" if time.monotonic() > deadline else "exhausted"
        return PbsResult(status, None, tele, self.low.quantum)


def solve(instance, grid: GridSpec, strategy: str = "depth_first",
          time_budget: float | None = None, warm_start: bool = True,
          worse_child_first: bool = False) -> PbsResult:
    searcher = PrioritySearch(instance, grid, strategy=strategy,
                              warm_start=warm_start,
                              worse_child_first=worse_child_first)
    return searcher.solve(time_budget)


def generate_root(instance, grid: GridSpec, warm_start: bool = True) -> PbsNode | None:
    return PrioritySearch(instance, grid, warm_start=warm_start).generate_root()


def update_plan(node: PbsNode, new_pair, instance, grid: GridSpec) -> PbsNode | None:
    return PrioritySearch(instance, grid).update_plan(node, new_pair)


def expand(node: PbsNode, conflict, instance, grid: GridSpec) -> list[PbsNode]:
    return PrioritySearch(instance, grid).expand(node, conflict)
