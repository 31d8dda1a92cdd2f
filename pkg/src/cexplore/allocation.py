"""Contiguity-regularised CVRP: cost matrix construction and a seeded heuristic solver."""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import ConnectivityGraph
from .paths import astar, lattice_distances, lattice_graph
from .voxels import OCCUPIED, VoxelMap

log = logging.getLogger(__name__)

M_INF = 1e9
MOVE_BUDGET = 5000
RESTARTS = 3
RECORD_SLACK = 0.1


@dataclass(frozen=True)
class CostParams:
    sigma_q: float = 1.1
    lambda_c: float = 1.2
    grid_edge: float = 5.0
    d_thr: float | None = None
    m_inf: float = M_INF
    penalty: bool = True
    use_graph: bool = True

    def __post_init__(self):
        if self.sigma_q < 1:
            raise ValueError("sigma_q must be >= 1")
        if self.lambda_c < 1:
            raise ValueError("lambda_c must be >= 1")
        if self.grid_edge <= 0:
            raise ValueError("grid_edge must be positive")
        if self.d_thr is not None and self.d_thr <= 0:
            raise ValueError("d_thr must be positive")

    @property
    def switch_distance(self) -> float:
        if not self.use_graph:
            return math.inf
        return 2.0 * self.grid_edge if self.d_thr is None else self.d_thr

    @property
    def connectivity_radius(self) -> float:
        return self.lambda_c * self.grid_edge


def contiguity_penalty(length: float, params: CostParams) -> float:
    """Multiplicative factor: 1 inside the connectivity radius, quadratic growth outside."""
    if length < 0:
        raise ValueError("length must be non-negative")
    if not params.penalty:
        return 1.0
    rho = length / params.connectivity_radius
    if rho <= 1.0:
        return 1.0
    return 1.0 + (rho - 1.0) ** 2


def penalized(length: float, params: CostParams) -> float:
    if length >= params.m_inf or not math.isfinite(length):
        return params.m_inf
    return min(params.m_inf, contiguity_penalty(length, params) * length)


def _voxel_of(vmap: VoxelMap, p) -> tuple:
    return vmap.index_of(np.clip(np.asarray(p, float), vmap.origin, vmap.origin + vmap.extent - 1e-9))


def traversal_cost(a, b, vmap: VoxelMap, graph: ConnectivityGraph | None, params: CostParams,
                   snap_a=None, snap_b=None) -> float:
    """Hybrid path length: voxel A* for near pairs, connectivity-graph search otherwise.

    Voxel search treats UNKNOWN as traversable. ``snap_a``/``snap_b`` override
    the start/goal voxels. Unreachable pairs cost ``params.m_inf``.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = float(np.linalg.norm(a - b))
    if d == 0.0 and snap_a == snap_b:
        return 0.0
    if d < params.switch_distance or graph is None:
        sa = tuple(snap_a) if snap_a is not None else _voxel_of(vmap, a)
        sb = tuple(snap_b) if snap_b is not None else _voxel_of(vmap, b)
        length, _ = astar(vmap.cells != OCCUPIED, sa, sb, vmap.dims, vmap.resolution)
    else:
        length = graph.path(graph.nearest_vertex(a), graph.nearest_vertex(b))[0]
    return length if math.isfinite(length) else params.m_inf


# -- problem ---------------------------------------------------------------------

@dataclass
class AllocationProblem:
    agent_ids: list
    agent_positions: np.ndarray
    task_ids: list
    task_anchors: np.ndarray
    demands: np.ndarray
    matrix: np.ndarray
    sigma_q: float = 1.1
    m_inf: float = M_INF

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    @property
    def workload(self) -> float:
        return float(np.sum(self.demands))

    @property
    def capacity(self) -> float:
        if self.n_agents == 0:
            return 0.0
        return self.sigma_q * self.workload / self.n_agents

    def agent_node(self, k: int) -> int:
        return 1 + k

    def task_node(self, i: int) -> int:
        return 1 + self.n_agents + i

    def to_dict(self) -> dict:
        return {
            "agents": [{"id": int(a), "position": list(map(float, p))}
                       for a, p in zip(self.agent_ids, self.agent_positions)],
            "tasks": [{"id": int(t), "anchor": list(map(float, p)), "demand": float(d)}
                      for t, p, d in zip(self.task_ids, self.task_anchors, self.demands)],
            "sigma_q": self.sigma_q,
            "m_inf": self.m_inf,
            "matrix": self.matrix.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AllocationProblem":
        agents, tasks = d["agents"], d["tasks"]
        return cls([a["id"] for a in agents],
                   np.array([a["position"] for a in agents], float).reshape(-1, 3),
                   [t["id"] for t in tasks],
                   np.array([t["anchor"] for t in tasks], float).reshape(-1, 3),
                   np.array([t["demand"] for t in tasks], float),
                   np.array(d["matrix"], float), d.get("sigma_q", 1.1), d.get("m_inf", M_INF))


def assemble_matrix(c_dt: np.ndarray, c_t: np.ndarray, m_inf: float = M_INF) -> np.ndarray:
    """Block layout: depot row/column, agent rows, task rows."""
    n_c, n_t = c_dt.shape
    n = 1 + n_c + n_t
    C = np.zeros((n, n))
    C[0, 0] = m_inf
    C[0, 1 + n_c:] = m_inf
    C[1:1 + n_c, 1 + n_c:] = c_dt
    C[1 + n_c:, 1:1 + n_c] = m_inf
    C[1 + n_c:, 1 + n_c:] = c_t
    return C


def pairwise_lengths(points: np.ndarray, snaps: list, vmap: VoxelMap,
                     graph: ConnectivityGraph | None, params: CostParams) -> np.ndarray:
    """Symmetric hybrid traversal lengths between all points (batched)."""
    n = len(points)
    L = np.zeros((n, n))
    if n == 0:
        return L
    eu = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    near = eu < params.switch_distance
    if graph is None:
        near[:] = True
    if near.any():
        allowed = vmap.cells != OCCUPIED
        lat = lattice_graph(allowed, vmap.resolution)
        lin = [vmap.linear(s) for s in snaps]
        D = np.atleast_2d(lattice_distances(allowed, lin, vmap.resolution, graph=lat))[:, lin]
        D = np.minimum(D, D.T)
        L[near] = D[near]
    if graph is not None and (~near).any():
        verts = [graph.nearest_vertex(p) for p in points]
        uniq = sorted(set(verts))
        G = graph.distances_from(uniq)
        _, pos, _ = graph._index()
        row = {v: i for i, v in enumerate(uniq)}
        Dg = np.array([[G[row[a], pos[b]] for b in verts] for a in verts])
        L[~near] = Dg[~near]
    L[~np.isfinite(L)] = params.m_inf
    np.fill_diagonal(L, 0.0)
    return L


def build_problem(agents, tasks, vmap: VoxelMap, graph: ConnectivityGraph | None,
                  params: CostParams) -> AllocationProblem:
    """CVRP instance over ``agents`` (AgentState) and PENDING ``tasks`` (TaskUnit)."""
    agents = list(agents)
    tasks = list(tasks)
    if not agents:
        raise ValueError("need at least one agent")
    a_pos = np.array([a.position for a in agents], float).reshape(-1, 3)
    t_pos = np.array([t.anchor for t in tasks], float).reshape(-1, 3)
    snaps = [_voxel_of(vmap, p) for p in a_pos]
    for t in tasks:
        if t.members is not None and len(t.members):
            ctr = vmap.centers(t.members)
            snaps.append(vmap.unravel(t.members[int(np.argmin(np.linalg.norm(ctr - t.anchor, axis=1)))]))
        else:
            snaps.append(_voxel_of(vmap, t.anchor))
    L = pairwise_lengths(np.vstack([a_pos, t_pos]), snaps, vmap, graph, params)
    n_c = len(agents)
    pen = np.vectorize(lambda l: penalized(float(l), params), otypes=[float])
    c_dt = pen(L[:n_c, n_c:]) if tasks else np.zeros((n_c, 0))
    c_t = pen(L[n_c:, n_c:]) if tasks else np.zeros((0, 0))
    return AllocationProblem([a.id for a in agents], a_pos, [t.id for t in tasks], t_pos,
                             np.array([t.num for t in tasks], float),
                             assemble_matrix(c_dt, c_t, params.m_inf), params.sigma_q, params.m_inf)


# -- result ---------------------------------------------------------------------------

@dataclass
class AllocationResult:
    sequences: dict  # agent id -> list of task ids (visit order)
    cost: float
    demand_sums: dict
    capacity: float
    relaxed: list = field(default_factory=list)  # task ids placed in violation of capacity
    unrouted: list = field(default_factory=list)  # task ids unreachable from every agent
    version: tuple = (0, 0, 0)  # (host id, counter, tick)

    def assigned(self) -> list:
        return [t for seq in self.sequences.values() for t in seq]

    def capacity_ok(self, tol: float = 1e-9) -> bool:
        relaxed = set(self.relaxed)
        for k, total in self.demand_sums.items():
            if total > self.capacity + tol and not relaxed.intersection(self.sequences[k]):
                return False
        return True

    def to_dict(self) -> dict:
        return {"sequences": {str(k): list(map(int, v)) for k, v in self.sequences.items()},
                "cost": self.cost, "demand_sums": {str(k): v for k, v in self.demand_sums.items()},
                "capacity": self.capacity, "relaxed": list(self.relaxed), "unrouted": list(self.unrouted),
                "version": list(self.version)}


# -- solver ---------------------------------------------------------------------------

def route_cost(C, agent_node: int, route: list) -> float:
    """Open route cost: agent -> tasks -> depot."""
    if not route:
        return 0.0
    c = C[agent_node][route[0]]
    for a, b in zip(route[:-1], route[1:]):
        c += C[a][b]
    return float(c + C[route[-1]][0])


class _Search:
    """Local search over open routes with an overload-penalised objective."""

    def __init__(self, problem: AllocationProblem, rng: random.Random, budget: int):
        self.p = problem
        self.C = problem.matrix.tolist()
        M = problem.matrix[1 + problem.n_agents:, 1 + problem.n_agents:]
        self.symmetric = bool(np.allclose(M, M.T))
        self.rng = rng
        self.Q = problem.capacity
        self.n_c = problem.n_agents
        self.start = [problem.agent_node(k) for k in range(self.n_c)]
        self.dem = [0.0] * problem.matrix.shape[0]
        for i, d in enumerate(problem.demands):
            self.dem[problem.task_node(i)] = float(d)
        finite = problem.matrix[problem.matrix < problem.m_inf]
        self.P = 1e3 * (float(finite.max()) + 1.0) if finite.size else 1e3
        self.locked: set[int] = set()
        self.budget = budget
        self.moves = 0

    # -- objective --
    def over(self, load):
        return max(0.0, load - self.Q - 1e-9)

    def cost(self, k, r):
        return route_cost(self.C, self.start[k], r)

    def objective(self, routes, loads):
        return sum(self.cost(k, r) for k, r in enumerate(routes)) + self.P * sum(self.over(l) for l in loads)

    def _pred(self, k, r, i):
        return self.start[k] if i == 0 else r[i - 1]

    def _edge(self, a, b):
        return 0.0 if b is None else self.C[a][b]

    # -- construction --
    def options(self, routes, loads, t, noise=0.0):
        """Cheapest insertion (cost, route, position) per unlocked route, best first."""
        C, dem = self.C, self.dem
        out = []
        for k, r in enumerate(routes):
            if k in self.locked:
                continue
            pen = self.P * (self.over(loads[k] + dem[t]) - self.over(loads[k]))
            prev = self.start[k]
            best = None
            for pos in range(len(r) + 1):
                nxt = r[pos] if pos < len(r) else None
                d = C[prev][t] + self._edge(t, nxt) - self._edge(prev, nxt)
                if noise:
                    d *= 1.0 + noise * (2.0 * self.rng.random() - 1.0)
                if best is None or d < best[0] - 1e-12:
                    best = (d, pos)
                prev = nxt
            out.append((best[0] + pen, k, best[1]))
        out.sort()
        return out

    def place(self, routes, loads, t, opt):
        if opt is None:  # every route locked
            k = min(range(self.n_c), key=lambda k: loads[k])
            opt = (0.0, k, len(routes[k]))
        _, k, pos = opt
        routes[k].insert(pos, t)
        loads[k] += self.dem[t]

    def insert_best(self, routes, loads, t, noise=0.0):
        opts = self.options(routes, loads, t, noise)
        self.place(routes, loads, t, opts[0] if opts else None)

    def insert_regret(self, routes, loads, pending):
        """Regret-2 insertion: place first the task that loses most by missing its best route."""
        pending = list(pending)
        while pending:
            pick = None
            for t in pending:
                opts = self.options(routes, loads, t)
                if not opts:
                    pick = (0.0, t, None)
                    break
                regret = (opts[1][0] - opts[0][0]) if len(opts) > 1 else 0.0
                key = (-regret, opts[0][0], t)
                if pick is None or key < pick[0]:
                    pick = (key, t, opts[0])
            _, t, opt = pick
            self.place(routes, loads, t, opt)
            pending.remove(t)

    def construct(self, tasks, routes, loads, seeded):
        pending = list(tasks)
        if seeded:
            for k in range(self.n_c):
                if k in self.locked or routes[k] or not pending:
                    continue
                t = min(pending, key=lambda t: (self.C[self.start[k]][t], t))
                routes[k].append(t)
                loads[k] += self.dem[t]
                pending.remove(t)
            # nearest-first order from the agents keeps construction O(n^2)
            pending.sort(key=lambda t: (min(self.C[s][t] for s in self.start), t))
        for t in pending:
            self.insert_best(routes, loads, t)

    # -- moves (first improvement) --
    def two_opt(self, routes, loads):
        C = self.C
        for k, r in enumerate(routes):
            n = len(r)
            if n < 2:
                continue
            base = None if self.symmetric else self.cost(k, r)
            for i in range(n - 1):
                prev = self._pred(k, r, i)
                for j in range(i + 1, n):
                    nxt = r[j + 1] if j + 1 < n else None
                    if self.symmetric:
                        d = C[prev][r[j]] + self._edge(r[i], nxt) - C[prev][r[i]] - self._edge(r[j], nxt)
                    else:
                        d = self.cost(k, r[:i] + r[i:j + 1][::-1] + r[j + 1:]) - base
                    if d < -1e-9:
                        r[i:j + 1] = r[i:j + 1][::-1]
                        return True
        return False

    def or_opt(self, routes, loads):
        C, edge = self.C, self._edge
        for k, r in enumerate(routes):
            n = len(r)
            if n < 3:
                continue
            for seg in (2, 3):
                for i in range(n - seg + 1):
                    block = r[i:i + seg]
                    prev = self._pred(k, r, i)
                    nxt = r[i + seg] if i + seg < n else None
                    fwd = sum(C[a][b] for a, b in zip(block[:-1], block[1:]))
                    bwd = sum(C[b][a] for a, b in zip(block[:-1], block[1:]))
                    gain = C[prev][block[0]] + fwd + edge(block[-1], nxt) - edge(prev, nxt)
                    rest = r[:i] + r[i + seg:]
                    p = self.start[k]
                    for pos in range(len(rest) + 1):
                        q = rest[pos] if pos < len(rest) else None
                        if pos != i:
                            for first, last, inner, rev in ((block[0], block[-1], fwd, False),
                                                            (block[-1], block[0], bwd, True)):
                                d = C[p][first] + inner + edge(last, q) - edge(p, q) - gain
                                if d < -1e-9:
                                    blk = block[::-1] if rev else block
                                    routes[k] = rest[:pos] + blk + rest[pos:]
                                    return True
                        p = q
        return False

    def relocate(self, routes, loads):
        C, dem = self.C, self.dem
        for k1, r1 in enumerate(routes):
            if k1 in self.locked:
                continue
            for i, t in enumerate(r1):
                prev = self._pred(k1, r1, i)
                nxt = r1[i + 1] if i + 1 < len(r1) else None
                gain = C[prev][t] + self._edge(t, nxt) - self._edge(prev, nxt)
                for k2, r2 in enumerate(routes):
                    if k2 in self.locked:
                        continue
                    if k2 == k1:
                        pen = 0.0
                        base = r1[:i] + r1[i + 1:]
                    else:
                        pen = self.P * (self.over(loads[k2] + dem[t]) - self.over(loads[k2])
                                        + self.over(loads[k1] - dem[t]) - self.over(loads[k1]))
                        base = r2
                    p2 = self.start[k2]
                    for pos in range(len(base) + 1):
                        n2 = base[pos] if pos < len(base) else None
                        if k2 == k1 and pos == i:
                            p2 = n2
                            continue
                        d = C[p2][t] + self._edge(t, n2) - self._edge(p2, n2) - gain + pen
                        if d < -1e-9:
                            if k2 == k1:
                                routes[k1] = base[:pos] + [t] + base[pos:]
                            else:
                                del r1[i]
                                r2.insert(pos, t)
                                loads[k1] -= dem[t]
                                loads[k2] += dem[t]
                            return True
                        p2 = n2
        return False

    def swap(self, routes, loads):
        C, dem = self.C, self.dem
        for k1 in range(self.n_c):
            for k2 in range(k1 + 1, self.n_c):
                if k1 in self.locked or k2 in self.locked:
                    continue
                r1, r2 = routes[k1], routes[k2]
                for i, a in enumerate(r1):
                    pa = self._pred(k1, r1, i)
                    na = r1[i + 1] if i + 1 < len(r1) else None
                    for j, b in enumerate(r2):
                        pb = self._pred(k2, r2, j)
                        nb = r2[j + 1] if j + 1 < len(r2) else None
                        d = (C[pa][b] + self._edge(b, na) - C[pa][a] - self._edge(a, na)
                             + C[pb][a] + self._edge(a, nb) - C[pb][b] - self._edge(b, nb))
                        l1 = loads[k1] - dem[a] + dem[b]
                        l2 = loads[k2] - dem[b] + dem[a]
                        d += self.P * (self.over(l1) + self.over(l2) - self.over(loads[k1]) - self.over(loads[k2]))
                        if d < -1e-9:
                            r1[i], r2[j] = b, a
                            loads[k1], loads[k2] = l1, l2
                            return True
        return False

    def tail_exchange(self, routes, loads):
        C, dem = self.C, self.dem
        for k1 in range(self.n_c):
            for k2 in range(k1 + 1, self.n_c):
                if k1 in self.locked or k2 in self.locked:
                    continue
                r1, r2 = routes[k1], routes[k2]
                pre1 = np.concatenate([[0.0], np.cumsum([dem[t] for t in r1])])
                pre2 = np.concatenate([[0.0], np.cumsum([dem[t] for t in r2])])
                for i in range(len(r1) + 1):
                    p1 = self._pred(k1, r1, i)
                    a = r1[i] if i < len(r1) else None
                    for j in range(len(r2) + 1):
                        if i == len(r1) and j == len(r2):
                            continue
                        p2 = self._pred(k2, r2, j)
                        b = r2[j] if j < len(r2) else None
                        d = self._edge(p1, b) + self._edge(p2, a) - self._edge(p1, a) - self._edge(p2, b)
                        l1 = pre1[i] + (pre2[-1] - pre2[j])
                        l2 = pre2[j] + (pre1[-1] - pre1[i])
                        d += self.P * (self.over(l1) + self.over(l2) - self.over(loads[k1]) - self.over(loads[k2]))
                        if d < -1e-9:
                            routes[k1], routes[k2] = r1[:i] + r2[j:], r2[:j] + r1[i:]
                            loads[k1], loads[k2] = float(l1), float(l2)
                            return True
        return False

    def improve(self, routes, loads):
        ops = (self.two_opt, self.relocate, self.swap, self.tail_exchange, self.or_opt)
        while self.moves < self.budget:
            if any(op(routes, loads) for op in ops):
                self.moves += 1
            else:
                break

    def ruin_recreate(self, routes, loads):
        movable = [t for k, r in enumerate(routes) if k not in self.locked for t in r]
        if not movable:
            return
        n = len(movable)
        hi = n if n <= 10 else max(2, math.ceil(0.4 * n))
        n_remove = self.rng.randint(min(2, n), hi)
        seed = self.rng.choice(movable)
        if self.rng.random() < 0.5:
            # related removal: the seed and its cheapest neighbours
            out = sorted(movable, key=lambda t: (self.C[seed][t], t))[:n_remove]
        else:
            out = self.rng.sample(movable, n_remove)
        for k, r in enumerate(routes):
            keep = [t for t in r if t not in out]
            loads[k] -= sum(self.dem[t] for t in r if t in out)
            routes[k] = keep
        mode = self.rng.randrange(3)
        if mode == 0:
            self.insert_regret(routes, loads, sorted(out))
            return
        if mode == 1:
            out.sort(key=lambda t: (-self.dem[t], t))  # big demands first
        else:
            self.rng.shuffle(out)
        for t in out:
            self.insert_best(routes, loads, t, noise=0.3 if mode == 2 else 0.0)


def _reachable_tasks(problem: AllocationProblem) -> set[int]:
    finite = problem.matrix < problem.m_inf
    seen = {problem.agent_node(k) for k in range(problem.n_agents)}
    stack = list(seen)
    tasks = {problem.task_node(i) for i in range(problem.n_tasks)}
    while stack:
        u = stack.pop()
        for t in tasks:
            if t not in seen and finite[u, t]:
                seen.add(t)
                stack.append(t)
    return seen & tasks


def solve(problem: AllocationProblem, seed: int = 0, move_budget: int = MOVE_BUDGET,
          restarts: int = RESTARTS) -> AllocationResult:
    """Seeded CVRP heuristic over open routes.

    Nearest-seeded cheapest insertion, then 2-opt / relocate / swap /
    tail-exchange / or-opt first-improvement search, then ``restarts`` rounds
    of ruin-and-recreate. Capacity violations are penalised during search;
    tasks left violating capacity in the final answer are reported in
    ``relaxed``. Tasks no agent can reach are left out and reported in
    ``unrouted``.
    """
    n_c = problem.n_agents
    ids = problem.agent_ids
    if problem.n_tasks == 0 or n_c == 0:
        return AllocationResult({a: [] for a in ids}, 0.0, {a: 0.0 for a in ids}, problem.capacity)
    rng = random.Random(seed)
    s = _Search(problem, rng, move_budget)
    reach = _reachable_tasks(problem)
    all_tasks = [problem.task_node(i) for i in range(problem.n_tasks)]
    unrouted = [t for t in all_tasks if t not in reach]
    tasks = [t for t in all_tasks if t in reach]

    routes = [[] for _ in range(n_c)]
    loads = [0.0] * n_c
    relaxed = set()
    alone = set()
    for t in sorted((t for t in tasks if s.dem[t] > s.Q + 1e-9), key=lambda t: (-s.dem[t], t)):
        free = [k for k in range(n_c) if k not in s.locked]
        if not free:
            break
        k = min(free, key=lambda k: (s.C[s.start[k]][t], k))
        routes[k] = [t]
        loads[k] = s.dem[t]
        s.locked.add(k)
        relaxed.add(t)
        alone.add(t)
        log.info("task %s exceeds capacity %.3f; assigned alone", problem.task_ids[t - 1 - n_c], s.Q)
    s.construct([t for t in tasks if t not in alone], routes, loads, seeded=True)
    s.improve(routes, loads)
    best = ([list(r) for r in routes], list(loads), s.objective(routes, loads))
    n_free = len(tasks) - len(alone)
    rounds = max(2, min(40, 320 // max(1, n_free)))
    locked_routes = [list(r) if k in s.locked else [] for k, r in enumerate(routes)]
    locked_loads = [loads[k] if k in s.locked else 0.0 for k in range(n_c)]
    for rep in range(restarts):
        if rep == 0:
            cur, cl = [list(r) for r in best[0]], list(best[1])
        else:
            cur, cl = [list(r) for r in locked_routes], list(locked_loads)
            order = [t for t in tasks if t not in alone]
            rng.shuffle(order)
            s.construct(order, cur, cl, seeded=False)
            s.improve(cur, cl)
        cur_obj = s.objective(cur, cl)
        if cur_obj < best[2] - 1e-9:
            best = ([list(r) for r in cur], list(cl), cur_obj)
        for it in range(rounds):
            if s.moves >= s.budget:
                break
            cand = [list(r) for r in cur]
            ll = list(cl)
            s.ruin_recreate(cand, ll)
            s.improve(cand, ll)
            obj = s.objective(cand, ll)
            # record-to-record acceptance, tolerance shrinking to zero
            slack = RECORD_SLACK * (1.0 - it / rounds)
            if obj < best[2] * (1.0 + slack) - 1e-9:
                cur, cl, cur_obj = cand, ll, obj
            if obj < best[2] - 1e-9:
                best = ([list(r) for r in cand], list(ll), obj)
    routes, loads, _ = best
    for k, r in enumerate(routes):
        excess = loads[k] - s.Q
        if excess > 1e-9 and k not in s.locked:
            # flag the fewest tasks that account for the overload
            for t in sorted(r, key=lambda t: (-s.dem[t], t)):
                if excess <= 1e-9:
                    break
                relaxed.add(t)
                excess -= s.dem[t]
            log.info("capacity relaxed on route of agent %s", ids[k])
    cost = sum(s.cost(k, r) for k, r in enumerate(routes))
    tid = problem.task_ids
    off = 1 + n_c
    seqs = {ids[k]: [tid[t - off] for t in r] for k, r in enumerate(routes)}
    sums = {ids[k]: float(sum(problem.demands[t - off] for t in r)) for k, r in enumerate(routes)}
    return AllocationResult(seqs, float(cost), sums, problem.capacity,
                            [tid[t - off] for t in sorted(relaxed)], [tid[t - off] for t in unrouted])


def result_cost(problem: AllocationProblem, sequences: dict) -> float:
    pos = {t: i for i, t in enumerate(problem.task_ids)}
    total = 0.0
    for k, a in enumerate(problem.agent_ids):
        nodes = [problem.task_node(pos[t]) for t in sequences.get(a, [])]
        total += route_cost(problem.matrix.tolist(), problem.agent_node(k), nodes)
    return total


def write_instance(problem: AllocationProblem, path, seed: int = 0) -> None:
    d = problem.to_dict()
    d["seed"] = seed
    Path(path).write_text(json.dumps(d, indent=1))


def read_instance(path) -> tuple[AllocationProblem, int]:
    d = json.loads(Path(path).read_text())
    return AllocationProblem.from_dict(d), int(d.get("seed", 0))
