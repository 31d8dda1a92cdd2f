"""Independent brute-force references used by the test-suite."""
from __future__ import annotations

import heapq
import itertools
import math

import numpy as np

from cexplore.voxels import FREE, OCCUPIED, UNKNOWN


def open_path_costs(C, start, tasks):
    """Best fixed-start open path cost over every subset of ``tasks`` (Held-Karp).

    Returns {frozenset: cost}; the empty set costs 0.
    """
    n = len(tasks)
    best = {}
    dp = {}
    for i, t in enumerate(tasks):
        dp[(1 << i, i)] = C[start, t]
    for mask in range(1, 1 << n):
        for last in range(n):
            if (mask, last) not in dp:
                continue
            v = dp[(mask, last)]
            for j in range(n):
                if mask & (1 << j):
                    continue
                key = (mask | (1 << j), j)
                c = v + C[tasks[last], tasks[j]]
                if c < dp.get(key, math.inf):
                    dp[key] = c
    out = {frozenset(): 0.0}
    for (mask, last), v in dp.items():
        s = frozenset(tasks[i] for i in range(n) if mask & (1 << i))
        c = v + C[tasks[last], 0]
        if c < out.get(s, math.inf):
            out[s] = c
    return out


def cvrp_optimum(problem):
    """Exact optimum by enumerating labelled task-to-agent assignments."""
    C = problem.matrix
    tasks = [problem.task_node(i) for i in range(problem.n_tasks)]
    dem = {problem.task_node(i): d for i, d in enumerate(problem.demands)}
    Q = problem.capacity
    per_agent = [open_path_costs(C, problem.agent_node(k), tasks) for k in range(problem.n_agents)]
    best = math.inf
    for labels in itertools.product(range(problem.n_agents), repeat=len(tasks)):
        groups = [frozenset(t for t, l in zip(tasks, labels) if l == k) for k in range(problem.n_agents)]
        if any(sum(dem[t] for t in g) > Q + 1e-9 for g in groups):
            continue
        total = sum(per_agent[k][g] for k, g in enumerate(groups))
        best = min(best, total)
    return best


def best_open_order(C, start, tasks):
    """Exhaustive permutation search for a fixed-start open path."""
    best = (math.inf, None)
    for perm in itertools.permutations(tasks):
        c = C[start, perm[0]] + sum(C[a, b] for a, b in zip(perm[:-1], perm[1:]))
        if c < best[0]:
            best = (c, list(perm))
    return best


def flood_components(mask, connectivity=6):
    """Connected components of a boolean array by explicit BFS; list of sets."""
    if connectivity == 6:
        offs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    else:
        offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    seen = set()
    comps = []
    dims = mask.shape
    for start in zip(*np.nonzero(mask)):
        start = tuple(int(v) for v in start)
        if start in seen:
            continue
        comp = {start}
        seen.add(start)
        stack = [start]
        while stack:
            c = stack.pop()
            for o in offs:
                n = (c[0] + o[0], c[1] + o[1], c[2] + o[2])
                if all(0 <= n[a] < dims[a] for a in range(3)) and mask[n] and n not in seen:
                    seen.add(n)
                    comp.add(n)
                    stack.append(n)
        comps.append(comp)
    return comps


def reachable_from_free(cells):
    """Voxels reachable from any FREE voxel through non-OCCUPIED voxels (6-conn)."""
    dims = cells.shape
    seen = {tuple(int(v) for v in c) for c in zip(*np.nonzero(cells == FREE))}
    stack = list(seen)
    while stack:
        c = stack.pop()
        for o in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
            n = (c[0] + o[0], c[1] + o[1], c[2] + o[2])
            if all(0 <= n[a] < dims[a] for a in range(3)) and cells[n] != OCCUPIED and n not in seen:
                seen.add(n)
                stack.append(n)
    return seen


def lattice_dijkstra(allowed, start, resolution=1.0):
    """Plain Dijkstra on the no-corner-cut 26-lattice; dict voxel -> metres."""
    dims = allowed.shape
    offs = []
    for o in itertools.product((-1, 0, 1), repeat=3):
        if o == (0, 0, 0):
            continue
        nz = [a for a in range(3) if o[a]]
        subs = []
        for r in range(1, len(nz)):
            for axes in itertools.combinations(nz, r):
                subs.append(tuple(o[a] if a in axes else 0 for a in range(3)))
        offs.append((o, math.sqrt(len(nz)) * resolution, subs))

    def ok(c):
        return all(0 <= c[a] < dims[a] for a in range(3)) and bool(allowed[c])

    dist = {start: 0.0}
    heap = [(0.0, start)]
    while heap:
        d, c = heapq.heappop(heap)
        if d > dist[c]:
            continue
        for o, w, subs in offs:
            n = (c[0] + o[0], c[1] + o[1], c[2] + o[2])
            if not ok(n) or not all(ok((c[0] + s[0], c[1] + s[1], c[2] + s[2])) for s in subs):
                continue
            nd = d + w
            if nd < dist.get(n, math.inf) - 1e-12:
                dist[n] = nd
                heapq.heappush(heap, (nd, n))
    return dist


def segment_voxels(origin, direction, length, lo, hi, eps=1e-9):
    """Voxels (within [lo, hi) index box) overlapped by a segment, ordered by entry.

    Slab test per voxel in voxel units; overlap must exceed ``eps``.
    """
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    grid = np.stack(np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij"), -1).reshape(-1, 3)
    t0 = np.full(len(grid), -np.inf)
    t1 = np.full(len(grid), np.inf)
    for a in range(3):
        if abs(d[a]) < 1e-12:
            inside = (o[a] > grid[:, a]) & (o[a] < grid[:, a] + 1)
            t0 = np.where(inside, t0, np.inf)
            continue
        ta = (grid[:, a] - o[a]) / d[a]
        tb = (grid[:, a] + 1 - o[a]) / d[a]
        t0 = np.maximum(t0, np.minimum(ta, tb))
        t1 = np.minimum(t1, np.maximum(ta, tb))
    enter = np.maximum(t0, 0.0)
    leave = np.minimum(t1, length)
    keep = leave - enter > eps
    order = np.argsort(enter[keep], kind="stable")
    return [tuple(int(v) for v in g) for g in grid[keep][order]]


def visible_by_segments(world_cells, origin_idx, directions, length):
    """Voxel -> state seen by walking each ray's brute-force voxel list."""
    dims = world_cells.shape
    o = np.asarray(origin_idx, float) + 0.5
    lo = np.maximum(np.floor(o - length) - 1, 0).astype(int)
    hi = np.minimum(np.ceil(o + length) + 1, dims).astype(int)
    seen = {}
    for d in directions:
        for v in segment_voxels(o, d, length, lo, hi):
            st = int(world_cells[v])
            seen[v] = st
            if st == OCCUPIED:
                break
    return seen


def unknown_state():
    return UNKNOWN


def polyline_time(points, v0, vm, am):
    """Scalar re-derivation of the velocity-consistent traversal time."""
    pts = [tuple(map(float, p)) for p in points]
    total = 0.0
    prev_dir = None
    for a, b in zip(pts, pts[1:]):
        d = [b[i] - a[i] for i in range(3)]
        l = math.sqrt(sum(x * x for x in d))
        u = [x / l for x in d]
        if prev_dir is None:
            vin = [vm * x for x in u] if v0 is None else list(v0)
        else:
            vin = [vm * x for x in prev_dir]
        p = sum(vin[i] * u[i] for i in range(3))
        total += l / vm + (vm - abs(p)) ** 2 / (2 * vm * am) + (2 * abs(p) / am if p < 0 else 0.0)
        prev_dir = u
    return total


def exhaustive_open_order(cost, n, end=None):
    """Cheapest visiting order of nodes 1..n-1 from node 0, optional fixed end node."""
    best = (math.inf, None)
    for perm in itertools.permutations(range(1, n)):
        seq = (0, *perm) + ((end,) if end is not None else ())
        c = sum(cost(a, b) for a, b in zip(seq, seq[1:]))
        if c < best[0]:
            best = (c, list(perm))
    return best


def packable(demands, bins, cap, tol=1e-9):
    """Whether demands split into `bins` groups each summing to at most cap (exact backtracking)."""
    items = sorted(demands, reverse=True)
    if bins == 0:
        return not items
    loads = [0.0] * bins

    def place(i):
        if i == len(items):
            return True
        tried = set()
        for b in range(bins):
            if loads[b] in tried or loads[b] + items[i] > cap + tol:
                continue
            tried.add(loads[b])
            loads[b] += items[i]
            if place(i + 1):
                return True
            loads[b] -= items[i]
        return False

    return place(0)
