"""Voxel path search: restricted A*, and batched Dijkstra over voxel lattices.

Moves are 26-connected with Euclidean step cost and no corner cutting: a
diagonal move is legal only when every axis-aligned sub-move lands on an
allowed voxel too.
"""
from __future__ import annotations

import heapq
import itertools
import math
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra


@lru_cache(maxsize=1)
def _moves():
    out = []
    for off in itertools.product((-1, 0, 1), repeat=3):
        if off == (0, 0, 0):
            continue
        nz = [a for a in range(3) if off[a] != 0]
        subs = []
        for r in range(1, len(nz)):
            for axes in itertools.combinations(nz, r):
                s = [0, 0, 0]
                for a in axes:
                    s[a] = off[a]
                subs.append(tuple(s))
        out.append((off, math.sqrt(len(nz)), tuple(subs)))
    return tuple(out)


def astar(allowed, start: tuple, goal: tuple, dims, resolution: float = 1.0) -> tuple[float, list]:
    """A* between voxel indices over the voxels for which ``allowed`` holds.

    ``allowed`` is a boolean array of shape ``dims`` or a set of index tuples.
    Returns ``(length_m, path)``; ``(inf, [])`` when no path exists.
    """
    if isinstance(allowed, np.ndarray):
        def ok(c):
            return (0 <= c[0] < dims[0] and 0 <= c[1] < dims[1] and 0 <= c[2] < dims[2]
                    and bool(allowed[c]))
    else:
        def ok(c):
            return c in allowed
    start, goal = tuple(start), tuple(goal)
    if not ok(start) or not ok(goal):
        return math.inf, []
    if start == goal:
        return 0.0, [start]
    moves = _moves()

    def h(c):
        return math.sqrt((c[0] - goal[0]) ** 2 + (c[1] - goal[1]) ** 2 + (c[2] - goal[2]) ** 2)

    g = {start: 0.0}
    parent = {start: None}
    counter = itertools.count()
    heap = [(h(start), next(counter), start)]
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return g[cur] * resolution, path[::-1]
        closed.add(cur)
        gc = g[cur]
        for off, cost, subs in moves:
            nb = (cur[0] + off[0], cur[1] + off[1], cur[2] + off[2])
            if nb in closed or not ok(nb):
                continue
            if subs and not all(ok((cur[0] + s[0], cur[1] + s[1], cur[2] + s[2])) for s in subs):
                continue
            ng = gc + cost
            if ng < g.get(nb, math.inf) - 1e-12:
                g[nb] = ng
                parent[nb] = cur
                heapq.heappush(heap, (ng + h(nb), next(counter), nb))
    return math.inf, []


def path_length(points) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def lattice_graph(allowed: np.ndarray, resolution: float = 1.0):
    """Sparse adjacency (metres) for the no-corner-cut 26-lattice over ``allowed``."""
    dims = allowed.shape
    n = allowed.size
    lin = np.arange(n).reshape(dims)
    rows, cols, vals = [], [], []
    for off, cost, subs in _moves():
        if off <= (0, 0, 0):
            continue  # each undirected pair once
        src = [slice(max(0, -o), dims[a] - max(0, o)) for a, o in enumerate(off)]
        dst =[slice(s.start + o, s.stop + o) for s, o in zip(src, off)]
        mask = allowed[tuple(src)] & allowed[tuple(dst)]
        for sub in subs:
            mid = [slice(s.start + o, s.stop + o) for s, o in zip(src, sub)]
            mask &= allowed[tuple(mid)]
        a = lin[tuple(src)][mask]
        b = lin[tuple(dst)][mask]
        rows.append(a)
        cols.append(b)
        vals.append(np.full(a.size, cost * resolution))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def lattice_distances(allowed: np.ndarray, sources, resolution: float = 1.0,
                      limit: float = np.inf, graph=None, return_predecessors: bool = False):
    """Shortest lattice distances (metres) from each linear source index."""
    if graph is None:
        graph = lattice_graph(allowed, resolution)
    return dijkstra(graph, directed=False, indices=np.asarray(sources, dtype=np.int64),
                    limit=limit, return_predecessors=return_predecessors)


def unwind(pred_row: np.ndarray, target: int) -> list[int]:
    """Linear-index path from a predecessor row (source first)."""
    if target < 0:
        return []
    path = [int(target)]
    while pred_row[path[-1]] >= 0:
        path.append(int(pred_row[path[-1]]))
    return path[::-1]
