"""Grid partition, per-grid region labelling and the free/unknown connectivity graph."""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .paths import astar
from .voxels import FREE, UNKNOWN, VoxelMap

EDGE_FREE = "FREE"
EDGE_UNKNOWN = "UNKNOWN"
EDGE_PORTAL = "PORTAL"

KIND_NAME = {FREE: "FREE", UNKNOWN: "UNKNOWN"}
_FACE6 = ndimage.generate_binary_structure(3, 1)


class GraphError(KeyError):
    pass


@dataclass(frozen=True)
class GridPartition:
    dims: tuple[int, int, int]
    grid_voxels: int

    @classmethod
    def for_map(cls, vmap: VoxelMap, grid_edge_m: float) -> "GridPartition":
        return cls(tuple(vmap.dims), max(1, int(round(grid_edge_m / vmap.resolution))))

    @property
    def counts(self) -> tuple[int, int, int]:
        g = self.grid_voxels
        return tuple(-(-d // g) for d in self.dims)

    @property
    def n_grids(self) -> int:
        return int(np.prod(self.counts))

    def grid_ijk(self, gid: int) -> tuple[int, int, int]:
        return tuple(int(v) for v in np.unravel_index(gid, self.counts))

    def grid_id(self, gijk) -> int:
        return int(np.ravel_multi_index(tuple(gijk), self.counts))

    def grid_of_voxel(self, ijk) -> int:
        return self.grid_id(tuple(int(v) // self.grid_voxels for v in ijk))

    def slices(self, gid: int) -> tuple[slice, slice, slice]:
        g = self.grid_voxels
        return tuple(slice(c * g, min((c + 1) * g, d)) for c, d in zip(self.grid_ijk(gid), self.dims))

    def lower_corner(self, gid: int) -> np.ndarray:
        return np.array([s.start for s in self.slices(gid)])

    def neighbors(self, gid: int) -> list[int]:
        c = self.grid_ijk(gid)
        out = []
        for a in range(3):
            for s in (-1, 1):
                n = list(c)
                n[a] += s
                if 0 <= n[a] < self.counts[a]:
                    out.append(self.grid_id(n))
        return out

    def voxel_grid_map(self) -> np.ndarray:
        idx = np.indices(self.dims) // self.grid_voxels
        return np.ravel_multi_index(tuple(idx), self.counts)

    def grids_of(self, linear: np.ndarray) -> np.ndarray:
        ijk = np.unravel_index(np.asarray(linear, np.int64), self.dims)
        return np.ravel_multi_index(tuple(a // self.grid_voxels for a in ijk), self.counts)


@dataclass
class RegionVertex:
    kind: int
    grid: int
    members: np.ndarray  # sorted linear voxel indices
    anchor: np.ndarray
    snap: int  # member voxel nearest the anchor

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.grid, self.kind, int(self.members[0]))

    @property
    def size(self) -> int:
        return int(self.members.size)


def _region(vmap: VoxelMap, kind: int, gid: int, members: np.ndarray) -> RegionVertex:
    members = np.sort(members)
    centers = vmap.centers(members)
    anchor = centers.mean(axis=0)
    d = np.linalg.norm(centers - anchor, axis=1)
    snap = int(members[int(np.argmin(d))])
    return RegionVertex(kind, gid, members, anchor, snap)


def segment_grid(vmap: VoxelMap, part: GridPartition, gid: int) -> list[RegionVertex]:
    """Maximal 6-connected FREE and UNKNOWN components inside one grid."""
    sl = part.slices(gid)
    block = vmap.cells[sl]
    lo = part.lower_corner(gid)
    out = []
    for kind in (FREE, UNKNOWN):
        labels, n = ndimage.label(block == kind, structure=_FACE6)
        if n == 0:
            continue
        loc = np.nonzero(labels)
        lab = labels[loc]
        glob = np.ravel_multi_index(tuple(loc[a] + lo[a] for a in range(3)), vmap.dims)
        order = np.argsort(lab, kind="stable")
        lab, glob = lab[order], glob[order]
        bounds = np.flatnonzero(np.diff(lab)) + 1
        for members in np.split(glob, bounds):
            out.append(_region(vmap, kind, gid, members))
    out.sort(key=lambda v: v.key)
    return out


def _edge_key(u, v, kind):
    return (u, v, kind) if u <= v else (v, u, kind)


@dataclass
class ConnectivityGraph:
    partition: GridPartition
    resolution: float
    origin: np.ndarray
    vertices: dict = field(default_factory=dict)
    by_grid: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)  # (u, v, kind) -> length, u < v
    adj: dict = field(default_factory=dict)  # u -> {v: (length, kind)}
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def empty(cls, vmap: VoxelMap, grid_edge_m: float) -> "ConnectivityGraph":
        return cls(GridPartition.for_map(vmap, grid_edge_m), vmap.resolution, vmap.origin.copy())

    def copy(self) -> "ConnectivityGraph":
        return ConnectivityGraph(self.partition, self.resolution, self.origin,
                                 dict(self.vertices), {k: list(v) for k, v in self.by_grid.items()},
                                 dict(self.edges), {k: dict(v) for k, v in self.adj.items()})

    def vertices_of_kind(self, kind: int) -> list:
        return [k for k, v in self.vertices.items() if v.kind == kind]

    def edge_kind_count(self) -> dict[str, int]:
        out = {EDGE_FREE: 0, EDGE_UNKNOWN: 0, EDGE_PORTAL: 0}
        for (_, _, kind) in self.edges:
            out[kind] += 1
        return out

    # -- mutation --
    def _drop_grid(self, gid: int) -> None:
        for key in self.by_grid.pop(gid, []):
            for nb in list(self.adj.get(key, {})):
                _, kind = self.adj[key][nb]
                del self.edges[_edge_key(key, nb, kind)]
                del self.adj[nb][key]
            self.adj.pop(key, None)
            del self.vertices[key]

    def _add_edge(self, u, v, kind, length) -> None:
        self.edges[_edge_key(u, v, kind)] = length
        self.adj.setdefault(u, {})[v] = (length, kind)
        self.adj.setdefault(v, {})[u] = (length, kind)

    # -- queries --
    def _index(self):
        if "keys" not in self._cache:
            keys = sorted(self.vertices)
            self._cache["keys"] = keys
            self._cache["pos"] = {k: i for i, k in enumerate(keys)}
            self._cache["anchors"] = (np.array([self.vertices[k].anchor for k in keys])
                                      if keys else np.zeros((0, 3)))
        return self._cache["keys"], self._cache["pos"], self._cache["anchors"]

    def invalidate(self) -> None:
        self._cache.clear()

    def nearest_vertex(self, p, kind: int | None = None):
        """Vertex whose anchor is closest to ``p`` (ties: smallest key)."""
        keys, _, anchors = self._index()
        if not keys:
            raise GraphError("graph has no vertices")
        d = np.linalg.norm(anchors - np.asarray(p, float), axis=1)
        if kind is not None:
            d = np.where([self.vertices[k].kind == kind for k in keys], d, np.inf)
        return keys[int(np.argmin(d))]

    def sparse(self):
        if "sparse" not in self._cache:
            keys, pos, _ = self._index()
            if self.edges:
                r, c, w = zip(*((pos[u], pos[v], ln) for (u, v, _), ln in self.edges.items()))
            else:
                r, c, w = (), (), ()
            n = len(keys)
            self._cache["sparse"] = coo_matrix((w, (r, c)), shape=(n, n)).tocsr()
        return self._cache["sparse"]

    def distances_from(self, sources) -> np.ndarray:
        """Shortest graph distances from each source vertex key to all vertices."""
        _, pos, _ = self._index()
        idx = [pos[s] for s in sources]
        if not idx:
            return np.zeros((0, len(pos)))
        return np.atleast_2d(dijkstra(self.sparse(), directed=False, indices=idx))

    def path(self, a, b) -> tuple[float, list]:
        """A* over the graph; returns (length, vertex keys) or (inf, [])."""
        for k in (a, b):
            if k not in self.vertices:
                raise GraphError(f"unknown vertex {k!r}")
        if a == b:
            return 0.0, [a]
        goal = self.vertices[b].anchor

        def h(k):
            return float(np.linalg.norm(self.vertices[k].anchor - goal))

        g = {a: 0.0}
        parent = {a: None}
        cnt = itertools.count()
        heap = [(h(a), next(cnt), a)]
        closed = set()
        while heap:
            _, _, cur = heapq.heappop(heap)
            if cur in closed:
                continue
            if cur == b:
                out = [cur]
                while parent[out[-1]] is not None:
                    out.append(parent[out[-1]])
                return g[cur], out[::-1]
            closed.add(cur)
            for nb, (ln, _) in self.adj.get(cur, {}).items():
                ng = g[cur] + ln
                if ng < g.get(nb, math.inf):
                    g[nb] = ng
                    parent[nb] = cur
                    heapq.heappush(heap, (ng + h(nb), next(cnt), nb))
        return math.inf, []


def graph_distance(graph: ConnectivityGraph, a, b) -> float:
    """Shortest path length over edges of any kind; ``math.inf`` when unreachable."""
    return graph.path(a, b)[0]


def _restricted_edge(vmap: VoxelMap, u: RegionVertex, v: RegionVertex) -> float:
    """Anchor-to-anchor length through the union of two regions, inf if none."""
    both = np.concatenate([u.members, v.members])
    allowed = set(map(tuple, np.stack(np.unravel_index(both, vmap.dims), axis=-1).tolist()))
    length, _ = astar(allowed, vmap.unravel(u.snap), vmap.unravel(v.snap), vmap.dims, vmap.resolution)
    if not math.isfinite(length):
        return math.inf
    return (length + float(np.linalg.norm(u.anchor - vmap.center(vmap.unravel(u.snap))))
            + float(np.linalg.norm(v.anchor - vmap.center(vmap.unravel(v.snap)))))


def _touching(vmap: VoxelMap, u: RegionVertex, v: RegionVertex) -> bool:
    """Whether some member of ``u`` is a face neighbour of some member of ``v``."""
    ui = np.stack(np.unravel_index(u.members, vmap.dims), axis=-1)
    vset = v.members
    for off in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
        n = ui + off
        ok = np.all((n >= 0) & (n < np.array(vmap.dims)), axis=1)
        if not ok.any():
            continue
        lin = np.ravel_multi_index(n[ok].T, vmap.dims)
        if np.isin(lin, vset, assume_unique=False).any():
            return True
    return False


_EDGE_MEMO: dict = {}
_EDGE_MEMO_MAX = 50000


def _edge_length(vmap: VoxelMap, u: RegionVertex, v: RegionVertex) -> float:
    # regions are pure functions of their member sets, so lengths can be reused across updates
    key = (vmap.dims, vmap.resolution, tuple(vmap.origin), u.snap, v.snap, u.members.tobytes(), v.members.tobytes())
    hit = _EDGE_MEMO.get(key)
    if hit is None:
        hit = _restricted_edge(vmap, u, v) if _touching(vmap, u, v) else math.inf
        if len(_EDGE_MEMO) >= _EDGE_MEMO_MAX:
            _EDGE_MEMO.clear()
        _EDGE_MEMO[key] = hit
    return hit


def _link(graph: ConnectivityGraph, vmap: VoxelMap, u: RegionVertex, v: RegionVertex, kind: str) -> None:
    length = _edge_length(vmap, u, v)
    if math.isfinite(length):
        graph._add_edge(u.key, v.key, kind, length)


def update_graph(graph: ConnectivityGraph, vmap: VoxelMap, dirty) -> ConnectivityGraph:
    """Re-segment the dirty grids and rebuild every edge incident to them (in place)."""
    dirty = sorted({int(g) for g in dirty})
    if not dirty:
        return graph
    part = graph.partition
    graph.invalidate()
    for gid in dirty:
        graph._drop_grid(gid)
    for gid in dirty:
        regions = segment_grid(vmap, part, gid)
        graph.by_grid[gid] = [r.key for r in regions]
        for r in regions:
            graph.vertices[r.key] = r
            graph.adj.setdefault(r.key, {})
    dirty_set = set(dirty)
    for gid in dirty:
        here = [graph.vertices[k] for k in graph.by_grid[gid]]
        free_here = [r for r in here if r.kind == FREE]
        unk_here = [r for r in here if r.kind == UNKNOWN]
        for f in free_here:
            for u in unk_here:
                _link(graph, vmap, f, u, EDGE_PORTAL)
        for nb in part.neighbors(gid):
            if nb in dirty_set and nb < gid:
                continue  # pair handled from the other side
            there = [graph.vertices[k] for k in graph.by_grid.get(nb, [])]
            for a in here:
                for b in there:
                    if a.kind == b.kind:
                        _link(graph, vmap, a, b, EDGE_FREE if a.kind == FREE else EDGE_UNKNOWN)
    return graph


def build_graph(vmap: VoxelMap, grid_edge_m: float) -> ConnectivityGraph:
    graph = ConnectivityGraph.empty(vmap, grid_edge_m)
    return update_graph(graph, vmap, range(graph.partition.n_grids))


def dirty_grids(part: GridPartition, changed: np.ndarray) -> set[int]:
    if len(changed) == 0:
        return set()
    return {int(g) for g in np.unique(part.grids_of(changed))}


def dump_graph(graph: ConnectivityGraph) -> str:
    lines = [f"# grid_voxels {graph.partition.grid_voxels} counts {' '.join(map(str, graph.partition.counts))}"]
    for key in sorted(graph.vertices):
        v = graph.vertices[key]
        lines.append(f"V {key[0]} {KIND_NAME[v.kind]} {key[2]} "
                     f"{v.anchor[0]:.6f} {v.anchor[1]:.6f} {v.anchor[2]:.6f} {v.size}")
    for (u, v, kind), ln in sorted(graph.edges.items()):
        lines.append(f"E {u[0]}:{u[2]} {v[0]}:{v[2]} {kind} {ln:.6f}")
    return "\n".join(lines) + "\n"


def write_graph(graph: ConnectivityGraph, path) -> None:
    Path(path).write_text(dump_graph(graph))
