"""Per-agent coverage planning: velocity-aware unit ordering, frontier clusters,
viewpoints, fixed-endpoint local tours and kinematic path following."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .voxels import FREE, UNKNOWN, VoxelMap

EXHAUSTIVE_LIMIT = 6
SPLIT_EXTENT = 8.0
RING_RADII = (2.0, 4.0)
RING_YAWS = 12
SENSOR_RANGE = 10.0

_STRUCT26 = np.ones((3, 3, 3), bool)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class MotionLimits:
    v_max: float = 2.0
    omega_max: float = 2.0
    a_max: float = 2.0

    def __post_init__(self):
        if min(self.v_max, self.omega_max, self.a_max) <= 0:
            raise PlanError("motion limits must be positive")


@dataclass
class PathEstimate:
    waypoints: np.ndarray
    length: float
    time: float


@dataclass
class Viewpoint:
    position: np.ndarray
    yaw: float
    covered: int


@dataclass
class FrontierCluster:
    members: np.ndarray          # linear voxel indices
    centroid: np.ndarray
    axis: np.ndarray             # first principal axis (unit)
    extent: float


# -- velocity-consistent traversal time ------------------------------------------------

def tour_cost(path, v0=None, limits: MotionLimits = MotionLimits()) -> float:
    """Traversal time of a polyline with a penalty for velocity changes at each vertex.

    Each segment pays ``(v - |p|)^2 / (2 v a)`` where ``p`` is the incoming
    velocity projected on the segment direction, plus ``2|p|/a`` when ``p < 0``
    (a reversal). Incoming velocity is the previous segment's direction at full
    speed; for the first segment it is ``v0``, or aligned with the segment when
    ``v0`` is None. Zero projection pays only the quadratic term.
    """
    pts = np.asarray(path, float).reshape(-1, 3)
    if len(pts) < 2:
        raise PlanError("need at least two waypoints")
    seg = np.diff(pts, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    if np.any(lens <= 0):
        raise PlanError("duplicate consecutive waypoints")
    vm, am = limits.v_max, limits.a_max
    dirs = seg / lens[:, None]
    if v0 is None:
        first = vm
    else:
        v0 = np.asarray(v0, float).reshape(3)
        if np.linalg.norm(v0) > vm + 1e-9:
            raise PlanError("entry speed exceeds v_max")
        first = float(v0 @ dirs[0])
    proj = np.empty(len(dirs))
    proj[0] = first
    proj[1:] = vm * np.einsum("ij,ij->i", dirs[:-1], dirs[1:])
    mag = np.abs(proj)
    pen = (vm - mag) ** 2 / (2 * vm * am) + np.where(proj < 0, 2 * mag / am, 0.0)
    return float(lens.sum() / vm + pen.sum())


def dedupe(points) -> np.ndarray:
    pts = np.asarray(points, float).reshape(-1, 3)
    if len(pts) == 0:
        return pts
    keep = np.r_[True, np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-12]
    return pts[keep]


def estimate(points, v0=None, limits: MotionLimits = MotionLimits()) -> PathEstimate:
    pts = dedupe(points)
    if len(pts) < 2:
        return PathEstimate(pts, 0.0, 0.0)
    length = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
    return PathEstimate(pts, length, tour_cost(pts, v0, limits))


# -- open-path ordering -----------------------------------------------------------------

def _order_cost(C, order, end) -> float:
    c, prev = 0.0, 0
    for j in order:
        c += C[prev][j]
        prev = j
    if end is not None:
        c += C[prev][end]
    return c


def best_order(C, nodes: Sequence[int], end: int | None = None,
               exhaustive_limit: int = EXHAUSTIVE_LIMIT) -> tuple[list[int], float]:
    """Cheapest order to visit ``nodes`` starting from node 0 (optionally ending at ``end``).

    ``C`` may be asymmetric. Exhaustive up to ``exhaustive_limit`` nodes, otherwise
    nearest-neighbour construction followed by or-opt segment moves.
    """
    nodes = list(nodes)
    if not nodes:
        return [], (C[0][end] if end is not None else 0.0)
    if len(nodes) <= exhaustive_limit:
        best = (math.inf, None)
        for perm in itertools.permutations(nodes):
            c = _order_cost(C, perm, end)
            if c < best[0] - 1e-12:
                best = (c, list(perm))
        return best[1], best[0]
    order, left, cur = [], set(nodes), 0
    while left:
        nxt = min(left, key=lambda j: (C[cur][j], j))
        order.append(nxt)
        left.discard(nxt)
        cur = nxt
    cost = _order_cost(C, order, end)
    improved = True
    while improved:
        improved = False
        for seg in (1, 2, 3):
            for i in range(len(order) - seg + 1):
                block = order[i:i + seg]
                rest = order[:i] + order[i + seg:]
                for pos in range(len(rest) + 1):
                    if pos == i:
                        continue
                    for blk in (block, block[::-1]):
                        cand = rest[:pos] + blk + rest[pos:]
                        c = _order_cost(C, cand, end)
                        if c < cost - 1e-9:
                            order, cost, improved = cand, c, True
                            break
                    if improved:
                        break
                if improved:
                    break
            if improved:
                break
    return order, cost


def plan_global_tour(start, velocity, anchors: dict, route: Callable, limits: MotionLimits = MotionLimits(),
                     exhaustive_limit: int = EXHAUSTIVE_LIMIT) -> tuple[list, list]:
    """Order units for one agent by velocity-consistent traversal time.

    ``anchors`` maps unit id -> 3D point. ``route(a, b)`` returns the interior
    waypoints between two unit ids (``a`` is None for the agent itself), or None
    when unreachable. Leaving the agent uses its actual velocity; unit-to-unit
    edges use the aligned-entry convention. Returns ``(order, unreachable)``;
    unreachable units are appended last.
    """
    ids = sorted(anchors)
    if not ids:
        raise PlanError("empty unit sequence")
    keys = [None] + ids
    pts = [np.asarray(start, float)] + [np.asarray(anchors[u], float) for u in ids]
    n = len(pts)
    C = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(1, n):
            if i == j:
                continue
            wp = route(keys[i], keys[j])
            if wp is None:
                C[i][j] = math.inf
                continue
            v0 = velocity if i == 0 else None
            C[i][j] = estimate([pts[i], *wp, pts[j]], v0, limits).time
    reach = [j for j in range(1, n) if math.isfinite(C[0][j])]
    lost = [j for j in range(1, n) if j not in reach]
    order, _ = best_order(C, reach, None, exhaustive_limit)
    return [ids[j - 1] for j in order] + [ids[j - 1] for j in lost], [ids[j - 1] for j in lost]


# -- frontier clusters ---------------------------------------------------------------------

def _cluster(vmap: VoxelMap, members: np.ndarray) -> FrontierCluster:
    pts = vmap.centers(members)
    c = pts.mean(axis=0)
    if len(pts) > 1:
        cov = np.cov((pts - c).T)
        w, v = np.linalg.eigh(cov)
        axis = v[:, int(np.argmax(w))]
        proj = (pts - c) @ axis
        extent = float(proj.max() - proj.min())
    else:
        axis = np.array([1.0, 0.0, 0.0])
        extent = 0.0
    return FrontierCluster(members, c, axis, extent)


def cluster_frontiers(vmap: VoxelMap, scope: np.ndarray | None = None,
                      max_extent: float = SPLIT_EXTENT) -> list[FrontierCluster]:
    """26-connected frontier groups, recursively halved along their principal axis.

    ``scope`` is an optional boolean mask (or linear index array) restricting the
    frontier voxels considered.
    """
    mask = vmap.frontier_flags.copy()
    if scope is not None:
        scope = np.asarray(scope)
        if scope.dtype == bool:
            mask &= scope.reshape(vmap.dims)
        else:
            keep = np.zeros(vmap.size, bool)
            keep[scope] = True
            mask &= keep.reshape(vmap.dims)
    labels, n = ndimage.label(mask, structure=_STRUCT26)
    out = []
    flat = labels.reshape(-1)
    idx = np.flatnonzero(flat)
    order = np.argsort(flat[idx], kind="stable")
    idx = idx[order]
    groups = np.split(idx, np.flatnonzero(np.diff(flat[idx])) + 1) if idx.size else []
    stack = [_cluster(vmap, g) for g in groups]
    while stack:
        cl = stack.pop(0)
        if cl.extent <= max_extent or len(cl.members) < 2:
            out.append(cl)
            continue
        proj = (vmap.centers(cl.members) - cl.centroid) @ cl.axis
        lo, hi = cl.members[proj < 0], cl.members[proj >= 0]
        if lo.size == 0 or hi.size == 0:
            out.append(cl)
            continue
        stack[:0] = [_cluster(vmap, lo), _cluster(vmap, hi)]
    return out


# -- viewpoints ------------------------------------------------------------------------------

def line_of_sight(vmap: VoxelMap, origin, targets: np.ndarray, step: float | None = None) -> np.ndarray:
    """Whether each target voxel centre is seen from ``origin``.

    The segment is sampled every ``step`` metres (default a quarter voxel); every
    sampled voxel other than the target must be FREE.
    """
    targets = np.asarray(targets, float).reshape(-1, 3)
    if len(targets) == 0:
        return np.zeros(0, bool)
    o = np.asarray(origin, float)
    res = vmap.resolution
    step = step or res / 4.0
    d = targets - o
    dist = np.linalg.norm(d, axis=1)
    n = max(int(math.ceil(dist.max() / step)), 1)
    t = np.linspace(0.0, 1.0, n + 1)
    pts = o[None, None, :] + t[None, :, None] * d[:, None, :]
    ijk = np.floor((pts - vmap.origin) / res).astype(np.int64)
    ijk = np.clip(ijk, 0, np.array(vmap.dims) - 1)
    tgt = np.floor((targets - vmap.origin) / res).astype(np.int64)
    state = vmap.cells[ijk[..., 0], ijk[..., 1], ijk[..., 2]]
    at_target = np.all(ijk == tgt[:, None, :], axis=2)
    blocked = (state != FREE) & ~at_target
    return ~blocked.any(axis=1)


def visible_count(vmap: VoxelMap, position, cluster: FrontierCluster, sensor_range: float = SENSOR_RANGE) -> int:
    pts = vmap.centers(cluster.members)
    near = np.linalg.norm(pts - np.asarray(position, float), axis=1) <= sensor_range
    if not near.any():
        return 0
    return int(line_of_sight(vmap, position, pts[near]).sum())


def _free_z(vmap: VoxelMap, x: float, y: float, z: float) -> float | None:
    """Voxel-centre height nearest ``z`` in the (x, y) column that is FREE."""
    if not vmap.contains_point((x, y, z)):
        p = np.array([x, y, vmap.origin[2] + 0.5 * vmap.resolution])
        if not vmap.contains_point(p):
            return None
    i, j, k = vmap.index_of((x, y, np.clip(z, vmap.origin[2], vmap.origin[2] + vmap.extent[2] - 1e-9)))
    col = vmap.cells[i, j, :]
    free = np.flatnonzero(col == FREE)
    if free.size == 0:
        return None
    kk = int(free[np.argmin(np.abs(free - k))])
    return float(vmap.origin[2] + (kk + 0.5) * vmap.resolution)


def candidate_viewpoints(cluster: FrontierCluster, vmap: VoxelMap, radii=RING_RADII,
                         n_yaw: int = RING_YAWS) -> list[np.ndarray]:
    """Ring samples around the centroid whose voxel is FREE."""
    out = []
    c = cluster.centroid
    for r in radii:
        for k in range(n_yaw):
            th = 2 * math.pi * k / n_yaw
            x, y = c[0] + r * math.cos(th), c[1] + r * math.sin(th)
            z = _free_z(vmap, x, y, c[2])
            if z is None:
                continue
            i, j, kk = vmap.index_of((x, y, z))
            out.append(vmap.center((i, j, kk)))
    return out


def sample_viewpoints(cluster: FrontierCluster, vmap: VoxelMap, agent_position,
                      sensor_range: float = SENSOR_RANGE, radii=RING_RADII, n_yaw: int = RING_YAWS,
                      admissible: Callable | None = None) -> Viewpoint | None:
    """Best viewpoint for a cluster, or None when every candidate sees nothing.

    Candidates are ring samples; if none covers a frontier voxel, the cluster's
    own frontier voxels are tried. ``admissible(point)`` can veto candidates
    (for example ones the agent cannot reach). Ties go to the candidate nearer
    the agent.
    """
    agent_position = np.asarray(agent_position, float)

    def pick(cands):
        best = None
        for p in cands:
            if admissible is not None and not admissible(p):
                continue
            n = visible_count(vmap, p, cluster, sensor_range)
            if n < 1:
                continue
            key = (-n, float(np.linalg.norm(p - agent_position)))
            if best is None or key < best[0]:
                best = (key, p, n)
        return best

    best = pick(candidate_viewpoints(cluster, vmap, radii, n_yaw))
    if best is None:
        pts = vmap.centers(cluster.members)
        order = np.argsort(np.linalg.norm(pts - cluster.centroid, axis=1), kind="stable")
        best = pick([pts[i] for i in order])
    if best is None:
        return None
    _, p, n = best
    yaw = math.atan2(cluster.centroid[1] - p[1], cluster.centroid[0] - p[0])
    return Viewpoint(np.asarray(p, float), yaw, n)


def plan_local_tour(start, viewpoints: list, end, cost: Callable,
                    exhaustive_limit: int = EXHAUSTIVE_LIMIT) -> list:
    """Order viewpoints between a fixed start and an optional fixed end.

    ``cost(a, b)`` is the travel cost between two points. Returns the viewpoint
    objects in visiting order.
    """
    pts = [np.asarray(start, float)] + [np.asarray(getattr(v, "position", v), float) for v in viewpoints]
    n = len(pts)
    has_end = end is not None
    if has_end:
        pts.append(np.asarray(end, float))
    m = len(pts)
    C = [[0.0 if i == j else float(cost(pts[i], pts[j])) for j in range(m)] for i in range(m)]
    order, _ = best_order(C, range(1, n), n if has_end else None, exhaustive_limit)
    return [viewpoints[j - 1] for j in order]


# -- execution ---------------------------------------------------------------------------------

@dataclass
class PathFollower:
    """Constant-speed polyline tracking; turns are instantaneous."""

    waypoints: list = field(default_factory=list)

    def set(self, waypoints) -> None:
        self.waypoints = [np.asarray(w, float) for w in waypoints]

    @property
    def done(self) -> bool:
        return not self.waypoints

    def advance(self, position, speed: float, dt: float) -> np.ndarray:
        """Position after one tick; consumes reached waypoints."""
        p = np.asarray(position, float).copy()
        budget = speed * dt
        while self.waypoints and budget > 1e-12:
            w = self.waypoints[0]
            d = float(np.linalg.norm(w - p))
            if d <= budget + 1e-12:
                p = w.copy()
                budget -= d
                self.waypoints.pop(0)
            else:
                p = p + (w - p) * (budget / d)
                budget = 0.0
        return p

    def peek(self, position, speed: float, dt: float) -> np.ndarray:
        saved = list(self.waypoints)
        p = self.advance(position, speed, dt)
        self.waypoints = saved
        return p


def frontier_scope(vmap: VoxelMap, unknown_scope: np.ndarray) -> np.ndarray:
    """Frontier voxels face-adjacent to an UNKNOWN voxel inside ``unknown_scope`` (bool mask)."""
    unk = (vmap.cells == UNKNOWN) & unknown_scope.reshape(vmap.dims)
    grown = ndimage.binary_dilation(unk, structure=ndimage.generate_binary_structure(3, 1))
    return vmap.frontier_flags & grown
