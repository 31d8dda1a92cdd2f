"""Task units derived from unknown regions, their status machine and wire records."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import EDGE_PORTAL, EDGE_UNKNOWN, ConnectivityGraph, GridPartition
from .voxels import FREE, UNKNOWN, VoxelMap, touches_state

UNASSIGNED = -1
HULL_TOL = 1e-6


class Status(enum.IntEnum):
    PENDING = 0
    COMPLETED = 1
    INVALID = 2


class TaskError(ValueError):
    pass


# -- 2D hull -------------------------------------------------------------------

def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull (monotone chain); collinear points dropped."""
    pts = sorted({(float(x), float(y)) for x, y in np.asarray(points, float).reshape(-1, 2)})
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def points_in_hull(hull: np.ndarray, pts, tol: float = HULL_TOL) -> np.ndarray:
    pts = np.asarray(pts, float).reshape(-1, 2)
    n = len(hull)
    if n == 0:
        return np.zeros(len(pts), bool)
    if n == 1:
        return np.linalg.norm(pts - hull[0], axis=1) <= tol
    if n == 2:
        a, b = hull
        ab = b - a
        t = np.clip(((pts - a) @ ab) / float(ab @ ab), 0.0, 1.0)
        return np.linalg.norm(pts - (a + t[:, None] * ab), axis=1) <= tol
    inside = np.ones(len(pts), bool)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        e = b - a
        cr = e[0] * (pts[:, 1] - a[1]) - e[1] * (pts[:, 0] - a[0])
        inside &= cr >= -tol * max(1.0, float(np.linalg.norm(e)))
    return inside


# -- records ---------------------------------------------------------------------

@dataclass
class TaskUnit:
    id: int
    anchor: np.ndarray
    num: int
    hull: np.ndarray | None = None
    grid: int | None = None
    z_range: tuple[float, float] = (0.0, 0.0)
    owner: int = UNASSIGNED
    status: Status = Status.PENDING
    vertex: tuple | None = field(default=None, compare=False)
    members: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def split(self) -> bool:
        return self.hull is not None

    def scope_mask(self, vmap: VoxelMap, part: GridPartition) -> np.ndarray:
        """Voxels covered by the record's spatial descriptor."""
        mask = np.zeros(vmap.dims, bool)
        if self.grid is not None:
            mask[part.slices(self.grid)] = True
            return mask
        res = vmap.resolution
        lo = np.maximum(np.floor((np.r_[self.hull.min(axis=0), self.z_range[0]] - vmap.origin) / res), 0).astype(int)
        hi = np.minimum(np.ceil((np.r_[self.hull.max(axis=0), self.z_range[1]] - vmap.origin) / res),
                        vmap.dims).astype(int)
        if np.any(hi <= lo):
            return mask
        ii, jj, kk = np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij")
        ctr = vmap.origin + (np.stack([ii, jj, kk], -1) + 0.5) * res
        inside = points_in_hull(self.hull, ctr[..., :2].reshape(-1, 2)).reshape(ii.shape)
        inside &= (ctr[..., 2] >= self.z_range[0]) & (ctr[..., 2] <= self.z_range[1])
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = inside
        return mask


_HEAD = struct.Struct("<I3dB")
_TAIL = struct.Struct("<2dIhB")


def encode_unit(u: TaskUnit) -> bytes:
    """Fixed-order little-endian record: id, anchor, descriptor, z-range, NUM, owner, status."""
    out = [_HEAD.pack(u.id, *map(float, u.anchor), 1 if u.split else 0)]
    if u.split:
        hull = np.asarray(u.hull, float).reshape(-1, 2)
        out.append(struct.pack("<H", len(hull)))
        out.append(struct.pack(f"<{2 * len(hull)}d", *hull.ravel()))
    else:
        out.append(struct.pack("<I", u.grid))
    out.append(_TAIL.pack(float(u.z_range[0]), float(u.z_range[1]), int(u.num), int(u.owner), int(u.status)))
    return b"".join(out)


def decode_unit(buf: bytes, offset: int = 0) -> tuple[TaskUnit, int]:
    uid, ax, ay, az, split = _HEAD.unpack_from(buf, offset)
    offset += _HEAD.size
    hull = grid = None
    if split:
        (n,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        hull = np.array(struct.unpack_from(f"<{2 * n}d", buf, offset), float).reshape(n, 2)
        offset += 16 * n
    else:
        (grid,) = struct.unpack_from("<I", buf, offset)
        offset += 4
    z0, z1, num, owner, status = _TAIL.unpack_from(buf, offset)
    offset += _TAIL.size
    unit = TaskUnit(uid, np.array([ax, ay, az]), num, hull, grid, (z0, z1), owner, Status(status))
    return unit, offset


def public_copy(u: TaskUnit) -> TaskUnit:
    """Record as carried on the wire: no vertex key, no member voxels."""
    return replace(u, anchor=np.array(u.anchor, float),
                   hull=None if u.hull is None else np.array(u.hull, float), vertex=None, members=None)


# -- ledger ----------------------------------------------------------------------

@dataclass
class TaskLedger:
    units: dict = field(default_factory=dict)
    vertex_unit: dict = field(default_factory=dict)
    next_id: int = 0
    version: tuple = (0, 0, 0)

    def pending(self) -> list[TaskUnit]:
        return [u for _, u in sorted(self.units.items()) if u.status == Status.PENDING]

    def by_status(self, status: Status) -> list[TaskUnit]:
        return [u for _, u in sorted(self.units.items()) if u.status == status]

    def _new_id(self) -> int:
        self.next_id += 1
        return self.next_id


def _z_range(vmap: VoxelMap, part: GridPartition, gid: int) -> tuple[float, float]:
    zs = part.slices(gid)[2]
    z0 = vmap.origin[2] + (zs.start + 0.5) * vmap.resolution
    z1 = vmap.origin[2] + (zs.stop - 0.5) * vmap.resolution
    return (float(z0), float(z1))


def derive_units(graph: ConnectivityGraph, ledger: TaskLedger, vmap: VoxelMap) -> TaskLedger:
    """Match UNKNOWN vertices to units by voxel overlap and refresh every record (in place)."""
    part = graph.partition
    new_vertices = sorted(k for k, v in graph.vertices.items() if v.kind == UNKNOWN)
    old_of_voxel = np.full(vmap.size, -1, dtype=np.int64)
    for uid, u in ledger.units.items():
        if u.status != Status.COMPLETED and u.members is not None:
            old_of_voxel[u.members] = uid
    # best previous unit for each vertex
    claims: dict[int, list] = {}
    for key in new_vertices:
        owners = old_of_voxel[graph.vertices[key].members]
        owners = owners[owners >= 0]
        if owners.size == 0:
            continue
        ids, counts = np.unique(owners, return_counts=True)
        best = int(ids[np.argmax(counts)])  # np.unique sorts, argmax keeps the lower id on ties
        claims.setdefault(best, []).append((-int(counts.max()), key))
    inherit: dict = {}
    for uid, lst in claims.items():
        lst.sort()
        inherit[lst[0][1]] = uid
    split_grids = {g for g, keys in graph.by_grid.items()
                   if sum(1 for k in keys if graph.vertices[k].kind == UNKNOWN) > 1}
    live = set()
    vertex_unit = {}
    for key in new_vertices:
        v = graph.vertices[key]
        uid = inherit.get(key)
        if uid is None:
            uid = ledger._new_id()
            unit = TaskUnit(uid, v.anchor.copy(), v.size)
            ledger.units[uid] = unit
        unit = ledger.units[uid]
        unit.anchor = v.anchor.copy()
        unit.num = v.size
        unit.members = v.members
        unit.vertex = key
        unit.z_range = _z_range(vmap, part, v.grid)
        if v.grid in split_grids:
            unit.hull = convex_hull(vmap.centers(v.members)[:, :2])
            unit.grid = None
        else:
            unit.hull = None
            unit.grid = v.grid
        live.add(uid)
        vertex_unit[key] = uid
    for uid, u in ledger.units.items():
        if uid not in live and u.status == Status.PENDING:
            u.status = Status.COMPLETED
            u.num = 0
            u.members = None
            u.vertex = None
    ledger.vertex_unit = vertex_unit
    return ledger


def reachable_unknown_vertices(graph: ConnectivityGraph, vmap: VoxelMap) -> set:
    """UNKNOWN vertices whose unknown-edge component reaches free space."""
    free_adjacent = touches_state(vmap.cells, FREE).reshape(-1)
    unknown = [k for k, v in graph.vertices.items() if v.kind == UNKNOWN]
    seen: set = set()
    reach: set = set()
    for start in sorted(unknown):
        if start in seen:
            continue
        comp = [start]
        seen.add(start)
        i = 0
        while i < len(comp):
            for nb, (_, kind) in graph.adj.get(comp[i], {}).items():
                if kind == EDGE_UNKNOWN and nb not in seen:
                    seen.add(nb)
                    comp.append(nb)
            i += 1
        ok = any(
            any(kind == EDGE_PORTAL for _, kind in graph.adj.get(k, {}).values())
            or bool(free_adjacent[graph.vertices[k].members].any())
            for k in comp
        )
        if ok:
            reach.update(comp)
    return reach


def mark_invalid(graph: ConnectivityGraph, ledger: TaskLedger, vmap: VoxelMap) -> set[int]:
    """Flag PENDING units whose unknown component cannot reach free space."""
    reach = reachable_unknown_vertices(graph, vmap)
    out = set()
    for key, uid in ledger.vertex_unit.items():
        u = ledger.units[uid]
        if u.status == Status.PENDING and key not in reach:
            u.status = Status.INVALID
            out.add(uid)
    return out


def derive_grid_units(vmap: VoxelMap, part: GridPartition, ledger: TaskLedger) -> TaskLedger:
    """Topology-agnostic units: one per grid at the centroid of its unknown voxels."""
    gmap = part.voxel_grid_map().reshape(-1)
    unk = np.flatnonzero(vmap.cells.reshape(-1) == UNKNOWN)
    grids = gmap[unk]
    order = np.argsort(grids, kind="stable")
    unk, grids = unk[order], grids[order]
    live = set()
    by_grid = {u.grid: u for u in ledger.units.values() if u.status == Status.PENDING}
    if unk.size:
        bounds = np.flatnonzero(np.diff(grids)) + 1
        for members in np.split(unk, bounds):
            gid = int(part.grids_of(members[:1])[0])
            unit = by_grid.get(gid)
            if unit is None:
                unit = TaskUnit(ledger._new_id(), np.zeros(3), 0, grid=gid)
                ledger.units[unit.id] = unit
            unit.anchor = vmap.centers(members).mean(axis=0)
            unit.num = int(members.size)
            unit.members = members
            unit.z_range = _z_range(vmap, part, gid)
            live.add(unit.id)
    for u in ledger.units.values():
        if u.id not in live and u.status == Status.PENDING:
            u.status = Status.COMPLETED
            u.num = 0
            u.members = None
    ledger.vertex_unit = {}
    return ledger
