"""Dense voxel occupancy maps, ray-cast sensing, frontiers and map-delta exchange."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

UNKNOWN = 0
FREE = 1
OCCUPIED = 2

STATE_NAMES = {UNKNOWN: "UNKNOWN", FREE: "FREE", OCCUPIED: "OCCUPIED"}

# 6-connected face neighbours
FACE_OFFSETS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64
)

OVERLAP_EPS = 1e-9


class MapError(ValueError):
    pass


@dataclass
class VoxelMap:
    origin: np.ndarray
    resolution: float
    dims: tuple[int, int, int]
    cells: np.ndarray = None
    frontier_flags: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.resolution <= 0:
            raise MapError("resolution must be positive")
        if any(d < 1 for d in self.dims):
            raise MapError("dims must all be >= 1")
        if self.cells is None:
            self.cells = np.zeros(self.dims, dtype=np.int8)
        else:
            self.cells = np.asarray(self.cells, dtype=np.int8)
            if self.cells.shape != self.dims:
                raise MapError(f"cells shape {self.cells.shape} != dims {self.dims}")
        if self.frontier_flags is None:
            self.frontier_flags = full_frontier_scan(self.cells)

    @classmethod
    def unknown_like(cls, other: "VoxelMap") -> "VoxelMap":
        return cls(other.origin.copy(), other.resolution, other.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.dims, dtype=float) * self.resolution

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def copy(self) -> "VoxelMap":
        return VoxelMap(self.origin.copy(), self.resolution, self.dims,
                        self.cells.copy(), self.frontier_flags.copy())

    def contains_point(self, p) -> bool:
        rel = (np.asarray(p, dtype=float) - self.origin) / self.resolution
        return bool(np.all(rel >= 0) and np.all(rel < np.array(self.dims)))

    def index_of(self, p) -> tuple[int, int, int]:
        """Voxel index (ix, iy, iz) holding point ``p``."""
        if not self.contains_point(p):
            raise MapError(f"point {tuple(np.round(p, 3))} outside map bounds")
        rel = (np.asarray(p, dtype=float) - self.origin) / self.resolution
        return tuple(int(v) for v in np.floor(rel))

    def center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def centers(self, linear: np.ndarray) -> np.ndarray:
        ijk = np.stack(np.unravel_index(np.asarray(linear, dtype=np.int64), self.dims), axis=-1)
        return self.origin + (ijk + 0.5) * self.resolution

    def linear(self, idx) -> int:
        return int(np.ravel_multi_index(tuple(idx), self.dims))

    def unravel(self, linear) -> tuple[int, int, int]:
        linear = int(linear)
        ny, nz = int(self.dims[1]), int(self.dims[2])
        return (linear // (ny * nz), (linear // nz) % ny, linear % nz)

    def state_at(self, p) -> int:
        return int(self.cells[self.index_of(p)])

    def unknown_count(self) -> int:
        return int(np.count_nonzero(self.cells == UNKNOWN))

    def frontier_indices(self) -> np.ndarray:
        return np.flatnonzero(self.frontier_flags.ravel())

    def fingerprint(self) -> bytes:
        return self.cells.tobytes()


@dataclass
class AgentState:
    id: int
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    path_log: list = field(default_factory=list)
    distance_traveled: float = 0.0
    idle: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        if not self.path_log:
            self.path_log = [self.position.copy()]

    def move_to(self, p, dt: float) -> None:
        p = np.asarray(p, dtype=float)
        step = float(np.linalg.norm(p - self.position))
        self.velocity = (p - self.position) / dt if dt > 0 else np.zeros(3)
        self.position = p.copy()
        self.path_log.append(p.copy())
        self.distance_traveled += step

    def hold(self) -> None:
        self.velocity = np.zeros(3)
        self.path_log.append(self.position.copy())


@dataclass
class MapDelta:
    indices: np.ndarray
    states: np.ndarray
    source: int = -1
    tick: int = 0

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).ravel()
        self.states = np.asarray(self.states, dtype=np.int8).ravel()
        if self.indices.shape != self.states.shape:
            raise MapError("delta indices and states differ in length")

    def __len__(self) -> int:
        return int(self.indices.size)

    @classmethod
    def empty(cls, source: int = -1, tick: int = 0) -> "MapDelta":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int8), source, tick)


# -- frontiers ---------------------------------------------------------------

def _neighbor_unknown(cells: np.ndarray) -> np.ndarray:
    """Boolean mask: voxel has at least one 6-connected UNKNOWN neighbour."""
    unk = cells == UNKNOWN
    out = np.zeros_like(unk)
    out[1:] |= unk[:-1]
    out[:-1] |= unk[1:]
    out[:, 1:] |= unk[:, :-1]
    out[:, :-1] |= unk[:, 1:]
    out[:, :, 1:] |= unk[:, :, :-1]
    out[:, :, :-1] |= unk[:, :, 1:]
    return out


def full_frontier_scan(cells: np.ndarray) -> np.ndarray:
    return (cells == FREE) & _neighbor_unknown(cells)


def touches_state(cells: np.ndarray, state: int) -> np.ndarray:
    """Mask of voxels with a 6-neighbour in ``state``."""
    m = cells == state
    out = np.zeros_like(m)
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    out[:, :, 1:] |= m[:, :, :-1]
    out[:, :, :-1] |= m[:, :, 1:]
    return out


def _with_face_neighbors(indices: np.ndarray, dims) -> np.ndarray:
    if indices.size == 0:
        return indices
    ijk = np.stack(np.unravel_index(indices, dims), axis=-1)
    cand = (ijk[:, None, :] + np.vstack([np.zeros((1, 3), np.int64), FACE_OFFSETS])[None]).reshape(-1, 3)
    ok = np.all((cand >= 0) & (cand < np.array(dims)), axis=1)
    cand = cand[ok]
    return np.unique(np.ravel_multi_index(cand.T, dims))


def update_frontiers(vmap: VoxelMap, changed: MapDelta | np.ndarray) -> np.ndarray:
    """Refresh frontier flags around changed voxels; return all frontier indices.

    The delta must already be applied to ``vmap``.
    """
    idx = changed.indices if isinstance(changed, MapDelta) else np.asarray(changed, np.int64)
    if idx.size:
        touched = _with_face_neighbors(idx, vmap.dims)
        ijk = np.unravel_index(touched, vmap.dims)
        cells = vmap.cells
        flags = cells[ijk] == FREE
        has_unknown = np.zeros(touched.size, dtype=bool)
        for off in FACE_OFFSETS:
            n = [ijk[a] + off[a] for a in range(3)]
            ok = np.ones(touched.size, dtype=bool)
            for a in range(3):
                ok &= (n[a] >= 0) & (n[a] < vmap.dims[a])
            vals = np.full(touched.size, FREE, dtype=np.int8)
            vals[ok] = cells[n[0][ok], n[1][ok], n[2][ok]]
            has_unknown |= vals == UNKNOWN
        vmap.frontier_flags[ijk] = flags & has_unknown
    return vmap.frontier_indices()


# -- delta application / merge ----------------------------------------------

def apply_delta(vmap: VoxelMap, delta: MapDelta) -> MapDelta:
    """Apply ``delta`` in place with OCCUPIED-wins conflict handling.

    Returns the effective changes. Frontier flags are not touched.
    """
    if len(delta) == 0:
        return MapDelta.empty(delta.source, delta.tick)
    if delta.indices.min() < 0 or delta.indices.max() >= vmap.size:
        raise MapError("delta index out of map bounds")
    flat = vmap.cells.reshape(-1)
    cur = flat[delta.indices]
    new = delta.states
    adopt = (cur == UNKNOWN) & (new != UNKNOWN)
    conflict = (cur == FREE) & (new == OCCUPIED)
    take = adopt | conflict
    idx = delta.indices[take]
    vals = new[take]
    # duplicate indices inside one delta: OCCUPIED wins
    if idx.size:
        order = np.lexsort((-vals, idx))
        idx, vals = idx[order], vals[order]
        first = np.ones(idx.size, bool)
        first[1:] = idx[1:] != idx[:-1]
        idx, vals = idx[first], vals[first]
        flat[idx] = vals
    return MapDelta(idx, vals, delta.source, delta.tick)


def merge_deltas(vmap: VoxelMap, remote: MapDelta) -> VoxelMap:
    """Merge a remote delta into ``vmap`` (in place) and refresh frontiers."""
    applied = apply_delta(vmap, remote)
    update_frontiers(vmap, applied)
    return vmap


def diff(known: VoxelMap, other: VoxelMap, source: int = -1, tick: int = 0) -> MapDelta:
    """Knowledge in ``other`` that ``known`` lacks or contradicts."""
    a = known.cells.reshape(-1)
    b = other.cells.reshape(-1)
    sel = (b != UNKNOWN) & ((a == UNKNOWN) | ((a == FREE) & (b == OCCUPIED)))
    idx = np.flatnonzero(sel)
    return MapDelta(idx, b[idx], source, tick)


# -- sensing -------------------------------------------------------------------

@dataclass(frozen=True)
class RaySensor:
    range_m: float = 10.0
    az_step_deg: float = 2.0
    el_step_deg: float = 5.0

    def directions(self) -> np.ndarray:
        az = np.deg2rad(np.arange(0.0, 360.0 - 1e-9, self.az_step_deg))
        n_el = int(round(180.0 / self.el_step_deg))
        el = np.deg2rad(np.linspace(-90.0, 90.0, n_el + 1))
        A, E = np.meshgrid(az, el, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return d.reshape(-1, 3)

    def table(self, resolution: float) -> "RayTable":
        return _ray_table(self.range_m, self.az_step_deg, self.el_step_deg, float(resolution))


@dataclass(frozen=True)
class RayTable:
    offsets: np.ndarray  # (M, S, 3) voxel offsets from the origin voxel
    valid: np.ndarray  # (M, S)


def trace_ray(direction: Sequence[float], length: float, eps: float = OVERLAP_EPS) -> list[tuple[int, int, int]]:
    """Voxel offsets crossed by a ray from a voxel centre (voxel units).

    A voxel is crossed when the segment overlaps it by more than ``eps``.
    Near-simultaneous boundary crossings step every tied axis at once.
    """
    d = [float(v) for v in direction]
    norm = math.sqrt(sum(v * v for v in d))
    d = [v / norm for v in d]
    cell = [0, 0, 0]
    step = [0, 0, 0]
    t_max = [math.inf] * 3
    t_delta = [math.inf] * 3
    for a in range(3):
        if abs(d[a]) > 1e-12:
            step[a] = 1 if d[a] > 0 else -1
            t_delta[a] = 1.0 / abs(d[a])
            t_max[a] = 0.5 / abs(d[a])
    out = [(0, 0, 0)]
    while True:
        t_next = min(t_max)
        if t_next >= length - eps:
            break
        for a in range(3):
            if t_max[a] - t_next <= eps:
                cell[a] += step[a]
                t_max[a] += t_delta[a]
        out.append(tuple(cell))
    return out


@lru_cache(maxsize=16)
def _ray_table(range_m: float, az: float, el: float, res: float) -> RayTable:
    dirs = RaySensor(range_m, az, el).directions()
    length = range_m / res
    traces = {tuple(trace_ray(d, length)) for d in dirs}
    traces = sorted(traces)
    S = max(len(t) for t in traces)
    offsets = np.zeros((len(traces), S, 3), dtype=np.int64)
    valid = np.zeros((len(traces), S), dtype=bool)
    for i, t in enumerate(traces):
        offsets[i, : len(t)] = t
        valid[i, : len(t)] = True
    return RayTable(offsets, valid)


def sense(world: VoxelMap, known: VoxelMap, agent: AgentState, sensor: RaySensor,
          tick: int = 0) -> MapDelta:
    """Cast the sensor from the centre of the agent's voxel against ``world``.

    Returns what the agent's map ``known`` would learn; ``known`` is not modified.
    """
    if not world.contains_point(agent.position):
        raise MapError(f"agent {agent.id} outside map bounds")
    origin = np.array(world.index_of(agent.position))
    if world.cells[tuple(origin)] == OCCUPIED:
        raise MapError(f"agent {agent.id} inside an occupied voxel")
    idx, states = observe(world, origin, sensor)
    cur = known.cells.reshape(-1)[idx]
    keep = cur != states
    return MapDelta(idx[keep], states[keep], agent.id, tick)


def observe(world: VoxelMap, origin_idx, sensor: RaySensor) -> tuple[np.ndarray, np.ndarray]:
    """Linear indices and true states of every voxel seen from a voxel centre."""
    tab = sensor.table(world.resolution)
    dims = np.array(world.dims)
    pos = tab.offsets + np.asarray(origin_idx, dtype=np.int64)
    inb = tab.valid & np.all((pos >= 0) & (pos < dims), axis=-1)
    clipped = np.clip(pos, 0, dims - 1)
    state = world.cells[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
    occ = inb & (state == OCCUPIED)
    stop = ~inb | occ
    S = stop.shape[1]
    first = np.where(stop.any(axis=1), stop.argmax(axis=1), S)
    steps = np.arange(S)[None, :]
    seen = (steps < first[:, None]) | ((steps == first[:, None]) & occ)
    lin = np.ravel_multi_index((clipped[..., 0][seen], clipped[..., 1][seen], clipped[..., 2][seen]),
                               world.dims)
    st = state[seen]
    lin, where = np.unique(lin, return_index=True)
    return lin, st[where].astype(np.int8)


def known_state_counts(vmap: VoxelMap) -> dict[str, int]:
    vals, counts = np.unique(vmap.cells, return_counts=True)
    out = {name: 0 for name in STATE_NAMES.values()}
    for v, c in zip(vals, counts):
        out[STATE_NAMES[int(v)]] = int(c)
    return out


def union_map(maps: Iterable[VoxelMap]) -> VoxelMap:
    maps = list(maps)
    out = VoxelMap.unknown_like(maps[0])
    for m in maps:
        apply_delta(out, diff(out, m))
    out.frontier_flags = full_frontier_scan(out.cells)
    return out
