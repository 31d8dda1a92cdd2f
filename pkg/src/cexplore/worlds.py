"""Ground-truth worlds: plain-text voxel grids and seeded procedural generators.

Text format: optional ``@resolution <m>`` / ``@origin <x> <y> <z>`` header
lines, then one block per z-slice (z = 0 first) separated by blank lines.
Within a block line ``j`` is row ``y = j`` and character ``i`` is column
``x = i``; ``#`` is occupied and ``.`` is free.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .voxels import FREE, OCCUPIED, MapError, VoxelMap

GENERATORS = ("cubicle", "open-plan", "maze")


def parse_grid(text: str) -> VoxelMap:
    resolution = 1.0
    origin = (0.0, 0.0, 0.0)
    blocks: list[list[str]] = [[]]
    for raw in text.splitlines():
        line = raw.rstrip()
        if line.startswith("@"):
            key, *vals = line[1:].split()
            if key == "resolution":
                resolution = float(vals[0])
            elif key == "origin":
                origin = tuple(float(v) for v in vals)
            else:
                raise MapError(f"unknown header key {key!r}")
            continue
        if not line:
            if blocks[-1]:
                blocks.append([])
            continue
        blocks[-1].append(line)
    blocks = [b for b in blocks if b]
    if not blocks:
        raise MapError("empty grid file")
    ny = len(blocks[0])
    nx = len(blocks[0][0])
    cells = np.empty((nx, ny, len(blocks)), dtype=np.int8)
    for z, block in enumerate(blocks):
        if len(block) != ny or any(len(row) != nx for row in block):
            raise MapError(f"slice {z} is not {nx}x{ny}")
        for y, row in enumerate(block):
            for x, ch in enumerate(row):
                if ch == "#":
                    cells[x, y, z] = OCCUPIED
                elif ch == ".":
                    cells[x, y, z] = FREE
                else:
                    raise MapError(f"bad voxel character {ch!r}")
    return VoxelMap(origin, resolution, cells.shape, cells)


def format_grid(world: VoxelMap) -> str:
    lines = [f"@resolution {world.resolution:g}",
             "@origin " + " ".join(f"{v:g}" for v in world.origin)]
    nx, ny, nz = world.dims
    for z in range(nz):
        lines.append("")
        for y in range(ny):
            lines.append("".join("#" if world.cells[x, y, z] == OCCUPIED else "." for x in range(nx)))
    return "\n".join(lines) + "\n"


def load_grid(path) -> VoxelMap:
    return parse_grid(Path(path).read_text())


def _blank(size_m, resolution):
    dims = tuple(max(1, int(round(s / resolution))) for s in size_m)
    return np.full(dims, FREE, dtype=np.int8)


def _wall_x(c, x, y0, y1, gaps=()):
    """Full-height wall at column x spanning rows [y0, y1) with door gaps."""
    c[x, y0:y1, :] = OCCUPIED
    for g0, g1 in gaps:
        c[x, g0:g1, :] = FREE


def _wall_y(c, y, x0, x1, gaps=()):
    c[x0:x1, y, :] = OCCUPIED
    for g0, g1 in gaps:
        c[g0:g1, y, :] = FREE


def _room_edges(rng, start, stop, n_cuts, depth, door, n):
    """Partition cuts along a strip such that every room has space for a door."""
    lo_lim, hi_lim = depth + 1, n - depth - 1
    for _ in range(1000):
        cuts = sorted(int(v) for v in rng.choice(np.arange(depth + 3, n - depth - 3), size=n_cuts, replace=False))
        edges = [start, *cuts, stop]
        if all(min(b, hi_lim) - max(a + 1, lo_lim) >= door + 1 for a, b in zip(edges[:-1], edges[1:])):
            return edges
    raise MapError("cannot place room partitions")


def cubicle(seed: int, size_m=(30.0, 30.0, 3.0), resolution: float = 1.0) -> np.ndarray:
    """Perimeter rooms with doors around a corridor ring and a partitioned core.

    One perimeter room is sealed (no door) and stays unreachable.
    """
    rng = np.random.default_rng(seed)
    c = _blank(size_m, resolution)
    nx, ny, _ = c.shape
    depth = max(3, int(round(6.0 / resolution)))
    door = max(1, int(round(2.0 / resolution)))
    # inner boundary of the perimeter rooms
    _wall_y(c, depth, 0, nx)
    _wall_y(c, ny - depth - 1, 0, nx)
    _wall_x(c, depth, depth, ny - depth)
    _wall_x(c, nx - depth - 1, depth, ny - depth)
    rooms = []
    # south and north strips split into rooms along x
    for strip_y, wall_y in ((range(0, depth), depth), (range(ny - depth, ny), ny - depth - 1)):
        edges = _room_edges(rng, 0, nx, 2, depth, door, nx)
        for a, b in zip(edges[:-1], edges[1:]):
            if b < nx:
                _wall_x(c, b, strip_y.start, strip_y.stop)
            rooms.append(("y", wall_y, a + 1, b))
    for strip_x, wall_x in ((range(0, depth), depth), (range(nx - depth, nx), nx - depth - 1)):
        edges = _room_edges(rng, depth, ny - depth, 1, depth, door, ny)
        for a, b in zip(edges[:-1], edges[1:]):
            if b < ny - depth:
                _wall_y(c, b, strip_x.start, strip_x.stop)
            rooms.append(("x", wall_x, a + 1, b))
    sealed = int(rng.integers(len(rooms)))
    for k, (axis, w, a, b) in enumerate(rooms):
        lo, hi = max(a, depth + 1), min(b, (nx if axis == "y" else ny) - depth - 1)
        if k == sealed or hi - lo < door + 1:
            continue
        d0 = int(rng.integers(lo, hi - door + 1))
        if axis == "y":
            c[d0:d0 + door, w, :] = FREE
        else:
            c[w, d0:d0 + door, :] = FREE
    # core: low cubicle partitions that leave the top layer open
    core = (depth + 2, nx - depth - 2, depth + 2, ny - depth - 2)
    for _ in range(int(rng.integers(4, 8))):
        x = int(rng.integers(core[0], core[1]))
        y0 = int(rng.integers(core[2], core[3] - 3))
        c[x, y0:y0 + 3, : max(1, c.shape[2] - 1)] = OCCUPIED
    return c


def open_plan(seed: int, size_m=(30.0, 30.0, 3.0), resolution: float = 1.0) -> np.ndarray:
    """Scattered desks and pillars with a few partial partitions.

    One hollow pillar encloses an unreachable pocket.
    """
    rng = np.random.default_rng(seed)
    c = _blank(size_m, resolution)
    nx, ny, nz = c.shape
    margin = max(3, int(round(4.0 / resolution)))
    for _ in range(int(rng.integers(3, 5))):
        if rng.random() < 0.5:
            x = int(rng.integers(margin, nx - margin))
            y0 = int(rng.integers(margin, ny - margin - 8))
            c[x, y0:y0 + int(rng.integers(5, 9)), :] = OCCUPIED
        else:
            y = int(rng.integers(margin, ny - margin))
            x0 = int(rng.integers(margin, nx - margin - 8))
            c[x0:x0 + int(rng.integers(5, 9)), y, :] = OCCUPIED
    for _ in range(int(rng.integers(10, 16))):
        x = int(rng.integers(margin, nx - margin - 2))
        y = int(rng.integers(margin, ny - margin - 1))
        c[x:x + 2, y:y + 1, : max(1, nz - 1)] = OCCUPIED
    # hollow pillar: 3x3 shell around one sealed voxel column
    px = int(rng.integers(margin + 2, nx - margin - 3))
    py = int(rng.integers(margin + 2, ny - margin - 3))
    c[px - 1:px + 2, py - 1:py + 2, :] = OCCUPIED
    c[px, py, :] = FREE
    return c


def maze(seed: int, size_m=(30.0, 30.0, 3.0), resolution: float = 1.0) -> np.ndarray:
    """Recursive-division maze with wide passages."""
    rng = np.random.default_rng(seed)
    c = _blank(size_m, resolution)
    nx, ny, _ = c.shape
    door = max(2, int(round(2.0 / resolution)))
    min_room = max(5, int(round(6.0 / resolution)))

    def divide(x0, x1, y0, y1, depth):
        w, h = x1 - x0, y1 - y0
        if depth > 4 or (w < 2 * min_room and h < 2 * min_room):
            return
        vertical = w >= h if w != h else bool(rng.random() < 0.5)
        if vertical and w >= 2 * min_room:
            x = int(rng.integers(x0 + min_room, x1 - min_room + 1))
            g = int(rng.integers(y0, y1 - door + 1))
            _wall_x(c, x, y0, y1, gaps=[(g, g + door)])
            divide(x0, x, y0, y1, depth + 1)
            divide(x + 1, x1, y0, y1, depth + 1)
        elif h >= 2 * min_room:
            y = int(rng.integers(y0 + min_room, y1 - min_room + 1))
            g = int(rng.integers(x0, x1 - door + 1))
            _wall_y(c, y, x0, x1, gaps=[(g, g + door)])
            divide(x0, x1, y0, y, depth + 1)
            divide(x0, x1, y + 1, y1, depth + 1)

    divide(0, nx, 0, ny, 0)
    return c


_GEN = {"cubicle": cubicle, "open-plan": open_plan, "maze": maze}
# where agents are launched from, in metres (x, y)
START_CORNER = {"cubicle": (8.5, 8.5), "open-plan": (1.5, 1.5), "maze": (1.5, 1.5)}


def generate(kind: str, seed: int, size_m=(30.0, 30.0, 3.0), resolution: float = 1.0,
             starts=()) -> VoxelMap:
    """Build a ground-truth world; voxels around ``starts`` are cleared."""
    try:
        fn = _GEN[kind]
    except KeyError:
        raise MapError(f"unknown generator {kind!r}; expected one of {GENERATORS}") from None
    cells = fn(seed, size_m, resolution)
    world = VoxelMap((0.0, 0.0, 0.0), resolution, cells.shape, cells)
    for p in starts:
        world.cells[world.index_of(p)] = FREE
    return world


def default_starts(world: VoxelMap, n: int, corner=(1.5, 1.5)) -> list[np.ndarray]:
    """``n`` free voxel centres packed near a corner at mid height."""
    z = world.dims[2] // 2
    cx, cy = (int((v - o) / world.resolution) for v, o in zip(corner, world.origin[:2]))
    out = []
    for r in range(max(world.dims)):
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                if max(abs(dx), abs(dy)) != r:
                    continue
                x, y = cx + dx, cy + dy
                if 0 <= x < world.dims[0] and 0 <= y < world.dims[1] and world.cells[x, y, z] == FREE:
                    out.append(world.center((x, y, z)))
                    if len(out) == n:
                        return out
    raise MapError("not enough free start voxels")
