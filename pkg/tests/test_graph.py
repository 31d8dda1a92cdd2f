import math

import numpy as np
import pytest

from cexplore import graph as G
from cexplore.graph import (EDGE_FREE, EDGE_PORTAL, EDGE_UNKNOWN, ConnectivityGraph, GraphError, GridPartition,
                            RegionVertex, build_graph, dirty_grids, dump_graph, graph_distance, segment_grid,
                            update_graph)
from cexplore.voxels import FREE, OCCUPIED, UNKNOWN, MapDelta, VoxelMap, apply_delta
from oracles import flood_components


def random_map(rng, dims=(10, 10, 3), p=(0.4, 0.4, 0.2)):
    cells = rng.choice([UNKNOWN, FREE, OCCUPIED], size=dims, p=p).astype(np.int8)
    return VoxelMap((0.0, 0.0, 0.0), 1.0, dims, cells)


def test_partition_tiles_the_box():
    part = GridPartition((11, 7, 3), 5)
    assert part.counts == (3, 2, 1)
    owner = part.voxel_grid_map()
    for gid in range(part.n_grids):
        assert np.all(owner[part.slices(gid)] == gid)
    assert sorted(np.unique(owner).tolist()) == list(range(part.n_grids))


def test_all_free_grid_gives_one_vertex_at_centroid():
    vm = VoxelMap((0, 0, 0), 1.0, (5, 5, 3), np.full((5, 5, 3), FREE, np.int8))
    part = GridPartition.for_map(vm, 5.0)
    regions = segment_grid(vm, part, 0)
    assert len(regions) == 1 and regions[0].kind == FREE
    assert np.allclose(regions[0].anchor, (2.5, 2.5, 1.5))


def test_wall_splits_unknown_into_two_vertices():
    cells = np.full((5, 5, 3), UNKNOWN, np.int8)
    cells[2, :, :] = OCCUPIED
    vm = VoxelMap((0, 0, 0), 1.0, cells.shape, cells)
    regions = segment_grid(vm, GridPartition.for_map(vm, 5.0), 0)
    assert [r.kind for r in regions] == [UNKNOWN, UNKNOWN]
    assert sorted(r.size for r in regions) == [30, 30]


def test_segmentation_matches_flood_fill_on_100_grids():
    rng = np.random.default_rng(0)
    for _ in range(100):
        vm = random_map(rng, dims=(5, 5, 3))
        part = GridPartition.for_map(vm, 5.0)
        regions = segment_grid(vm, part, 0)
        for kind in (FREE, UNKNOWN):
            got = {frozenset(vm.unravel(i) for i in r.members) for r in regions if r.kind == kind}
            ref = {frozenset(c) for c in flood_components(vm.cells == kind)}
            assert got == ref
        for r in regions:
            assert np.allclose(r.anchor, vm.centers(r.members).mean(axis=0), atol=1e-9)


def edge_table(g):
    return {(u, v, k): ln for (u, v, k), ln in g.edges.items()}


def test_incremental_update_equals_rebuild_on_50_sequences():
    rng = np.random.default_rng(5)
    for _ in range(50):
        truth = random_map(rng, dims=(8, 8, 2), p=(0.0, 0.75, 0.25)).cells.reshape(-1)
        vm = VoxelMap((0.0, 0.0, 0.0), 1.0, (8, 8, 2))
        g = ConnectivityGraph.empty(vm, 4.0)
        update_graph(g, vm, range(g.partition.n_grids))
        for _ in range(int(rng.integers(2, 6))):
            idx = rng.choice(vm.size, size=int(rng.integers(5, 60)), replace=False)
            eff = apply_delta(vm, MapDelta(idx, truth[idx]))
            update_graph(g, vm, dirty_grids(g.partition, eff.indices))
        G._EDGE_MEMO.clear()
        ref = build_graph(vm, 4.0)
        assert set(g.vertices) == set(ref.vertices)
        for k in g.vertices:
            assert np.array_equal(g.vertices[k].members, ref.vertices[k].members)
        a, b = edge_table(g), edge_table(ref)
        assert set(a) == set(b)
        for k in a:
            assert a[k] == pytest.approx(b[k], abs=1e-6)


def test_empty_dirty_set_is_a_no_op():
    vm = random_map(np.random.default_rng(2))
    g = build_graph(vm, 5.0)
    before = dump_graph(g)
    update_graph(g, vm, set())
    assert dump_graph(g) == before


def test_edge_kinds_and_lengths_respect_invariants():
    rng = np.random.default_rng(9)
    for _ in range(10):
        vm = random_map(rng)
        g = build_graph(vm, 5.0)
        part = g.partition
        for (u, v, kind), ln in g.edges.items():
            a, b = g.vertices[u], g.vertices[v]
            assert ln >= np.linalg.norm(a.anchor - b.anchor) - 1e-9
            if kind == EDGE_PORTAL:
                assert a.grid == b.grid and {a.kind, b.kind} == {FREE, UNKNOWN}
            else:
                assert b.grid in part.neighbors(a.grid)
                assert a.kind == b.kind == (FREE if kind == EDGE_FREE else UNKNOWN)
        # every unknown voxel sits in exactly one unknown vertex
        count = np.zeros(vm.size, int)
        for v in g.vertices.values():
            if v.kind == UNKNOWN:
                count[v.members] += 1
        assert np.array_equal(count == 1, (vm.cells == UNKNOWN).reshape(-1))


def test_two_free_grids_one_edge():
    vm = VoxelMap((0, 0, 0), 1.0, (10, 5, 1), np.full((10, 5, 1), FREE, np.int8))
    g = build_graph(vm, 5.0)
    assert len(g.vertices) == 2
    ((key, ln),) = g.edges.items()
    assert key[2] == EDGE_FREE
    assert ln == pytest.approx(5.0)


def chain_graph():
    part = GridPartition((3, 1, 1), 1)
    g = ConnectivityGraph(part, 1.0, np.zeros(3))
    keys = []
    for i in range(3):
        v = RegionVertex(FREE, i, np.array([i]), np.array([i + 0.5, 0.5, 0.5]), i)
        g.vertices[v.key] = v
        g.by_grid[i] = [v.key]
        keys.append(v.key)
    g._add_edge(keys[0], keys[1], EDGE_FREE, 2.0)
    g._add_edge(keys[1], keys[2], EDGE_FREE, 3.0)
    return g, keys


def test_graph_distance_chain_and_identity():
    g, k = chain_graph()
    assert graph_distance(g, k[0], k[2]) == 5.0
    assert graph_distance(g, k[1], k[1]) == 0.0
    with pytest.raises(GraphError):
        graph_distance(g, k[0], (9, 9, 9))


def floyd(g):
    keys = sorted(g.vertices)
    n = len(keys)
    pos = {k: i for i, k in enumerate(keys)}
    D = np.full((n, n), math.inf)
    np.fill_diagonal(D, 0.0)
    for (u, v, _), ln in g.edges.items():
        D[pos[u], pos[v]] = min(D[pos[u], pos[v]], ln)
        D[pos[v], pos[u]] = D[pos[u], pos[v]]
    for m in range(n):
        D = np.minimum(D, D[:, m:m + 1] + D[m:m + 1, :])
    return keys, D


def test_graph_distance_matches_all_pairs():
    rng = np.random.default_rng(4)
    for _ in range(8):
        vm = random_map(rng, dims=(10, 10, 2))
        g = build_graph(vm, 5.0)
        keys, D = floyd(g)
        batch = g.distances_from(keys)
        for i, a in enumerate(keys):
            assert np.allclose(batch[i], D[i])
            for j in rng.choice(len(keys), size=min(5, len(keys)), replace=False):
                d = graph_distance(g, a, keys[j])
                assert d == pytest.approx(D[i, j]) if math.isfinite(D[i, j]) else math.isinf(d)


def test_dump_lists_vertices_and_edges():
    vm = VoxelMap((0, 0, 0), 1.0, (10, 5, 1), np.full((10, 5, 1), FREE, np.int8))
    text = dump_graph(build_graph(vm, 5.0))
    assert text.count("\nV ") == 2 and text.count("\nE ") == 1
