"""Scenario configuration and the deterministic multi-agent exploration loop."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse.csgraph import dijkstra

from . import allocation as alloc
from .dispatch import DispatchNode, Kind, NetworkModel, Outcome, Phase, TraceLog, components
from .graph import ConnectivityGraph, GridPartition, dirty_grids, dump_graph, update_graph
from .paths import lattice_distances, lattice_graph, unwind
from .planner import (MotionLimits, PathFollower, cluster_frontiers, frontier_scope, plan_global_tour,
                      plan_local_tour, sample_viewpoints)
from .tasks import Status, TaskLedger, derive_grid_units, derive_units, mark_invalid, public_copy
from .voxels import (FREE, OCCUPIED, UNKNOWN, AgentState, MapDelta, RaySensor, VoxelMap, apply_delta,
                     full_frontier_scan, sense, update_frontiers)
from .worlds import START_CORNER, default_starts, generate, load_grid

log = logging.getLogger(__name__)

MODES = ("full", "no-con", "no-graph", "greedy")
REPLAN_PERIOD = 10
BEACON_PERIOD = 10
LEDGER_PERIOD = 5
REALLOC_PERIOD = 20
SOLVER_MOVES = 400
SOLVER_RESTARTS = 1


class ConfigError(ValueError):
    pass


# -- scenario ---------------------------------------------------------------------

@dataclass
class NetworkParams:
    drop: float = 0.0
    delay: tuple = (1, 1)
    dup: float = 0.0
    reorder: bool = False


@dataclass
class SensorParams:
    range: float = 10.0
    az_step: float = 2.0
    el_step: float = 5.0


@dataclass
class MapSource:
    generator: str | None = "open-plan"
    file: str | None = None
    seed: int | None = None


@dataclass
class ScenarioConfig:
    map: MapSource = field(default_factory=MapSource)
    size_m: tuple = (30.0, 30.0, 3.0)
    resolution: float = 1.0
    agents: int = 4
    starts: list | None = None
    r_comm: float = 5.0
    v_max: float = 2.0
    omega_max: float = 2.0
    a_max: float = 2.0
    sigma_q: float = 1.1
    lambda_c: float = 1.2
    grid_edge: float = 5.0
    d_thr: float | None = None
    network: NetworkParams = field(default_factory=NetworkParams)
    sensor: SensorParams = field(default_factory=SensorParams)
    dt: float = 0.1
    mode: str = "full"
    seed: int = 0
    max_ticks: int = 10000
    realloc_period: int = REALLOC_PERIOD

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("resolution", "r_comm", "v_max", "omega_max", "a_max", "grid_edge", "dt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.agents < 1 or self.max_ticks < 1 or self.realloc_period < 1:
            raise ConfigError("agents, max_ticks and realloc_period must be >= 1")
        if self.map.generator is None and self.map.file is None:
            raise ConfigError("map needs a generator or a file")
        if self.starts is not None and len(self.starts) != self.agents:
            raise ConfigError("starts must list one position per agent")

    @property
    def map_seed(self) -> int:
        return self.seed if self.map.seed is None else self.map.seed

    def limits(self) -> MotionLimits:
        return MotionLimits(self.v_max, self.omega_max, self.a_max)

    def cost_params(self) -> alloc.CostParams:
        return alloc.CostParams(self.sigma_q, self.lambda_c, self.grid_edge, self.d_thr,
                                penalty=self.mode != "no-con", use_graph=self.mode != "no-graph")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if math.isinf(self.r_comm):
            d["r_comm"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        nested = {"map": MapSource, "network": NetworkParams, "sensor": SensorParams}
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, val in d.items():
            if key not in names:
                raise ConfigError(f"unknown scenario key {key!r}")
            if key in nested:
                sub = nested[key]
                allowed = {f.name for f in dataclasses.fields(sub)}
                if not isinstance(val, dict):
                    raise ConfigError(f"{key} must be a table")
                bad = set(val) - allowed
                if bad:
                    raise ConfigError(f"unknown {key} key(s): {sorted(bad)}")
                if "delay" in val:
                    val = dict(val, delay=tuple(val["delay"]))
                val = sub(**val)
            elif key == "r_comm" and (val is None or val == "inf"):
                val = math.inf
            elif key == "size_m":
                val = tuple(float(v) for v in val)
            kwargs[key] = val
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()))
        if cfg.map.file is not None and not Path(cfg.map.file).is_absolute():
            cfg.map.file = str((path.parent / cfg.map.file).resolve())
        return cfg

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def build_world(cfg: ScenarioConfig) -> tuple[VoxelMap, list]:
    if cfg.map.file is not None:
        world = load_grid(cfg.map.file)
        corner = (world.origin[0] + 1.5 * world.resolution, world.origin[1] + 1.5 * world.resolution)
    else:
        corner = START_CORNER[cfg.map.generator]
        world = generate(cfg.map.generator, cfg.map_seed, cfg.size_m, cfg.resolution)
    if cfg.starts is not None:
        starts = [np.asarray(s, float) for s in cfg.starts]
    else:
        starts = default_starts(world, cfg.agents, corner)
    for s in starts:
        if not world.contains_point(s) or world.state_at(s) != FREE:
            raise ConfigError(f"start {list(s)} is not in free space")
    return world, starts


def reachable_free(world: VoxelMap, starts) -> np.ndarray:
    """Ground-truth FREE voxels 6-connected to a start voxel (boolean mask)."""
    labels, _ = ndimage.label(world.cells == FREE)
    ids = {int(labels[world.index_of(s)]) for s in starts}
    return np.isin(labels, list(ids))


# -- metrics ----------------------------------------------------------------------

@dataclass
class RunMetrics:
    status: str = "RUNNING"
    mode: str = "full"
    seed: int = 0
    ticks: int = 0
    exploration_time: float = 0.0
    path_lengths: dict = field(default_factory=dict)
    total_path_length: float = 0.0
    mean_velocity: float = 0.0
    coverage: list = field(default_factory=list)
    final_coverage: float = 0.0
    allocation_rounds: int = 0
    outcomes: dict = field(default_factory=lambda: {o.value: 0 for o in Outcome})
    finalized_capacity_violations: int = 0
    relaxed_tasks: int = 0
    messages: dict = field(default_factory=dict)
    solver_wall_time: float = 0.0
    units_completed: int = 0
    units_invalid: int = 0
    units_pending: int = 0
    invalid_matches_oracle: bool | None = None
    diagnostics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- agents -----------------------------------------------------------------------------

@dataclass
class AgentRuntime:
    state: AgentState
    vmap: VoxelMap
    graph: ConnectivityGraph | None
    ledger: TaskLedger
    node: DispatchNode | None
    follower: PathFollower = field(default_factory=PathFollower)
    dirty: set = field(default_factory=set)
    ledger_dirty: bool = True
    ledger_tick: int = -10**9
    last_voxel: tuple | None = None
    plan_version: object = None
    last_plan: int = -10**9
    target: int | None = None
    visited: set = field(default_factory=set)

    @property
    def id(self) -> int:
        return self.state.id


def _simplify(points: list) -> list:
    """Drop interior points where the direction does not change."""
    if len(points) <= 2:
        return list(points)
    out = [points[0]]
    for i in range(1, len(points) - 1):
        a = points[i] - out[-1]
        b = points[i + 1] - points[i]
        if np.linalg.norm(np.cross(a, b)) > 1e-9 or float(a @ b) < 0:
            out.append(points[i])
    out.append(points[-1])
    return out


def greedy_baseline_step(agent: AgentState, vmap: VoxelMap, sensor_range: float = 10.0,
                         exclude=frozenset()):
    """Nearest frontier cluster by voxel traversal cost (UNKNOWN traversable).

    Returns ``(cluster, viewpoint, cost)`` or None when no cluster has a
    viewpoint reachable through known free space.
    """
    clusters = cluster_frontiers(vmap)
    if not clusters:
        return None
    start = vmap.linear(vmap.index_of(agent.position))
    passable = lattice_distances(vmap.cells != OCCUPIED, [start], vmap.resolution)[0]
    free = lattice_distances(vmap.cells == FREE, [start], vmap.resolution)[0]

    def ok(p):
        lin = vmap.linear(vmap.index_of(p))
        return math.isfinite(free[lin]) and lin not in exclude

    best = None
    for i, cl in enumerate(clusters):
        vp = sample_viewpoints(cl, vmap, agent.position, sensor_range, admissible=ok)
        if vp is None:
            continue
        cost = float(passable[vmap.linear(vmap.index_of(vp.position))])
        key = (cost, i)
        if best is None or key < best[0]:
            best = (key, cl, vp)
    if best is None:
        return None
    return best[1], best[2], best[0][0]


class Simulation:
    def __init__(self, cfg: ScenarioConfig, world: VoxelMap | None = None, starts=None):
        self.cfg = cfg
        if world is None:
            world, default = build_world(cfg)
            starts = default if starts is None else starts
        self.world = world
        self.starts = [np.asarray(s, float) for s in starts]
        self.sensor = RaySensor(cfg.sensor.range, cfg.sensor.az_step, cfg.sensor.el_step)
        self.limits = cfg.limits()
        self.params = cfg.cost_params()
        self.trace = TraceLog()
        self.net = NetworkModel(cfg.network.drop, tuple(cfg.network.delay), cfg.network.dup,
                                cfg.network.reorder, cfg.seed, self._linked, self.trace)
        probe = VoxelMap.unknown_like(world)
        self.part = GridPartition.for_map(probe, cfg.grid_edge)
        self.reach = reachable_free(world, self.starts)
        self.reach_count = int(self.reach.sum())
        self.agents: list[AgentRuntime] = []
        for i, p in enumerate(self.starts):
            vm = VoxelMap.unknown_like(world)
            graph = None if cfg.mode == "no-graph" else ConnectivityGraph(self.part, vm.resolution, vm.origin.copy())
            node = None if cfg.mode == "greedy" else DispatchNode(i, self.net)
            ag = AgentRuntime(AgentState(i, p), vm, graph, TaskLedger(), node)
            ag.dirty = set(range(self.part.n_grids))
            if node is not None:
                node.state.stale = self._stale_check(ag)
            self.agents.append(ag)
        self.comp_of: dict = {}
        self.members_at_round: dict = {}
        self.last_finalized_tick: dict = {}
        self.round_results: dict = {}
        self.owned_status: dict = {}
        self.metrics = RunMetrics(mode=cfg.mode, seed=cfg.seed)
        self.rows: list = []
        self.tick = 0
        self.union = VoxelMap.unknown_like(world)
        self.trace.note(0, "CONFIG " + json.dumps(cfg.to_dict(), sort_keys=True))

    # -- plumbing --
    def _linked(self, sender: int, recipient: int, tick: int) -> bool:
        return self.comp_of.get(sender) == self.comp_of.get(recipient)

    def _stale_check(self, ag: AgentRuntime):
        def stale(record) -> bool:
            scope = record.scope_mask(ag.vmap, self.part)
            return not bool((ag.vmap.cells[scope] == UNKNOWN).any())
        return stale

    def _absorb(self, ag: AgentRuntime, delta) -> None:
        eff = apply_delta(ag.vmap, delta)
        if len(eff):
            update_frontiers(ag.vmap, eff)
            ag.dirty |= dirty_grids(self.part, eff.indices)
            ag.ledger_dirty = True

    def _refresh_graph(self, ag: AgentRuntime) -> None:
        if ag.graph is not None and ag.dirty:
            update_graph(ag.graph, ag.vmap, ag.dirty)
            ag.dirty = set()

    def _refresh_ledger(self, ag: AgentRuntime) -> None:
        if not ag.ledger_dirty:
            return
        if self.cfg.mode == "no-graph":
            derive_grid_units(ag.vmap, self.part, ag.ledger)
        else:
            self._refresh_graph(ag)
            derive_units(ag.graph, ag.ledger, ag.vmap)
            mark_invalid(ag.graph, ag.ledger, ag.vmap)
        ag.ledger_dirty = False
        ag.ledger_tick = self.tick

    # -- stages --
    def _sense_all(self) -> None:
        for ag in self.agents:
            v = ag.vmap.index_of(ag.state.position)
            if v == ag.last_voxel:
                continue
            ag.last_voxel = v
            self._absorb(ag, sense(self.world, ag.vmap, ag.state, self.sensor, self.tick))

    def _merge_components(self, comps) -> None:
        for comp in comps:
            if len(comp) < 2:
                continue
            merged = np.maximum.reduce([self.agents[a].vmap.cells for a in comp])
            for a in comp:
                ag = self.agents[a]
                idx = np.flatnonzero(ag.vmap.cells.reshape(-1) != merged.reshape(-1))
                if idx.size:
                    self._absorb(ag, MapDelta(idx, merged.reshape(-1)[idx], -1, self.tick))

    def _allocate(self, comps) -> None:
        for comp in comps:
            host = self.agents[comp[0]]
            node = host.node
            members = tuple(comp)
            open_round = node.round is not None and node.round.outcome is None
            if open_round:
                if tuple(sorted([host.id, *node.round.members])) != members:
                    node.abort(self.tick, Outcome.TIMED_OUT)
                    self._note_outcome(node)
                continue
            # the host must know which of its units are done before deciding
            if self.tick - host.ledger_tick >= LEDGER_PERIOD:
                self._refresh_ledger(host)
            last = self.last_finalized_tick.get(host.id, -10**9)
            fin, assignment = node.state.finalized_view()
            changed = self.members_at_round.get(host.id) != members
            done = fin.host == host.id and any(
                u in host.ledger.units and host.ledger.units[u].status != Status.PENDING
                for seq in assignment.values() for u in seq)
            if not (changed or done or self.tick - last >= self.cfg.realloc_period):
                continue
            self._refresh_ledger(host)
            pending = self._unclaimed(host, comp, host.ledger.pending())
            if not pending:
                self.members_at_round[host.id] = members
                self.last_finalized_tick[host.id] = self.tick
                continue
            ags = [self.agents[a].state for a in comp]
            t0 = time.perf_counter()
            problem = alloc.build_problem(ags, pending, host.vmap, host.graph, self.params)
            result = alloc.solve(problem, seed=self.cfg.seed * 100003 + self.tick,
                                 move_budget=SOLVER_MOVES, restarts=SOLVER_RESTARTS)
            self.metrics.solver_wall_time += time.perf_counter() - t0
            owner = {u: a for a, seq in result.sequences.items() for u in seq}
            records = []
            for u in pending:
                if u.id in owner:
                    rec = public_copy(u)
                    rec.owner = owner[u.id]
                    records.append(rec)
            v = node.start_round(comp, result.sequences, records, self.tick)
            result.version = (v.host, v.counter, v.tick)
            self.round_results[v] = result
            self.members_at_round[host.id] = members
            self.metrics.allocation_rounds += 1
            self.trace.note(self.tick, f"ALLOC host={host.id} v=({v.host},{v.counter},{v.tick}) "
                                       f"seqs={json.dumps({str(k): s for k, s in result.sequences.items()})}"
                                       f" relaxed={result.relaxed} unrouted={result.unrouted}")
            self._note_outcome(node)

    def _unclaimed(self, host: AgentRuntime, comp, pending: list) -> list:
        """Drop units that the host's last finalized assignment gave to agents outside ``comp``.

        Falls back to every pending unit when nothing else is left, so claims
        held by unreachable agents can never stall exploration.
        """
        st = host.node.state
        version, assignment = st.finalized_view()
        mask = np.zeros(host.vmap.dims, bool)
        for a, seq in assignment.items():
            if a in comp:
                continue
            for uid in seq:
                rec = st.records.get((version.host, uid))
                if rec is not None:
                    mask |= rec.scope_mask(host.vmap, self.part)
        if not mask.any():
            return pending
        flat = mask.reshape(-1)
        free = [u for u in pending if u.members is None or flat[u.members].mean() <= 0.5]
        return free or pending

    def _note_outcome(self, node: DispatchNode) -> None:
        seen = getattr(node, "_reported", 0)
        for v, out, tick in node.outcomes[seen:]:
            self.metrics.outcomes[out.value] += 1
            if out == Outcome.FINALIZED:
                self.last_finalized_tick[node.id] = tick
                res = self.round_results.get(v)
                if res is not None:
                    if not res.capacity_ok():
                        self.metrics.finalized_capacity_violations += 1
                    self.metrics.relaxed_tasks += len(res.relaxed)
            self.trace.note(tick, f"OUTCOME host={node.id} v=({v.host},{v.counter},{v.tick}) {out.value}")
        node._reported = len(node.outcomes)

    def _protocol(self) -> None:
        for msg in self.net.deliver(self.tick):
            node = self.agents[msg.recipient].node
            if node is not None:
                node.on_message(msg, self.tick)
        for ag in self.agents:
            if ag.node is not None:
                ag.node.on_tick(self.tick)
                if self.tick % BEACON_PERIOD == 0:
                    ag.node.beacon(self.tick)
                self._note_outcome(ag.node)

    # -- planning --
    def _free_tree(self, ag: AgentRuntime):
        start = ag.vmap.linear(ag.vmap.index_of(ag.state.position))
        dist, pred = lattice_distances(ag.vmap.cells == FREE, [start], ag.vmap.resolution,
                                       return_predecessors=True)
        return dist[0], pred[0]

    def _path_to(self, ag: AgentRuntime, pred, target_lin: int) -> list:
        lins = unwind(pred, target_lin)
        pts = [ag.vmap.centers(np.array([i]))[0] for i in lins]
        return _simplify(pts)[1:] if len(pts) > 1 else pts

    def _unit_routes(self, ag: AgentRuntime, units: list):
        """Waypoint callback for the global tour over this agent's map."""
        vm = ag.vmap
        pos = ag.state.position
        if ag.graph is not None and ag.graph.vertices:
            self._refresh_graph(ag)
            g = ag.graph
            keys, index, _ = g._index()
            src = [g.nearest_vertex(pos, FREE) if g.vertices_of_kind(FREE) else g.nearest_vertex(pos)]
            src += [g.nearest_vertex(u.anchor, UNKNOWN) if g.vertices_of_kind(UNKNOWN) else g.nearest_vertex(u.anchor)
                    for u in units]
            rows = [index[k] for k in src]
            dist, pred = dijkstra(g.sparse(), directed=False, indices=rows, return_predecessors=True)
            slot = {None: 0, **{u.id: i + 1 for i, u in enumerate(units)}}

            def route(a, b):
                i, j = slot[a], slot[b]
                if not math.isfinite(dist[i, rows[j]]):
                    return None
                path = unwind(pred[i], rows[j])
                return [g.vertices[keys[p]].anchor for p in path]
            return route
        passable = vm.cells != OCCUPIED
        lg = lattice_graph(passable, vm.resolution)
        pts = [pos] + [u.anchor for u in units]
        lins = [vm.linear(alloc._voxel_of(vm, p)) for p in pts]
        dist, pred = lattice_distances(passable, lins, vm.resolution, graph=lg, return_predecessors=True)
        slot = {None: 0, **{u.id: i + 1 for i, u in enumerate(units)}}

        def route(a, b):
            i, j = slot[a], slot[b]
            if not math.isfinite(dist[i, lins[j]]):
                return None
            return _simplify([vm.centers(np.array([p]))[0] for p in unwind(pred[i], lins[j])])
        return route

    def _plan(self, ag: AgentRuntime) -> None:
        ag.last_plan = self.tick
        ag.plan_version = ag.node.state.finalized if ag.node is not None else None
        vm = ag.vmap
        dist, pred = self._free_tree(ag)

        def reachable(p):
            lin = vm.linear(vm.index_of(p))
            return math.isfinite(dist[lin]) and lin not in ag.visited

        if self.cfg.mode == "greedy":
            pick = greedy_baseline_step(ag.state, vm, self.sensor.range_m, frozenset(ag.visited))
            if pick is None:
                self._go_idle(ag)
                return
            _, vp, _ = pick
            self._head_to(ag, pred, vp, None)
            return
        active = []
        for u in ag.node.state.own_units():
            fscope = frontier_scope(vm, u.scope_mask(vm, self.part))
            if fscope.any():
                active.append((u, fscope))
        if not active:
            self._go_idle(ag)
            return
        units = [u for u, _ in active]
        if len(units) > 1:
            speed = float(np.linalg.norm(ag.state.velocity))
            vel = ag.state.velocity * min(1.0, self.limits.v_max / speed) if speed > 0 else ag.state.velocity
            order, _ = plan_global_tour(ag.state.position, vel, {u.id: u.anchor for u in units},
                                        self._unit_routes(ag, units), self.limits)
            by_id = {u.id: (u, f) for u, f in active}
            active = [by_id[i] for i in order]
        for k, (u, fscope) in enumerate(active):
            vps = []
            for cl in cluster_frontiers(vm, fscope):
                vp = sample_viewpoints(cl, vm, ag.state.position, self.sensor.range_m, admissible=reachable)
                if vp is not None:
                    vps.append(vp)
            if not vps:
                continue  # deferred: nothing reachable sees this unit's frontier yet
            end = active[k + 1][0].anchor if k + 1 < len(active) else None

            def cost(a, b):
                if a is ag.state.position or np.array_equal(a, ag.state.position):
                    d = dist[vm.linear(vm.index_of(b))] if vm.contains_point(b) else math.inf
                    return d if math.isfinite(d) else 1e6
                return float(np.linalg.norm(a - b))
            tour = plan_local_tour(ag.state.position, vps, end, cost)
            self._head_to(ag, pred, tour[0], u.id)
            return
        self._go_idle(ag)

    def _head_to(self, ag: AgentRuntime, pred, vp, unit_id) -> None:
        vm = ag.vmap
        lin = vm.linear(vm.index_of(vp.position))
        ag.visited.add(lin)
        ag.follower.set(self._path_to(ag, pred, lin))
        ag.state.idle = False
        ag.target = unit_id
        v = ag.plan_version
        vtxt = f"({v.host},{v.counter},{v.tick})" if v is not None else "-"
        p = vp.position
        self.trace.note(self.tick, f"PLAN agent={ag.id} v={vtxt} unit={unit_id} "
                                   f"vp=({p[0]:.3f},{p[1]:.3f},{p[2]:.3f}) cover={vp.covered} "
                                   f"wps={len(ag.follower.waypoints)}")

    def _go_idle(self, ag: AgentRuntime) -> None:
        if not ag.state.idle:
            self.trace.note(self.tick, f"IDLE agent={ag.id}")
        ag.state.idle = True
        ag.target = None
        ag.follower.set([])

    def _plan_all(self) -> None:
        for ag in self.agents:
            version = ag.node.state.finalized if ag.node is not None else None
            if (ag.follower.done or version != ag.plan_version
                    or self.tick - ag.last_plan >= REPLAN_PERIOD):
                self._plan(ag)

    # -- motion --
    def _move_all(self) -> None:
        dt, vmax = self.cfg.dt, self.limits.v_max
        want = {}
        for ag in self.agents:
            if not ag.follower.done:
                want[ag.id] = ag.follower.peek(ag.state.position, vmax, dt)
        claimed: dict = {}
        for a in sorted(want, reverse=True):
            vox = self.world.index_of(want[a])
            if vox in claimed:
                continue  # lower id yields this tick
            claimed[vox] = a
        for ag in self.agents:
            if ag.id in want and claimed.get(self.world.index_of(want[ag.id])) == ag.id:
                ag.state.move_to(ag.follower.advance(ag.state.position, vmax, dt), dt)
            else:
                ag.state.hold()

    # -- loop --
    def _coverage(self) -> float:
        known = (self.union.cells == FREE) & self.reach
        return float(known.sum()) / self.reach_count if self.reach_count else 1.0

    def _record_row(self) -> None:
        row = [self.tick, f"{self.tick * self.cfg.dt:.3f}", f"{self.metrics.coverage[-1]:.6f}"]
        for ag in self.agents:
            p = ag.state.position
            row += [f"{p[0]:.6f}", f"{p[1]:.6f}", f"{p[2]:.6f}", f"{float(np.linalg.norm(ag.state.velocity)):.6f}"]
        self.rows.append(row)

    def step(self) -> bool:
        """Advance one tick; True once exploration is complete."""
        positions = {ag.id: ag.state.position for ag in self.agents}
        comps = components(positions, self.cfg.r_comm)
        self.comp_of = {a: i for i, c in enumerate(comps) for a in c}
        self._sense_all()
        self._merge_components(comps)
        self.union.cells = np.maximum.reduce([ag.vmap.cells for ag in self.agents])
        self.metrics.coverage.append(round(self._coverage(), 12))
        self._record_row()
        if not full_frontier_scan(self.union.cells).any():
            return True
        if self.cfg.mode != "greedy":
            self._protocol()
            self._allocate(comps)
        self._plan_all()
        self._move_all()
        return False

    def run(self) -> RunMetrics:
        done = False
        while self.tick < self.cfg.max_ticks:
            done = self.step()
            if done:
                break
            self.tick += 1
        m = self.metrics
        m.ticks = self.tick
        m.exploration_time = self.tick * self.cfg.dt
        m.status = "COMPLETE" if done else "INCOMPLETE"
        if not done:
            m.diagnostics.append(f"tick cap {self.cfg.max_ticks} reached; coverage {m.coverage[-1]:.4f}")
        m.path_lengths = {str(ag.id): float(sum(np.linalg.norm(np.diff(np.array(ag.state.path_log), axis=0), axis=1)))
                          for ag in self.agents}
        m.total_path_length = float(sum(m.path_lengths.values()))
        m.mean_velocity = (m.total_path_length / (len(self.agents) * m.exploration_time)
                           if m.exploration_time > 0 else 0.0)
        m.final_coverage = m.coverage[-1]
        m.messages = dict(self.net.stats)
        self._final_units()
        self.trace.note(self.tick, f"END {m.status} ticks={m.ticks}")
        return m

    def _final_units(self) -> None:
        """Unit status over the merged map, checked against a flood-fill oracle."""
        if self.cfg.mode == "no-graph":
            return
        from .graph import build_graph
        vm = VoxelMap.unknown_like(self.world)
        vm.cells = self.union.cells.copy()
        vm.frontier_flags = full_frontier_scan(vm.cells)
        g = build_graph(vm, self.cfg.grid_edge)
        led = TaskLedger()
        derive_units(g, led, vm)
        bad = mark_invalid(g, led, vm)
        self.final_graph = g
        self.metrics.units_invalid = len(bad)
        self.metrics.units_completed = len(led.by_status(Status.COMPLETED))
        self.metrics.units_pending = len(led.by_status(Status.PENDING))
        # oracle: unknown voxels reachable from FREE through non-OCCUPIED voxels
        labels, _ = ndimage.label(vm.cells != OCCUPIED)
        free_labels = np.unique(labels[vm.cells == FREE])
        reach = np.isin(labels, free_labels) & (vm.cells == UNKNOWN)
        invalid_vox = np.zeros(vm.size, bool)
        for uid in bad:
            invalid_vox[led.units[uid].members] = True
        unknown = (vm.cells == UNKNOWN).reshape(-1)
        self.metrics.invalid_matches_oracle = bool(
            np.array_equal(invalid_vox, unknown & ~reach.reshape(-1)))

    # -- outputs --
    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["tick", "time", "coverage"]
        for ag in self.agents:
            head += [f"a{ag.id}_x", f"a{ag.id}_y", f"a{ag.id}_z", f"a{ag.id}_speed"]
        w.writerow(head)
        w.writerows(self.rows)
        return buf.getvalue()

    def write_outputs(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv())
        (out / "summary.json").write_text(json.dumps(self.metrics.to_dict(), indent=1, sort_keys=True))
        self.trace.write(out / "trace.bin")
        for ag in self.agents:
            if ag.graph is not None:
                self._refresh_graph(ag)
                (out / f"graph_agent{ag.id}.txt").write_text(dump_graph(ag.graph))
        if getattr(self, "final_graph", None) is not None:
            (out / "graph_final.txt").write_text(dump_graph(self.final_graph))
        return out


def run(cfg: ScenarioConfig, out_dir=None) -> RunMetrics:
    sim = Simulation(cfg)
    metrics = sim.run()
    if out_dir is not None:
        sim.write_outputs(out_dir)
    return metrics


# -- ablation ------------------------------------------------------------------------

def summarize(values) -> tuple[float, float]:
    a = np.asarray(values, float)
    if a.size == 0:
        return math.nan, math.nan
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def ablate(configs: list, seeds: list) -> list[dict]:
    """Run every config for every seed; one row per config with mean and std."""
    rows = []
    for cfg in configs:
        runs = [run(cfg.replace(seed=s)) for s in seeds]
        t_mean, t_std = summarize([m.exploration_time for m in runs])
        p_mean, p_std = summarize([m.total_path_length for m in runs])
        v_mean, _ = summarize([m.mean_velocity for m in runs])
        r_comm = "inf" if math.isinf(cfg.r_comm) else cfg.r_comm
        rows.append({"mode": cfg.mode, "r_comm": r_comm, "runs": len(runs),
                     "time_mean": t_mean, "time_std": t_std, "path_mean": p_mean, "path_std": p_std,
                     "velocity_mean": v_mean,
                     "incomplete": [s for s, m in zip(seeds, runs) if m.status != "COMPLETE"],
                     "per_seed": [{"seed": s, "time": m.exploration_time, "path": m.total_path_length,
                                   "status": m.status} for s, m in zip(seeds, runs)]})
    return rows


def format_table(rows: list) -> str:
    lines = [f"{'mode':<9} {'r_comm':>6} {'time (s)':>16} {'path (m)':>18} {'vel (m/s)':>9}  flags"]
    for r in rows:
        flag = f"INCOMPLETE seeds {r['incomplete']}" if r["incomplete"] else ""
        lines.append(f"{r['mode']:<9} {str(r['r_comm']):>6} {r['time_mean']:>8.1f} ± {r['time_std']:<5.1f} "
                     f"{r['path_mean']:>9.1f} ± {r['path_std']:<6.1f} {r['velocity_mean']:>9.2f}  {flag}")
    return "\n".join(lines)
