import json
from pathlib import Path

import numpy as np
import pytest

from cexplore.cli import main
from cexplore.dispatch import read_trace
from cexplore.planner import cluster_frontiers, sample_viewpoints
from cexplore.sim import ConfigError, ScenarioConfig, Simulation, ablate, format_table, greedy_baseline_step
from cexplore.voxels import FREE, OCCUPIED, UNKNOWN, AgentState, VoxelMap, full_frontier_scan
from oracles import lattice_dijkstra

SCEN = Path(__file__).resolve().parents[1] / "scenarios"


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"agentz": 3})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"network": {"loss": 0.1}})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"mode": "fastest"})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"r_comm": -1})


def test_config_round_trip_with_infinite_range():
    cfg = ScenarioConfig.from_dict({"r_comm": "inf", "network": {"drop": 0.1, "delay": [1, 3]}})
    assert cfg.r_comm == float("inf")
    again = ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_shipped_scenarios_load():
    for p in sorted(SCEN.glob("*.json")):
        if p.name in ("ablation.json", "comm-sweep.json"):
            continue
        ScenarioConfig.load(p)


def room(dims, fill=FREE):
    return VoxelMap((0, 0, 0), 1.0, dims, np.full(dims, fill, np.int8))


def test_free_room_terminates_after_first_sense():
    world = room((6, 6, 3))
    cfg = ScenarioConfig.from_dict({"agents": 1, "size_m": [6, 6, 3]})
    m = Simulation(cfg, world, [(2.5, 2.5, 1.5)]).run()
    assert m.status == "COMPLETE" and m.ticks <= 1 and m.total_path_length == 0.0
    assert m.final_coverage == 1.0


def test_tick_cap_reports_incomplete():
    cfg = ScenarioConfig.load(SCEN / "open-plan.json").replace(max_ticks=5)
    m = Simulation(cfg).run()
    assert m.status == "INCOMPLETE" and m.ticks == 5 and m.diagnostics


@pytest.fixture(scope="module")
def two_room():
    cfg = ScenarioConfig.load(SCEN / "two-room.json")
    sim = Simulation(cfg)
    owner_ticks = {}
    done = False
    while not done and sim.tick < cfg.max_ticks:
        done = sim.step()
        if done:
            break
        for ag in sim.agents:
            units = {u.id: u for u in ag.node.state.own_units()}
            if ag.target in units:
                side = "left" if units[ag.target].anchor[0] < 13 else "right"
                owner_ticks.setdefault(side, {}).setdefault(ag.id, 0)
                owner_ticks[side][ag.id] += 1
        sim.tick += 1
    return sim, sim.run(), owner_ticks  # run() only finalizes the metrics of the finished state


def test_two_rooms_split_between_agents(two_room):
    sim, m, owner = two_room
    assert m.status == "COMPLETE" and m.final_coverage == 1.0
    lead = {side: max(c, key=c.get) for side, c in owner.items()}
    assert set(owner) == {"left", "right"} and lead["left"] != lead["right"]
    for side, c in owner.items():
        assert c[lead[side]] / sum(c.values()) > 0.5


def test_metrics_consistency(two_room):
    sim, m, _ = two_room
    logs = [np.array(ag.state.path_log) for ag in sim.agents]
    total = sum(np.linalg.norm(np.diff(lg, axis=0), axis=1).sum() for lg in logs)
    assert m.total_path_length == pytest.approx(total, abs=1e-6)
    assert m.mean_velocity == pytest.approx(total / (len(sim.agents) * m.exploration_time), abs=1e-6)
    assert all(b >= a for a, b in zip(m.coverage, m.coverage[1:]))
    assert m.finalized_capacity_violations == 0
    assert m.invalid_matches_oracle is True


def test_speed_limit_in_runs(two_room):
    sim, _, _ = two_room
    for ag in sim.agents:
        steps = np.linalg.norm(np.diff(np.array(ag.state.path_log), axis=0), axis=1)
        assert steps.max() <= sim.cfg.v_max * sim.cfg.dt + 1e-9


def corridor_with_two_pockets():
    cells = np.full((20, 7, 1), FREE, np.int8)
    cells[:, 0, 0] = OCCUPIED
    cells[:, 6, 0] = OCCUPIED
    cells[4, 4:6, 0] = UNKNOWN
    cells[15, 4:6, 0] = UNKNOWN
    return VoxelMap((0, 0, 0), 1.0, cells.shape, cells)


def test_greedy_picks_nearest_cluster():
    vm = corridor_with_two_pockets()
    agent = AgentState(0, (1.5, 3.5, 0.5))
    cl, vp, cost = greedy_baseline_step(agent, vm)
    assert cl.centroid[0] < 10
    # exhaustive: every cluster's best viewpoint, priced by lattice Dijkstra
    dist = lattice_dijkstra(vm.cells != OCCUPIED, vm.index_of(agent.position))
    costs = []
    for c in cluster_frontiers(vm):
        v = sample_viewpoints(c, vm, agent.position)
        costs.append(dist[vm.index_of(v.position)])
    assert cost == pytest.approx(min(costs), abs=1e-9)
    assert greedy_baseline_step(AgentState(0, (18.5, 3.5, 0.5)), vm)[0].centroid[0] > 10


def test_greedy_single_cluster_and_none():
    vm = corridor_with_two_pockets()
    vm.cells[15, 4:6, 0] = FREE
    vm.frontier_flags = full_frontier_scan(vm.cells)
    cl, _, _ = greedy_baseline_step(AgentState(0, (18.5, 3.5, 0.5)), vm)
    assert cl.centroid[0] < 10
    assert greedy_baseline_step(AgentState(0, (1.5, 1.5, 0.5)), room((4, 4, 1))) is None


def small_cfg(**kw):
    base = json.loads((SCEN / "two-room.json").read_text())
    base["map"]["file"] = str(SCEN / "two-room.grid")
    base.update(kw)
    return base


def test_runs_are_deterministic(tmp_path):
    cfg = ScenarioConfig.from_dict(small_cfg(network={"drop": 0.2, "dup": 0.1, "reorder": True,
                                                      "delay": [1, 3]}, seed=3))
    a, b = Simulation(cfg), Simulation(cfg)
    a.run(), b.run()
    assert a.metrics_csv() == b.metrics_csv()
    assert a.trace.getvalue() == b.trace.getvalue()


def test_modes_differ_only_in_mode_field():
    cfgs = [ScenarioConfig.from_dict(small_cfg(mode=m)) for m in ("full", "no-con", "no-graph")]
    notes = []
    for cfg in cfgs:
        sim = Simulation(cfg)
        (_, _, text), *_ = list(read_trace(sim.trace.getvalue()))
        notes.append(json.loads(text.split(" ", 1)[1]))
    for other in notes[1:]:
        diff = {k for k in notes[0] if notes[0][k] != other[k]}
        assert diff == {"mode"}
    p_full, p_nocon = cfgs[0].cost_params(), cfgs[1].cost_params()
    assert p_full.penalty and not p_nocon.penalty and p_full.use_graph == p_nocon.use_graph
    assert not cfgs[2].cost_params().use_graph


def test_ablate_single_config_single_seed():
    cfg = ScenarioConfig.from_dict(small_cfg())
    rows = ablate([cfg], [0])
    assert len(rows) == 1 and rows[0]["runs"] == 1 and rows[0]["time_std"] == 0.0
    assert rows[0]["incomplete"] == []
    assert "full" in format_table(rows)


def test_cli_run_replay_and_solve(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--scenario", str(SCEN / "two-room.json"), "--seed", "1", "--out", str(out)]) == 0
    for name in ("metrics.csv", "summary.json", "trace.bin", "graph_agent0.txt", "graph_final.txt"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "COMPLETE"
    capsys.readouterr()
    assert main(["replay", str(out / "trace.bin")]) == 0
    text = capsys.readouterr().out
    assert "PROPOSAL" in text and "CONFIG" in text

    from cexplore.allocation import write_instance
    from instances import random_problem
    write_instance(random_problem(np.random.default_rng(0), 2, 4), tmp_path / "inst.json", seed=2)
    assert main(["solve-instance", str(tmp_path / "inst.json")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert sorted(u for s in result["sequences"].values() for u in s) == [100, 101, 102, 103]


def test_cli_ablate_and_errors(tmp_path, capsys):
    matrix = tmp_path / "m.json"
    matrix.write_text(json.dumps({"base": small_cfg(), "modes": ["full", "greedy"], "seeds": [0]}))
    assert main(["ablate", "--matrix", str(matrix), "--out", str(tmp_path / "abl")]) == 0
    rows = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    assert [r["mode"] for r in rows] == ["full", "greedy"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"agents": 2, "speed": 3}))
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "x")]) == 2
    matrix.write_text(json.dumps({"base": {}, "colour": 1}))
    assert main(["ablate", "--matrix", str(matrix), "--out", str(tmp_path / "y")]) == 2
