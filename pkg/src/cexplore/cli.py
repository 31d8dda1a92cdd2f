"""Command-line entry point: run, ablate, solve-instance, replay."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import allocation as alloc
from .dispatch import Event, ProtocolError, describe, read_trace
from .sim import MODES, ConfigError, ScenarioConfig, Simulation, ablate, format_table


def _run(args) -> int:
    cfg = ScenarioConfig.load(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = args.mode
    cfg = cfg.replace(**changes)
    sim = Simulation(cfg)
    m = sim.run()
    out = sim.write_outputs(args.out)
    print(f"{m.status} mode={m.mode} seed={m.seed} time={m.exploration_time:.1f}s "
          f"path={m.total_path_length:.1f}m coverage={m.final_coverage:.4f} -> {out}")
    return 0 if m.status == "COMPLETE" else 3


MATRIX_KEYS = {"scenario", "base", "modes", "r_comm", "seeds"}


def load_matrix(path) -> tuple[list, list]:
    """Matrix file: a base scenario (inline or by path) crossed with modes and r_comm values."""
    path = Path(path)
    d = json.loads(path.read_text())
    bad = set(d) - MATRIX_KEYS
    if bad:
        raise ConfigError(f"unknown matrix key(s): {sorted(bad)}")
    if "scenario" in d:
        base = ScenarioConfig.load(path.parent / d["scenario"])
        if "base" in d:
            raise ConfigError("give either scenario or base, not both")
    else:
        base = ScenarioConfig.from_dict(d.get("base", {}))
    modes = d.get("modes", [base.mode])
    radii = [math.inf if r in (None, "inf") else float(r) for r in d.get("r_comm", [base.r_comm])]
    seeds = d.get("seeds", 10)
    seeds = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    configs = [base.replace(mode=m, r_comm=r) for r in radii for m in modes]
    for c in configs:
        c.__post_init__()
    return configs, seeds


def _ablate(args) -> int:
    configs, seeds = load_matrix(args.matrix)
    rows = ablate(configs, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(rows)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0 if not any(r["incomplete"] for r in rows) else 3


def _solve_instance(args) -> int:
    problem, seed = alloc.read_instance(args.file)
    result = alloc.solve(problem, seed=seed if args.seed is None else args.seed)
    print(json.dumps(result.to_dict(), indent=1))
    return 0


def _replay(args) -> int:
    data = Path(args.trace).read_bytes()
    for event, tick, body in read_trace(data):
        text = body if event == Event.NOTE else describe(body)
        print(f"{tick:>6} {event.name:<12} {text}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cexplore", description="Multi-agent voxel exploration simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver and protocol warnings")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_run)

    a = sub.add_parser("ablate", help="run a mode / r_comm matrix over seeds")
    a.add_argument("--matrix", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=_ablate)

    s = sub.add_parser("solve-instance", help="solve a stored allocation instance")
    s.add_argument("file")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=_solve_instance)

    t = sub.add_parser("replay", help="print a binary message trace")
    t.add_argument("trace")
    t.set_defaults(fn=_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ProtocolError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
