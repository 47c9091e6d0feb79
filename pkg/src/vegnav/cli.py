"""Command-line entry point: ``vegnav <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error. ``VEGNAV_LOG`` selects
the log level (error, info or debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import adaptation, costmap, harness, sim_world
from .te_model import TEModel, predict_map
from .voxel_map import VoxelMap

log = logging.getLogger("vegnav")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _region(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad region {text!r}") from None
    if len(vals) != 4 or vals[0] >= vals[2] or vals[1] >= vals[3]:
        raise UsageError("region must be x0,y0,x1,y1 with x0<x1 and y0<y1")
    return tuple(vals)


def _seeds(text):
    try:
        seeds = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError("need at least one seed")
    return seeds


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: no such file") from None


def cmd_gen_world(a):
    cfg = sim_world.WorldConfig.from_json(_read_json(a.config)) if a.config else sim_world.WorldConfig()
    world = sim_world.generate_world(cfg, seed=a.seed)
    world.save(a.out)
    log.info("world: %d trunks, %d vegetation clusters", len(world.trunks), len(world.veg))


def cmd_gen_script(a):
    world = sim_world.World.load(a.world)
    script = sim_world.plan_script(world, seed=a.seed, duration=a.duration, exclude=a.exclude)
    script.save(a.out)


def cmd_episode(a):
    world = sim_world.World.load(a.world)
    script = sim_world.OperatorScript.load(a.script)
    ep = sim_world.run_episode(world, script, seed=a.seed)
    ep.write(a.out)
    log.info("episode: %.1f s, %d scans, %d events", ep.duration, len(ep.scans), len(ep.events))


def _load_base(path, strategy):
    if strategy.use_base_model and not path:
        raise UsageError(f"strategy {strategy.name} needs --base-model")
    return TEModel.load(path) if path else None


def cmd_adapt(a):
    strategy = adaptation.Strategy.from_name(a.strategy)
    base = _load_base(a.base_model, strategy)
    ep = sim_world.EpisodeLog.read(a.episode)
    evaluator = None
    if a.eval_region:
        world = ep.world
        if world is None:
            raise ValueError("episode carries no world; cannot evaluate")
        region = a.eval_region
        test = sim_world.drive_map(world, region, seed=a.eval_seed).to_table()
        rows, labels = sim_world.evaluation_labels(world, test, region)
        evaluator = adaptation.Evaluator(test, rows, labels)
    cfg = adaptation.CycleConfig(delta_t=a.delta_t, n_adapt=a.epochs, base_model=base, seed=a.seed,
                                 max_train_voxels=a.max_train_voxels or None)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def publish(state, report):
        log.info("cycle %d t=%.0f nodes+%d samples=%d mcc=%s", report["cycle"], report["t_k"],
                 report["n_new_nodes"], report["n_samples"], report["mcc"])

    ad = adaptation.OnlineAdapter(strategy, cfg, evaluator, on_cycle=publish)
    reports = ad.run(ep)
    model = ad.model
    model.meta.update({"strategy": strategy.name, "cycles": len(reports)})
    model.save(out / "model.json")
    adaptation.write_reports(reports, out / "cycles.jsonl")
    if a.save_graph:
        ad.state.graph.save(out / "graph")


def cmd_eval(a):
    model = TEModel.load(a.model)
    world = sim_world.World.load(a.world)
    region = a.region
    if a.test_map:
        test = VoxelMap.load_jsonl(a.test_map).to_table()
    else:
        test = sim_world.drive_map(world, region, seed=a.seed).to_table()
    rows, labels = sim_world.evaluation_labels(world, test, region)
    res = adaptation.evaluate(model, test, rows, labels, a.threshold)
    print(json.dumps(res))


def cmd_costmap(a):
    model = TEModel.load(a.model)
    ep = sim_world.EpisodeLog.read(a.episode)
    vm = VoxelMap()
    for t, origin, block in ep.scans:
        if t > a.t + 1e-9:
            break
        vm.integrate_scan(origin, block, t)
    poses = ep.poses[ep.poses[:, 0] <= a.t + 1e-9]
    if len(vm) == 0 or len(poses) == 0:
        raise ValueError(f"no map data up to t={a.t}")
    te = predict_map(model, vm.to_table(), a.region)
    cm = costmap.generate_costmap(te, costmap.nearest_pose_reference(poses))
    cm.write(a.out)
    log.info("costmap %dx%d, %d fatal cells", *cm.cost.shape, int(cm.fatal.sum()))


def cmd_train_base(a):
    model, losses = harness.train_base_model(world_seed=a.world_seed, seed=a.seed,
                                             duration=a.duration, epochs=a.epochs)
    model.save(a.out)
    log.info("base model: final loss %.4g", losses[-1] if losses else float("nan"))


def cmd_harness(a):
    world = sim_world.World.load(a.world)
    script = sim_world.OperatorScript.load(a.script)
    names = [s.strip() for s in a.strategies.split(",")]
    strategies = [adaptation.Strategy.from_name(n) for n in names]
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = None
    if any(s.use_base_model for s in strategies):
        if a.base_model:
            base = TEModel.load(a.base_model)
        else:
            base, _ = harness.train_base_model(world_seed=world.seed + 1000)
            base.save(out / "base_model.json")
    region = a.region or harness.quadrant(world)
    res = harness.strategy_harness(
        world, script, strategies, a.seeds, region, base_model=base,
        delta_t=a.delta_t, n_adapt=a.epochs,
        progress=lambda n, s, r: log.info("%s seed %d cycle %d mcc %.3f", n, s, r["cycle"], r["mcc"]),
    )
    res.write(out)
    print(json.dumps({n: {"final_mean": float(np.mean(res.final(n))),
                          "final_std": float(np.std(res.final(n)))} for n in res.strategies}))


def build_parser():
    p = _Parser(prog="vegnav", description="Online traversability learning from robot experience")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-world", help="generate a synthetic forest world")
    s.add_argument("--config", help="world config JSON (defaults if omitted)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_world)

    s = sub.add_parser("gen-script", help="plan an exploration script with deliberate collisions")
    s.add_argument("--world", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=480.0)
    s.add_argument("--exclude", type=_region, help="x0,y0,x1,y1 region to keep out of")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_script)

    s = sub.add_parser("episode", help="simulate an episode log")
    s.add_argument("--world", required=True)
    s.add_argument("--script", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_episode)

    s = sub.add_parser("adapt", help="replay an episode through online adaptation")
    s.add_argument("--episode", required=True)
    s.add_argument("--strategy", required=True, choices=adaptation.STRATEGIES)
    s.add_argument("--base-model")
    s.add_argument("--delta-t", type=float, default=40.0)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-train-voxels", type=int, default=12000, help="0 disables the cap")
    s.add_argument("--eval-region", type=_region,
                   help="x0,y0,x1,y1 scored each cycle against the episode's world")
    s.add_argument("--eval-seed", type=int, default=99)
    s.add_argument("--save-graph", action="store_true")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="score a model against ground truth")
    s.add_argument("--model", required=True)
    s.add_argument("--world", required=True)
    s.add_argument("--region", type=_region, required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--test-map", help="voxel map JSONL (default: drive the region)")
    s.add_argument("--seed", type=int, default=99)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("costmap", help="2D costmap from a model and an episode prefix")
    s.add_argument("--model", required=True)
    s.add_argument("--episode", required=True)
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--region", type=_region, help="x0,y0,x1,y1 to restrict the map")
    s.set_defaults(func=cmd_costmap)

    s = sub.add_parser("train-base", help="train an offline base model in another world")
    s.add_argument("--out", required=True)
    s.add_argument("--world-seed", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=480.0)
    s.add_argument("--epochs", type=int, default=150)
    s.set_defaults(func=cmd_train_base)

    s = sub.add_parser("harness", help="compare adaptation strategies over seeds")
    s.add_argument("--world", required=True)
    s.add_argument("--script", required=True)
    s.add_argument("--seeds", type=_seeds, required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--strategies", default=",".join(adaptation.STRATEGIES))
    s.add_argument("--base-model")
    s.add_argument("--region", type=_region, help="test region (default: far quadrant)")
    s.add_argument("--delta-t", type=float, default=40.0)
    s.add_argument("--epochs", type=int, default=40)
    s.set_defaults(func=cmd_harness)
    return p


def _setup_logging():
    level = os.environ.get("VEGNAV_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError("VEGNAV_LOG must be error, info or debug")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
