"""Command-line entry point: ``qvrp {train,solve,benchmark-qonn,gen-instance}``.

Exit codes: 0 success, 2 configuration error, 3 incompatible artifact,
4 runtime abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError
from .env import Instance
from .orchestrator import (StagnationError, execution_loop, generate_synthetic_instance, groups_from_instance,
                           groups_from_json, groups_to_json, simulate_full_scale)
from .policy import AttentionPolicy
from .qsampler import NoiseModel, benchmark_qonn
from .trainer import TrainingDivergedError, train, write_metrics

log = logging.getLogger("qvrp")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_RUNTIME = 0, 2, 3, 4


class ArtifactError(RuntimeError):
    pass


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _overrides(args, presets: dict | None) -> dict:
    doc: dict = {}
    if args.preset is not None:
        if not presets or args.preset not in presets:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(presets or [])}")
        doc = json.loads(json.dumps(presets[args.preset]))
    return doc


def cmd_train(args) -> int:
    run = cfgmod.load("train", args.config, _overrides(args, cfgmod.TRAIN_PRESETS))
    if args.seed is not None:
        run.seed = args.seed
        run.train.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfgmod.to_dict(run))
    torch.manual_seed(run.seed)
    policy = AttentionPolicy(run.model)
    spec = run.train.instances
    every = run.train.checkpoint_every

    def on_epoch(m, pol):
        if every and m.epoch % every == 0:
            save_checkpoint(out / f"checkpoint-epoch{m.epoch:04d}", pol, clip=run.train.clip or spec.max_volume,
                            n_nodes=spec.n_nodes, n_trucks=spec.n_trucks)

    result = train(run.train, policy, on_epoch)
    write_metrics(result.metrics, out / "metrics.csv")
    save_checkpoint(out / "checkpoint", result.policy, clip=result.clip, n_nodes=spec.n_nodes,
                    n_trucks=spec.n_trucks, extra=dict(train=cfgmod.to_dict(run.train)))
    last = result.metrics[-1]
    print(f"trained {len(result.metrics)} epochs: final cost {last.mean_cost:.4f} "
          f"coverage {last.mean_coverage:.3f}; outputs in {out}")
    return EXIT_OK


def _read_instance(path: str | None):
    if path is None:
        raise ConfigError("solve needs an instance file (--instance or 'instance' in the config)")
    try:
        doc = json.loads(Path(path).read_text())
        inst = Instance.from_dict(doc)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load instance {path}: {exc}") from exc
    groups = groups_from_json(doc["box_groups"]) if "box_groups" in doc else groups_from_instance(inst)
    return inst, groups


def cmd_solve(args) -> int:
    ckpt_path = args.checkpoint
    doc_ckpt = None
    if args.config is not None:
        try:
            doc_ckpt = json.loads(Path(args.config).read_text()).get("checkpoint")
        except (OSError, json.JSONDecodeError, AttributeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    ckpt_path = ckpt_path or doc_ckpt
    if ckpt_path is None:
        raise ConfigError("solve needs a checkpoint (--checkpoint or 'checkpoint' in the config)")
    agent, manifest = load_checkpoint(ckpt_path)
    trained = dict(n_prime=manifest["n_nodes"], trucks_per_team=manifest["n_trucks"], clip=manifest["clip"])
    run = cfgmod.load("solve", args.config, dict(search=trained))
    if args.seed is not None:
        run.seed = args.seed
    s = run.search
    if (s.n_prime, s.trucks_per_team) != (trained["n_prime"], trained["trucks_per_team"]):
        raise ArtifactError(f"checkpoint was trained with {trained['n_prime']} nodes and "
                            f"{trained['trucks_per_team']} trucks, config asks for {s.n_prime} and {s.trucks_per_team}")
    inst, groups = _read_instance(args.instance or run.instance)
    if inst.n < s.n_prime:
        raise ArtifactError(f"instance has {inst.n} nodes, fewer than the agent's subset size {s.n_prime}")
    result = execution_loop(inst, agent, s, seed=run.seed, groups=groups)
    report = simulate_full_scale(result.routes, groups, inst.time_matrix, float(inst.capacities[0]),
                                 shifts=run.shifts, names=inst.names, plans=result.plans)
    out = Path(args.out)
    report.write(out)
    _write_json(out / "iterations.json", [
        dict(nodes=it.nodes, routes=it.routes, fulfilled=it.fulfilled, remaining=it.remaining)
        for it in result.iterations])
    print(f"{len(result.iterations)} iterations, {result.trucks_used} trucks, "
          f"box-level fulfillment {report.fulfillment_fraction:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_benchmark_qonn(args) -> int:
    run = cfgmod.load("benchmark-qonn", args.config)
    if args.seed is not None:
        run.seed = args.seed
    report = benchmark_qonn(run.qubit_counts, run.trials, run.shots, NoiseModel(run.noise_p, run.noise_q), run.seed)
    report.write(args.out, "benchmark")
    sm = report.summary
    print(f"{sm['circuits']} circuits, {sm['measurements']} measurements; outputs in {args.out}")
    return EXIT_OK


def cmd_gen_instance(args) -> int:
    run = cfgmod.load("gen-instance", args.config, _overrides(args, cfgmod.GEN_PRESETS))
    if args.seed is not None:
        run.spec.seed = args.seed
    inst, groups = generate_synthetic_instance(run.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = inst.to_dict()
    doc["box_groups"] = groups_to_json(groups)
    _write_json(out / "instance.json", doc)
    print(f"{inst.n} nodes, {len(groups)} box groups, {sum(g.count for g in groups)} boxes -> {out / 'instance.json'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "solve": cmd_solve, "benchmark-qonn": cmd_benchmark_qonn,
            "gen-instance": cmd_gen_instance}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qvrp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the seed in the configuration")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="torch intra-op threads; 1 gives byte-identical reruns")
        p.add_argument("--preset", metavar="NAME")
        p.add_argument("--out", metavar="DIR", default=f"runs/{name}")
        if name == "solve":
            p.add_argument("--checkpoint", metavar="DIR")
            p.add_argument("--instance", metavar="PATH")
        if name in ("train", "gen-instance"):
            p.epilog = "presets: " + ", ".join(cfgmod.TRAIN_PRESETS if name == "train" else cfgmod.GEN_PRESETS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("QVRP_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(args.workers)
    if args.command in ("benchmark-qonn", "solve") and args.preset is not None:
        print(f"error: {args.command} has no presets", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, ArtifactError) as exc:
        print(f"incompatible artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (StagnationError, TrainingDivergedError, RuntimeError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
