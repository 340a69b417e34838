"""Desk-scale training run (4 nodes, 1 truck, rank-2 direct demand) scored
against brute-force optimal routes on held-out instances."""
import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import torch

from qvrp.config import TRAIN_PRESETS
from qvrp.env import act, feasibility_mask, reset
from qvrp.instances import InstanceSpec, sample_instance
from qvrp.policy import AttentionPolicy, PolicyConfig
from qvrp.trainer import TrainConfig, greedy_costs, train, write_metrics


def optimal_cost(instance) -> float:
    best = np.inf

    def dfs(state, spent):
        nonlocal best
        if spent >= best:
            return
        m = state.active_truck()
        if m is None:
            best = spent
            return
        for a in np.nonzero(feasibility_mask(state, m))[0]:
            nxt, dt = act(state, m, int(a))
            dfs(nxt, spent + dt)

    dfs(reset(instance), 0.0)
    return float(best)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--held-out", type=int, default=50)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    torch.set_num_threads(1)
    preset = TRAIN_PRESETS["desk"]
    spec = InstanceSpec(**preset["train"]["instances"])
    overrides = dict(instances=spec, seed=args.seed)
    if args.epochs:
        overrides["num_epochs"] = args.epochs
    cfg = TrainConfig(**{**preset["train"], **overrides})
    torch.manual_seed(0)
    policy = AttentionPolicy(PolicyConfig(**preset["model"]))
    rng = np.random.default_rng(2024)
    held = [sample_instance(spec, rng) for _ in range(args.held_out)]
    optimum = np.array([optimal_cost(i) for i in held])
    before = greedy_costs(policy, held)

    def report(m, _):
        if m.epoch % 10 == 0:
            print(f"epoch {m.epoch:4d} train cost {m.mean_cost:.4f} eval {m.eval_cost:.4f}", file=sys.stderr)

    res = train(cfg, policy, report)
    after = greedy_costs(res.policy, held)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(res.metrics, out / "metrics.csv")
    with (out / "held_out.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "optimal_s", "greedy_before_s", "greedy_after_s"])
        for i, row in enumerate(zip(optimum, before, after)):
            w.writerow([i, *(f"{v:.3f}" for v in row)])
    print(f"optimal {optimum.mean():.1f} s; greedy before {before.mean():.1f} s, after {after.mean():.1f} s "
          f"(ratio {after.mean() / optimum.mean():.4f})")


if __name__ == "__main__":
    main()
