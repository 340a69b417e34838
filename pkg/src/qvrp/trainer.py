"""REINFORCE with a lagged greedy baseline agent."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import stats

from .env import Instance
from .instances import InstanceSpec, sample_instance
from .policy import AttentionPolicy, RolloutResult, rollout

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "mean_cost", "mean_coverage", "mean_time_s", "baseline_updated")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    num_epochs: int = 100
    batch_size: int = 64
    batches_per_epoch: int = 1
    learning_rate: float = 1e-4
    significance: float = 0.05
    instances: InstanceSpec = field(default_factory=InstanceSpec)
    eval_size: int = 128
    seed: int = 0
    cost_scale_s: float = 3600.0
    unmet_penalty: float = 0.0
    max_grad_norm: float = 1.0
    literal_prob_sum: bool = False
    checkpoint_every: int = 0
    clip: float | None = None  # None: 95th percentile of the training demand magnitudes

    def __post_init__(self):
        if isinstance(self.instances, dict):
            self.instances = InstanceSpec(**self.instances)
        for name in ("num_epochs", "batch_size", "batches_per_epoch", "eval_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.significance < 1.0:
            raise ValueError("significance must lie in (0, 1)")



@dataclass
class EpochMetrics:
    epoch: int
    mean_cost: float
    mean_coverage: float
    mean_time_s: float
    baseline_updated: bool
    eval_cost: float = float("nan")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}


@dataclass
class BaselineAgent:
    policy: AttentionPolicy
    history: list[float] = field(default_factory=list)

    def replace(self, live: AttentionPolicy) -> None:
        self.policy = copy.deepcopy(live)
        self.policy.eval()


def route_costs(result: RolloutResult, cost_scale: float) -> np.ndarray:
    return -result.rewards / cost_scale


def greedy_costs(policy: AttentionPolicy, instances: Sequence[Instance], cost_scale: float = 1.0,
                 unmet_penalty: float = 0.0) -> np.ndarray:
    was = policy.training
    policy.eval()
    with torch.no_grad():
        res = rollout(policy, instances, "greedy", unmet_penalty=unmet_penalty)
    policy.train(was)
    return route_costs(res, cost_scale)


def paired_test(live: np.ndarray, base: np.ndarray, significance: float) -> bool:
    """One-sided paired t-test: is the live mean cost lower than the baseline's?"""
    diff = np.asarray(live) - np.asarray(base)
    if diff.size < 2 or np.all(diff == diff[0]) or diff.mean() >= 0:
        return False
    res = stats.ttest_rel(live, base, alternative="less")
    return bool(np.isfinite(res.pvalue) and res.pvalue < significance)


def baseline_test(live: AttentionPolicy, baseline: AttentionPolicy, eval_set: Sequence[Instance],
                  significance: float = 0.05, cost_scale: float = 1.0) -> bool:
    if not eval_set:
        raise ValueError("empty evaluation set")
    return paired_test(greedy_costs(live, eval_set, cost_scale), greedy_costs(baseline, eval_set, cost_scale),
                       significance)


def make_optimizer(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def descent(optimizer: torch.optim.Optimizer, loss: torch.Tensor | None = None, max_grad_norm: float = 0.0) -> None:
    """One Adam step on the gradients accumulated (or on ``loss`` if given)."""
    params = [p for g in optimizer.param_groups for p in g["params"]]
    if loss is not None:
        optimizer.zero_grad()
        loss.backward()
    if max_grad_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, max_grad_norm)
    optimizer.step()


def policy_gradient_loss(live: RolloutResult, live_cost: np.ndarray, base_cost: np.ndarray,
                         literal_prob_sum: bool = False) -> torch.Tensor:
    """Surrogate whose gradient is batch_mean((L - L_BL) * grad log pi(route)).

    ``literal_prob_sum`` swaps the sum of log step probabilities for the log
    of the summed step probabilities.
    """
    adv = torch.as_tensor(live_cost - base_cost, dtype=live.log_prob.dtype)
    if literal_prob_sum:
        score = torch.log(torch.clamp_min(live.prob_sum, 1e-300))
    else:
        score = live.log_prob
    return (adv * score).mean()


@dataclass
class TrainResult:
    policy: AttentionPolicy
    baseline: BaselineAgent
    metrics: list[EpochMetrics]
    eval_set: list[Instance]
    clip: float = float("nan")


def demand_clip(volumes: Sequence[float], q: float = 95.0) -> float:
    if len(volumes) == 0:
        return float("nan")
    return float(np.percentile(np.asarray(volumes, dtype=float), q))


def train(
    config: TrainConfig,
    policy: AttentionPolicy,
    on_epoch: Callable[[EpochMetrics, AttentionPolicy], None] | None = None,
    sampler: Callable[[np.random.Generator], Instance] | None = None,
) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    sampler = sampler or (lambda r: sample_instance(config.instances, r))
    eval_set = [sampler(rng) for _ in range(config.eval_size)]
    baseline = BaselineAgent(policy)
    baseline.replace(policy)
    opt = make_optimizer(policy.parameters(), config.learning_rate)
    metrics = []
    volumes: list[float] = []
    for epoch in range(1, config.num_epochs + 1):
        policy.train()
        costs, covs, times = [], [], []
        for _ in range(config.batches_per_epoch):
            batch = [sampler(rng) for _ in range(config.batch_size)]
            for inst in batch:
                volumes.extend(inst.cyclic.values())
                volumes.extend(inst.direct.values())
            live = rollout(policy, batch, "sample", gen, unmet_penalty=config.unmet_penalty)
            with torch.no_grad():
                base = rollout(baseline.policy, batch, "greedy", unmet_penalty=config.unmet_penalty)
            lc = route_costs(live, config.cost_scale_s)
            bc = route_costs(base, config.cost_scale_s)
            loss = policy_gradient_loss(live, lc, bc, config.literal_prob_sum)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: live cost {lc.mean()}, baseline {bc.mean()}"
                )
            # batches with no decision step (every row ends at once) carry no gradient
            if loss.requires_grad:
                descent(opt, loss, config.max_grad_norm)
            costs.append(lc.mean())
            covs.append(live.coverage.mean())
            times.append(live.makespan.mean())
        live_eval = greedy_costs(policy, eval_set, config.cost_scale_s, config.unmet_penalty)
        base_eval = greedy_costs(baseline.policy, eval_set, config.cost_scale_s, config.unmet_penalty)
        updated = paired_test(live_eval, base_eval, config.significance)
        log.debug("eval live %.4f baseline %.4f", live_eval.mean(), base_eval.mean())
        if updated:
            baseline.replace(policy)
            baseline.history.append(float(live_eval.mean()))
        m = EpochMetrics(epoch, float(np.mean(costs)), float(np.mean(covs)), float(np.mean(times)), updated,
                         float(live_eval.mean()))
        log.info("epoch %d cost %.4f coverage %.3f eval %.4f baseline_updated=%s", epoch, m.mean_cost,
                 m.mean_coverage, m.eval_cost, updated)
        metrics.append(m)
        if on_epoch is not None:
            on_epoch(m, policy)
    clip = config.clip if config.clip is not None else demand_clip(volumes)
    return TrainResult(policy, baseline, metrics, eval_set, clip)


def write_metrics(metrics: Sequence[EpochMetrics], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for m in metrics:
            w.writerow(m.row())
