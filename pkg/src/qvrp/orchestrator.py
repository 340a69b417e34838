"""Scaling a small trained agent to a full instance.

The execution loop repeatedly picks a node subset, solves the restricted and
clipped sub-problem with the agent, and commits the resulting demand changes.
The box-level simulator then replays the suggested routes with individually
tracked boxes and shift windows.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .env import CYCLIC, DIRECT, VOL_EPS, Instance
from .instances import AICHI_EIGHT, SHIFT_HORIZON_S, time_matrix_from_coords
from .policy import AttentionPolicy, rollout

log = logging.getLogger(__name__)

DAY_S = 86_400.0
DEFAULT_SHIFTS = ((0.0, 28_800.0), (57_600.0, 86_400.0))


class StagnationError(RuntimeError):
    pass


@dataclass
class SubsetSearchConfig:
    n_prime: int = 8
    trucks_per_team: int = 2
    k_node_draws: int = 4
    k_subset_attempts: int = 2
    k_execution_trials: int = 4
    clip: float | None = None  # None: no clipping
    max_iterations: int = 1000

    def __post_init__(self):
        for name in ("n_prime", "trucks_per_team", "k_node_draws", "k_subset_attempts",
                     "k_execution_trials", "max_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be positive")


@dataclass(frozen=True)
class BoxGroup:
    requirement: tuple[int, ...]
    count: int
    volume: float
    cyclic: bool = True

    def __post_init__(self):
        if self.count < 1 or self.volume <= 0:
            raise ValueError("a box group needs at least one box of positive volume")


@dataclass
class Demand:
    """Running off-board demand of the full instance (global node indices)."""

    cyclic: dict[tuple, float] = field(default_factory=dict)
    direct: dict[tuple, float] = field(default_factory=dict)

    @classmethod
    def of(cls, instance: Instance) -> "Demand":
        return cls(dict(instance.cyclic), dict(instance.direct))

    def total(self) -> float:
        return float(sum(self.cyclic.values()) + sum(self.direct.values()))

    def keys(self) -> list[tuple]:
        return sorted(set(self.cyclic) | set(self.direct))

    def items(self):
        for k, v in sorted(self.cyclic.items()):
            yield CYCLIC, k, v
        for k, v in sorted(self.direct.items()):
            yield DIRECT, k, v

    def add(self, kind: str, key: tuple, vol: float) -> None:
        d = self.cyclic if kind == CYCLIC else self.direct
        left = d.get(key, 0.0) + vol
        if left <= VOL_EPS:
            d.pop(key, None)
        else:
            d[key] = left


def draw_node_subset(demand_keys: Sequence[tuple], n_prime: int, n_nodes: int,
                     rng: np.random.Generator) -> list[int]:
    """Random node subset of size ``n_prime`` grown from demand tuples.

    Tuples are drawn uniformly without replacement and their nodes unioned in.
    A tuple that would push the set past ``n_prime`` is taken back out (nodes
    it shares with earlier tuples stay) and drawing continues. When tuples run
    out, random outside nodes pad the set. Nodes are returned in insertion
    order.
    """
    if n_prime > n_nodes:
        raise ValueError(f"subset size {n_prime} exceeds the {n_nodes} nodes")
    if not demand_keys:
        raise ValueError("no demand to draw from")
    pool = list(demand_keys)
    chosen: list[int] = []
    while pool and len(chosen) < n_prime:
        key = pool.pop(int(rng.integers(len(pool))))
        new = [i for i in dict.fromkeys(key) if i not in chosen]
        if len(chosen) + len(new) <= n_prime:
            chosen.extend(new)
    if len(chosen) < n_prime:
        rest = [i for i in range(n_nodes) if i not in chosen]
        chosen.extend(int(i) for i in rng.permutation(rest)[: n_prime - len(chosen)])
    return chosen


@dataclass
class SubProblem:
    nodes: list[int]
    instance: Instance
    clipped: list[tuple[str, tuple, float]]  # (kind, global key, clipped volume)


def restrict(full: Instance, demand: Demand, nodes: Sequence[int], clip: float | None, trucks: int) -> SubProblem:
    """Demand supported on ``nodes`` mapped to local indices and clipped."""
    local = {g: i for i, g in enumerate(nodes)}
    cyc, dr, clipped = {}, {}, []
    for kind, key, vol in demand.items():
        if all(i in local for i in key):
            c = vol if clip is None else min(vol, clip)
            (cyc if kind == CYCLIC else dr)[tuple(local[i] for i in key)] = c
            clipped.append((kind, key, c))
    idx = np.asarray(nodes)
    inst = Instance(
        coords=full.coords[idx],
        time_matrix=full.time_matrix[np.ix_(idx, idx)],
        capacities=[float(full.capacities[0])] * trucks,
        horizon=full.horizon,
        cyclic=cyc,
        direct=dr,
        homes=[0] * trucks,
        names=[full.names[g] for g in nodes] if full.names else None,
    )
    return SubProblem(list(nodes), inst, clipped)


def _sample_rollouts(agent: AttentionPolicy, inst: Instance, k: int, gen: torch.Generator):
    agent.eval()
    with torch.no_grad():
        return rollout(agent, [inst] * k, "sample", gen)


def fulfilled_volumes(result) -> np.ndarray:
    return np.array([s.fulfilled for s in result.states])


@dataclass
class SubsetChoice:
    nodes: list[int]
    mean_fulfilled: float
    candidates: list[tuple[list[int], list[float]]]


def select_best_subset(config: SubsetSearchConfig, full: Instance, demand: Demand, agent: AttentionPolicy,
                       rng: np.random.Generator, gen: torch.Generator) -> SubsetChoice:
    """Draw ``k_node_draws`` subsets, score each by the mean demand volume the
    agent fulfils over ``k_subset_attempts`` sampled rollouts, keep the best
    (first drawn on ties)."""
    keys = demand.keys()
    cands = []
    for _ in range(config.k_node_draws):
        nodes = draw_node_subset(keys, config.n_prime, full.n, rng)
        sub = restrict(full, demand, nodes, config.clip, config.trucks_per_team)
        res = _sample_rollouts(agent, sub.instance, config.k_subset_attempts, gen)
        cands.append((nodes, [float(v) for v in fulfilled_volumes(res)]))
    means = [float(np.mean(f)) for _, f in cands]
    best = int(np.argmax(means))
    return SubsetChoice(cands[best][0], means[best], cands)


def fallback_subset(full: Instance, demand: Demand, n_prime: int) -> list[int]:
    """Nodes of the largest remaining tuple plus nearest neighbours."""
    kind, key, _ = max(demand.items(), key=lambda it: (it[2], -len(it[1])))
    nodes = list(dict.fromkeys(key))[:n_prime]
    order = np.argsort(full.time_matrix[key[0]], kind="stable")
    for j in order:
        if len(nodes) >= n_prime:
            break
        if int(j) not in nodes:
            nodes.append(int(j))
    return nodes


@dataclass
class IterationRecord:
    nodes: list[int]
    routes: list[list[int]]  # global node indices per truck
    departures: list[list[float]]
    pickups: list[list[tuple[int, tuple, float]]]  # per truck (stop index, remaining stops, volume)
    fulfilled: float
    remaining: float


@dataclass
class ExecutionResult:
    iterations: list[IterationRecord]
    initial_total: float
    trucks_per_team: int

    @property
    def trucks_used(self) -> int:
        return len(self.iterations) * self.trucks_per_team

    @property
    def fulfilled(self) -> float:
        return float(sum(it.fulfilled for it in self.iterations))

    @property
    def routes(self) -> list[list[list[int]]]:
        return [it.routes for it in self.iterations]

    @property
    def plans(self) -> list[list[list[tuple[int, tuple, float]]]]:
        return [it.pickups for it in self.iterations]


def execution_loop(full: Instance, agent: AttentionPolicy, config: SubsetSearchConfig,
                   seed: int = 0, groups: Sequence[BoxGroup] | None = None) -> ExecutionResult:
    """Run subset selection / solve / commit until no demand is left.

    Without ``groups`` the chosen trial's final environment state is
    committed (volumes split freely). With ``groups`` the chosen team's routes
    and pickups are executed on individual boxes and the running demand is
    re-aggregated from the boxes, so termination means every box arrived.
    """
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    world = None
    if groups is not None:
        world = BoxWorld(groups, full.time_matrix, float(full.capacities[0]))
        demand = world.demand()
    else:
        demand = Demand.of(full)
    total0 = demand.total()
    records: list[IterationRecord] = []
    zero_streak = 0
    while demand.total() > VOL_EPS * max(1.0, total0):
        if len(records) >= config.max_iterations:
            raise StagnationError(f"iteration cap {config.max_iterations} reached with "
                                  f"{demand.total():.3f} demand left")
        if zero_streak:
            nodes = fallback_subset(full, demand, config.n_prime)
        else:
            nodes = select_best_subset(config, full, demand, agent, rng, gen).nodes
        sub = restrict(full, demand, nodes, config.clip, config.trucks_per_team)
        res = _sample_rollouts(agent, sub.instance, config.k_execution_trials, gen)
        got = fulfilled_volumes(res)
        best = res.states[int(np.argmax(got))]
        before = demand.total()
        routes = [[nodes[i] for i in t.route] for t in best.trucks]
        pickups = [[(i, tuple(nodes[j] for j in seq), v) for i, seq, v in t.pickups] for t in best.trucks]
        if world is None:
            for kind, key, c in sub.clipped:
                demand.add(kind, key, -c)
            for kind, tensor in ((CYCLIC, best.cyclic), (DIRECT, best.direct)):
                for key, v in tensor.entries.items():
                    demand.add(kind, tuple(nodes[i] for i in key), v)
            fulfilled = best.fulfilled
        else:
            fulfilled = world.run_team(routes, pickups)
            demand = world.demand()
        if demand.total() > before + 1e-6 * max(1.0, total0):
            raise AssertionError("demand increased during an iteration")
        records.append(IterationRecord(
            nodes, routes, [list(t.departures) for t in best.trucks], pickups, float(fulfilled), demand.total()))
        log.info("iteration %d: nodes %s fulfilled %.3f remaining %.3f", len(records), nodes, fulfilled,
                 demand.total())
        if fulfilled <= VOL_EPS:
            zero_streak += 1
            if zero_streak >= 2:
                raise StagnationError(f"two consecutive iterations fulfilled nothing "
                                      f"(remaining {demand.total():.3f}, last nodes {nodes})")
        else:
            zero_streak = 0
    return ExecutionResult(records, total0, config.trucks_per_team)


# full-scale box simulation

@dataclass
class Box:
    id: int
    group: int
    stops: tuple[int, ...]
    volume: float
    location: int | None
    stage: int = 0
    truck: int | None = None

    @property
    def done(self) -> bool:
        return self.stage >= len(self.stops)

    @property
    def next_stop(self) -> int:
        return self.stops[self.stage]

    @property
    def remaining(self) -> tuple[int, ...]:
        return self.stops[self.stage:]


def expand_boxes(groups: Sequence[BoxGroup]) -> list[Box]:
    boxes = []
    for g_idx, g in enumerate(groups):
        stops = tuple(g.requirement[1:]) + ((g.requirement[0],) if g.cyclic else ())
        for _ in range(g.count):
            boxes.append(Box(len(boxes), g_idx, stops, g.volume, g.requirement[0]))
    return boxes


def shift_departure(t: float, duration: float, shifts=DEFAULT_SHIFTS) -> float:
    """Earliest departure >= t such that the drive fits inside one window."""
    longest = max(b - a for a, b in shifts)
    if duration > longest:
        raise ValueError(f"a {duration:.0f} s drive does not fit in any shift window")
    day = math.floor(t / DAY_S)
    while True:
        for a, b in shifts:
            start = max(t, day * DAY_S + a)
            if start + duration <= day * DAY_S + b + 1e-9:
                return start
        day += 1


def in_shift(t0: float, t1: float, shifts=DEFAULT_SHIFTS) -> bool:
    day = math.floor(t0 / DAY_S)
    return any(day * DAY_S + a - 1e-9 <= t0 and t1 <= day * DAY_S + b + 1e-9 for a, b in shifts)


@dataclass
class FullScaleReport:
    timelines: list[dict]
    share: list[dict]
    boxes: list[Box]
    events: list[dict]
    total_volume: float
    fulfilled_volume: float
    iterations: int = 0
    trucks_used: int = 0

    @property
    def fulfillment_fraction(self) -> float:
        return self.fulfilled_volume / self.total_volume if self.total_volume > 0 else 1.0

    def listing(self) -> list[dict]:
        rows = [dict(truck=t["truck"], departure_time_s=s["departure_time_s"], departure_node=s["node"])
                for t in self.timelines for s in t["stops"]]
        rows.sort(key=lambda r: (r["departure_time_s"], r["truck"]))
        return rows

    def to_dict(self) -> dict:
        return dict(iterations=self.iterations, trucks_used=self.trucks_used,
                    fulfillment_fraction=self.fulfillment_fraction, timelines=self.timelines)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1))
        with (out / "routes.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Truck", "Departure Time", "Departure Node"])
            for r in self.listing():
                w.writerow([f"Truck {r['truck']}", f"{r['departure_time_s']:.0f}", r["departure_node"]])
        with (out / "demand_share.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["time_s", "onboard_volume", "satisfied_fraction"])
            w.writeheader()
            w.writerows(self.share)


class BoxWorld:
    """Individually tracked boxes moved by teams of trucks, one team at a time.

    Team ``k`` starts once team ``k - 1`` has finished, because its routes were
    planned on the demand left behind by the earlier teams. Moves replay in
    planned order (the environment's active-truck rule on undelayed clocks)
    so hand-overs between trucks survive shift waits. When a plan (the
    pickups per stop recorded by the environment) is given, a truck loads
    whole boxes with the planned remaining stops until each planned volume is
    covered. Without a plan it loads waiting boxes whose next stop appears
    later on its own route. Either way the largest boxes go first, boxes that
    do not fit are skipped, nothing is loaded at the start node before the
    first move, and leftovers are unloaded where a route ends.
    """

    def __init__(self, groups: Sequence[BoxGroup], time_matrix: np.ndarray, capacity: float,
                 shifts=DEFAULT_SHIFTS, names: Sequence[str] | None = None):
        self.tm = np.asarray(time_matrix, dtype=float)
        self.capacity = float(capacity)
        self.shifts = tuple(tuple(w) for w in shifts)
        self.names = list(names) if names else None
        self.boxes = expand_boxes(groups)
        for b in self.boxes:
            if not all(0 <= z < self.tm.shape[0] for z in (b.location,) + b.stops):
                raise ValueError(f"box group {groups[b.group].requirement} references an unknown node")
        self.total = float(sum(b.volume for b in self.boxes))
        self.waiting: dict[int, list[Box]] = {}
        for b in self.boxes:
            self.waiting.setdefault(b.location, []).append(b)
        self.done_volume = 0.0
        self.onboard = 0.0
        self.timelines: list[dict] = []
        self.share: list[dict] = []
        self.events: list[dict] = []
        self.clock = shift_departure(0.0, 0.0, self.shifts)
        self.teams = 0
        self.trucks = 0

    def demand(self) -> Demand:
        """Remaining demand aggregated from the waiting boxes."""
        d = Demand()
        for b in self.boxes:
            if b.done:
                continue
            if b.stage == 0 and len(b.stops) and b.stops[-1] == b.location:
                d.add(CYCLIC, (b.location,) + b.stops[:-1], b.volume)
            else:
                d.add(DIRECT, (b.location,) + b.remaining, b.volume)
        return d

    def report(self) -> FullScaleReport:
        return FullScaleReport(self.timelines, self.share, self.boxes, self.events, self.total, self.done_volume,
                               self.teams, self.trucks)

    def _label(self, z: int):
        return self.names[z] if self.names else z

    def run_team(self, team: Sequence[Sequence[int]],
                 plan: Sequence[Sequence[tuple[int, tuple, float]]] | None = None) -> float:
        """Drive one team through its routes; returns the volume it fulfilled."""
        n = self.tm.shape[0]
        for r in team:
            if any(not 0 <= z < n for z in r):
                raise ValueError(f"route {list(r)} references an unknown node")
        before = self.done_volume
        base = self.trucks
        loads: list[list[Box]] = [[] for _ in team]
        pos = [0] * len(team)
        clocks = [self.clock] * len(team)
        planned = [0.0] * len(team)
        stops_log: list[list[dict]] = [[] for _ in team]
        last_event = self.clock

        def visit(m: int, z: int, t: float) -> None:
            route = team[m]
            for b in [b for b in loads[m] if b.next_stop == z]:
                loads[m].remove(b)
                self.onboard -= b.volume
                b.stage += 1
                b.truck = None
                self.events.append(dict(box=b.id, truck=base + m, node=z, time_s=t, kind="drop"))
                if b.done:
                    b.location = None
                    self.done_volume += b.volume
                else:
                    b.location = z
                    self.waiting.setdefault(z, []).append(b)
            if pos[m] == len(route) - 1:
                for b in loads[m]:
                    b.location, b.truck = z, None
                    self.onboard -= b.volume
                    self.waiting.setdefault(z, []).append(b)
                    self.events.append(dict(box=b.id, truck=base + m, node=z, time_s=t, kind="unload"))
                loads[m] = []
            elif pos[m] > 0:
                free = self.capacity - sum(b.volume for b in loads[m])

                def load(b: Box) -> None:
                    nonlocal free
                    self.waiting[z].remove(b)
                    loads[m].append(b)
                    b.location, b.truck = None, base + m
                    free -= b.volume
                    self.onboard += b.volume
                    self.events.append(dict(box=b.id, truck=base + m, node=z, time_s=t, kind="pickup"))

                if plan is not None:
                    for stop, seq, vol in plan[m]:
                        if stop != pos[m]:
                            continue
                        got = 0.0
                        for b in sorted(self.waiting.get(z, []), key=lambda b: (-b.volume, b.id)):
                            if got >= vol - 1e-9:
                                break
                            if b.remaining == tuple(seq) and b.volume <= free + 1e-12:
                                load(b)
                                got += b.volume
                else:
                    ahead = set(route[pos[m] + 1:])
                    for b in sorted(self.waiting.get(z, []), key=lambda b: (-b.volume, b.id)):
                        if b.next_stop in ahead and b.volume <= free + 1e-12:
                            load(b)
            self.share.append(dict(time_s=t, onboard_volume=self.onboard,
                                   satisfied_fraction=self.done_volume / self.total if self.total else 1.0))

        for m, r in enumerate(team):
            if r:
                visit(m, r[0], clocks[m])
        while True:
            live = [m for m, r in enumerate(team) if pos[m] + 1 < len(r)]
            if not live:
                break
            m = min(live, key=lambda k: (planned[k], k))
            a, z = team[m][pos[m]], team[m][pos[m] + 1]
            dt = float(self.tm[a, z])
            ready = max(clocks[m], last_event)
            if dt == 0.0:
                dep = ready
            else:
                dep = shift_departure(ready, dt, self.shifts)
                assert in_shift(dep, dep + dt, self.shifts)
            stops_log[m].append(dict(node=self._label(a), departure_time_s=dep))
            planned[m] += dt
            last_event = dep
            clocks[m] = dep + dt
            pos[m] += 1
            visit(m, z, clocks[m])
        for m, r in enumerate(team):
            if r:
                stops_log[m].append(dict(node=self._label(r[-1]), departure_time_s=clocks[m]))
            self.timelines.append(dict(truck=base + m, stops=stops_log[m]))
        self.trucks += len(team)
        self.teams += 1
        if team:
            self.clock = shift_departure(max(clocks), 0.0, self.shifts)
        return self.done_volume - before


def simulate_full_scale(
    routes: Sequence[Sequence[Sequence[int]]],
    groups: Sequence[BoxGroup],
    time_matrix: np.ndarray,
    capacity: float,
    shifts=DEFAULT_SHIFTS,
    names: Sequence[str] | None = None,
    plans: Sequence[Sequence[Sequence[tuple[int, tuple, float]]]] | None = None,
) -> FullScaleReport:
    """Box-level replay of team routes; ``routes[k][m]`` is the node sequence
    of truck ``m`` in team ``k`` (see :class:`BoxWorld` for the rules)."""
    world = BoxWorld(groups, time_matrix, capacity, shifts, names)
    for k, team in enumerate(routes):
        world.run_team(team, plans[k] if plans is not None else None)
    return world.report()


# synthetic instances

@dataclass
class SyntheticSpec:
    n_nodes: int = 21
    n_groups: int = 107
    total_boxes: int = 1000
    rank3_fraction: float = 0.5
    box_volume: tuple[float, float] = (0.05, 0.25)
    capacity: float = 10.0
    n_trucks: int = 2
    horizon_s: float = SHIFT_HORIZON_S
    speed_s_per_unit: float = 3600.0
    seed: int = 0

    def __post_init__(self):
        self.box_volume = tuple(self.box_volume)
        if self.total_boxes < self.n_groups:
            raise ValueError("every box group needs at least one box")


def node_names(n: int) -> list[str]:
    if n == len(AICHI_EIGHT):
        return list(AICHI_EIGHT)
    return [f"LOCATION {i + 1:02d}" for i in range(n)]


def generate_synthetic_instance(spec: SyntheticSpec) -> tuple[Instance, list[BoxGroup]]:
    """Instance with ``n_groups`` distinct cyclic rank-2/3 routing requirements
    whose aggregated box volumes form the initial demand tensor."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_nodes
    reqs: list[tuple[int, ...]] = []
    seen = set()
    limit = n * (n - 1) + (n * (n - 1) * (n - 2) if n >= 3 else 0)
    if spec.n_groups > limit:
        raise ValueError(f"only {limit} distinct routing requirements exist on {n} nodes")
    while len(reqs) < spec.n_groups:
        r = 3 if (n >= 3 and rng.random() < spec.rank3_fraction) else 2
        key = tuple(int(i) for i in rng.choice(n, size=r, replace=False))
        if key not in seen:
            seen.add(key)
            reqs.append(key)
    counts = 1 + rng.multinomial(spec.total_boxes - spec.n_groups, rng.dirichlet(np.ones(spec.n_groups)))
    lo, hi = spec.box_volume
    groups = [BoxGroup(k, int(c), round(float(rng.uniform(lo, hi)), 4)) for k, c in zip(reqs, counts)]
    coords = rng.random((n, 2))
    inst = Instance(
        coords=coords,
        time_matrix=time_matrix_from_coords(coords, spec.speed_s_per_unit, floor=60.0),
        capacities=[spec.capacity] * spec.n_trucks,
        horizon=spec.horizon_s,
        cyclic=aggregate(groups),
        names=node_names(n),
    )
    return inst, groups


def aggregate(groups: Sequence[BoxGroup], cyclic: bool = True) -> dict[tuple, float]:
    out: dict[tuple, float] = {}
    for g in groups:
        if g.cyclic == cyclic:
            out[g.requirement] = out.get(g.requirement, 0.0) + g.count * g.volume
    return out


def groups_to_json(groups: Sequence[BoxGroup]) -> list[dict]:
    return [dict(requirement=list(g.requirement), count=g.count, volume=g.volume,
                 kind=CYCLIC if g.cyclic else DIRECT) for g in groups]


def groups_from_json(doc: Sequence[dict]) -> list[BoxGroup]:
    return [BoxGroup(tuple(int(i) for i in g["requirement"]), int(g["count"]), float(g["volume"]),
                     g.get("kind", CYCLIC) == CYCLIC) for g in doc]


def groups_from_instance(instance: Instance) -> list[BoxGroup]:
    """One box per demand entry, for instances that carry no box groups."""
    out = [BoxGroup(k, 1, v, True) for k, v in sorted(instance.cyclic.items())]
    out += [BoxGroup(k, 1, v, False) for k, v in sorted(instance.direct.items())]
    return out
