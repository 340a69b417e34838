"""General VRP environment with tensor demand.

Demand tuples are node sequences. An off-board tuple ``(z, j, k)`` is
material waiting at ``z`` that must visit ``j`` then ``k``; a cyclic tuple
additionally returns to its first node and is stored in compact form until
it is first picked up. An on-board tuple ``(j, k)`` rides on a truck whose
next drop-off is ``j``.

The action space of a truck is the ``n`` nodes plus ``END`` (index ``n``):
drive home, unload, and stop.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOL_EPS = 1e-9
CYCLIC, DIRECT = "cyclic", "direct"


class InfeasibleMoveError(ValueError):
    pass


Tuple = tuple[int, ...]


@dataclass
class DemandTensor:
    """Sparse non-negative volumes keyed by node tuples."""

    kind: str
    entries: dict[Tuple, float] = field(default_factory=dict)

    def add(self, key: Tuple, vol: float) -> None:
        if vol <= VOL_EPS:
            return
        self.entries[key] = self.entries.get(key, 0.0) + vol

    def take(self, key: Tuple, vol: float) -> None:
        left = self.entries[key] - vol
        if left <= VOL_EPS:
            del self.entries[key]
        else:
            self.entries[key] = left

    def total(self) -> float:
        return float(sum(self.entries.values()))

    def rank(self, r: int) -> dict[Tuple, float]:
        return {k: v for k, v in self.entries.items() if len(k) == r}

    def copy(self) -> "DemandTensor":
        return DemandTensor(self.kind, dict(self.entries))


@dataclass
class OnboardDemand:
    truck: int
    entries: dict[Tuple, float] = field(default_factory=dict)

    def total(self) -> float:
        return float(sum(self.entries.values()))


@dataclass
class Instance:
    coords: np.ndarray
    time_matrix: np.ndarray
    capacities: list[float]
    horizon: float
    cyclic: dict[Tuple, float] = field(default_factory=dict)
    direct: dict[Tuple, float] = field(default_factory=dict)
    homes: list[int] | None = None
    names: list[str] | None = None

    def __post_init__(self):
        self.time_matrix = np.asarray(self.time_matrix, dtype=np.float64)
        n = self.time_matrix.shape[0]
        if self.coords is None:
            self.coords = mds_coordinates(self.time_matrix)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.homes is None:
            self.homes = [0] * len(self.capacities)
        off = ~np.eye(n, dtype=bool)
        if np.any(np.diag(self.time_matrix) != 0) or np.any(self.time_matrix[off] <= 0):
            raise ValueError("time matrix needs a zero diagonal and positive off-diagonal entries")
        for d in (self.cyclic, self.direct):
            for key, v in d.items():
                if v < 0 or any(not 0 <= i < n for i in key) or len(key) < 2:
                    raise ValueError(f"bad demand entry {key}: {v}")

    @property
    def n(self) -> int:
        return self.time_matrix.shape[0]

    @property
    def n_trucks(self) -> int:
        return len(self.capacities)

    def total_demand(self) -> float:
        return float(sum(self.cyclic.values()) + sum(self.direct.values()))

    def to_dict(self) -> dict:
        names = self.names or [f"node{i}" for i in range(self.n)]
        demand = [dict(kind=CYCLIC, nodes=list(k), volume=v) for k, v in sorted(self.cyclic.items())]
        demand += [dict(kind=DIRECT, nodes=list(k), volume=v) for k, v in sorted(self.direct.items())]
        return dict(
            nodes=[dict(id=i, name=names[i], x=float(self.coords[i, 0]), y=float(self.coords[i, 1]))
                   for i in range(self.n)],
            time_matrix=self.time_matrix.tolist(),
            trucks=[dict(capacity=c, home=h) for c, h in zip(self.capacities, self.homes)],
            horizon_s=self.horizon,
            demand=demand,
        )

    @classmethod
    def from_dict(cls, doc: dict) -> "Instance":
        nodes = sorted(doc["nodes"], key=lambda r: r["id"])
        has_xy = all("x" in r and "y" in r for r in nodes)
        cyc, dr = {}, {}
        for d in doc.get("demand", []):
            target = cyc if d["kind"] == CYCLIC else dr
            key = tuple(int(i) for i in d["nodes"])
            target[key] = target.get(key, 0.0) + float(d["volume"])
        return cls(
            coords=np.array([[r["x"], r["y"]] for r in nodes]) if has_xy else None,
            time_matrix=np.array(doc["time_matrix"], dtype=np.float64),
            capacities=[float(t["capacity"]) for t in doc["trucks"]],
            horizon=float(doc["horizon_s"]),
            cyclic=cyc,
            direct=dr,
            homes=[int(t.get("home", 0)) for t in doc["trucks"]],
            names=[r.get("name", f"node{r['id']}") for r in nodes],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Instance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def mds_coordinates(time_matrix: np.ndarray) -> np.ndarray:
    """Classical MDS of the symmetrized time matrix, rescaled into the unit square."""
    t = np.asarray(time_matrix, dtype=np.float64)
    n = t.shape[0]
    d2 = (0.5 * (t + t.T)) ** 2
    j = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * j @ d2 @ j
    w, v = np.linalg.eigh(b)
    order = np.argsort(w)[::-1][:2]
    xy = v[:, order] * np.sqrt(np.clip(w[order], 0.0, None))
    if xy.shape[1] < 2:
        xy = np.pad(xy, ((0, 0), (0, 2 - xy.shape[1])))
    lo, span = xy.min(axis=0), np.ptp(xy, axis=0)
    span[span == 0] = 1.0
    return (xy - lo) / span.max()


@dataclass
class MyopicVectors:
    eps: np.ndarray
    delta_out: np.ndarray
    delta_in: np.ndarray
    matrix_demand: np.ndarray

    def copy(self) -> "MyopicVectors":
        return MyopicVectors(self.eps.copy(), self.delta_out.copy(), self.delta_in.copy(),
                             self.matrix_demand.copy())


@dataclass
class Truck:
    index: int
    position: int
    clock: float
    capacity: float
    home: int
    onboard: OnboardDemand
    route: list[int]
    departures: list[float]
    done: bool = False
    pickups: list[tuple[int, Tuple, float]] = field(default_factory=list)  # (stop index, on-board key, volume)

    def load(self) -> float:
        return self.onboard.total()


@dataclass
class EnvironmentState:
    instance: Instance
    trucks: list[Truck]
    cyclic: DemandTensor
    direct: DemandTensor
    fulfilled: float
    initial_total: float
    cache: MyopicVectors

    @property
    def n(self) -> int:
        return self.instance.n

    @property
    def horizon(self) -> float:
        return self.instance.horizon

    @property
    def done(self) -> bool:
        return all(t.done for t in self.trucks)

    def offboard_total(self) -> float:
        return self.cyclic.total() + self.direct.total()

    def onboard_total(self) -> float:
        return sum(t.load() for t in self.trucks)

    def coverage(self) -> float:
        return self.fulfilled / self.initial_total if self.initial_total > 0 else 1.0

    def copy(self) -> "EnvironmentState":
        trucks = [
            Truck(t.index, t.position, t.clock, t.capacity, t.home,
                  OnboardDemand(t.index, dict(t.onboard.entries)), list(t.route), list(t.departures), t.done,
                  list(t.pickups))
            for t in self.trucks
        ]
        return EnvironmentState(self.instance, trucks, self.cyclic.copy(), self.direct.copy(),
                                self.fulfilled, self.initial_total, self.cache.copy())

    def active_truck(self) -> int | None:
        live = [t for t in self.trucks if not t.done]
        if not live:
            return None
        return min(live, key=lambda t: (t.clock, t.index)).index

    # incremental bookkeeping keeps ``cache`` equal to ``myopic(self)``
    def _off_add(self, kind: str, key: Tuple, vol: float) -> None:
        (self.cyclic if kind == CYCLIC else self.direct).add(key, vol)
        self._off_cache(key, vol)

    def _off_take(self, kind: str, key: Tuple, vol: float) -> None:
        (self.cyclic if kind == CYCLIC else self.direct).take(key, vol)
        self._off_cache(key, -vol)

    def _off_cache(self, key: Tuple, vol: float) -> None:
        c = self.cache
        c.delta_out[key[0]] += vol
        c.delta_in[key[1]] += vol
        c.matrix_demand[key[0], key[1]] += vol

    def _on_add(self, m: int, key: Tuple, vol: float) -> None:
        e = self.trucks[m].onboard.entries
        e[key] = e.get(key, 0.0) + vol
        self.cache.eps[m, key[0]] += vol


def reset(instance: Instance) -> EnvironmentState:
    n, N = instance.n, instance.n_trucks
    trucks = [
        Truck(m, instance.homes[m], 0.0, float(instance.capacities[m]), instance.homes[m],
              OnboardDemand(m), [instance.homes[m]], [0.0])
        for m in range(N)
    ]
    cache = MyopicVectors(np.zeros((N, n)), np.zeros(n), np.zeros(n), np.zeros((n, n)))
    state = EnvironmentState(instance, trucks, DemandTensor(CYCLIC), DemandTensor(DIRECT), 0.0,
                             instance.total_demand(), cache)
    for key, v in instance.cyclic.items():
        state._off_add(CYCLIC, key, v)
    for key, v in instance.direct.items():
        state._off_add(DIRECT, key, v)
    return state


def myopic(state: EnvironmentState) -> MyopicVectors:
    """Recompute the myopic vectors from the sparse tensors."""
    n, N = state.n, len(state.trucks)
    eps = np.zeros((N, n))
    for t in state.trucks:
        for key, v in t.onboard.entries.items():
            eps[t.index, key[0]] += v
    d_out, d_in, mat = np.zeros(n), np.zeros(n), np.zeros((n, n))
    for tensor in (state.cyclic, state.direct):
        for key, v in tensor.entries.items():
            d_out[key[0]] += v
            d_in[key[1]] += v
            mat[key[0], key[1]] += v
    return MyopicVectors(eps, d_out, d_in, mat)


def drop_off(state: EnvironmentState, m: int) -> float:
    """Unload everything on truck ``m`` whose next stop is its position.

    Returns the volume that completed its requirement. Mutates ``state``.
    """
    truck = state.trucks[m]
    z = truck.position
    done_vol = 0.0
    for key in [k for k in truck.onboard.entries if k[0] == z]:
        vol = truck.onboard.entries.pop(key)
        state.cache.eps[m, z] -= vol
        if len(key) == 1:
            done_vol += vol
        else:
            state._off_add(DIRECT, key, vol)
    state.fulfilled += done_vol
    return done_vol


def pick_up(state: EnvironmentState, m: int) -> float:
    """Load off-board demand waiting at truck ``m``'s position.

    Candidates are taken by volume (largest first); tuples that do not fit are
    skipped, then the remaining capacity is filled by splitting skipped tuples
    in the same order. Mutates ``state``; returns the loaded volume.
    """
    truck = state.trucks[m]
    z = truck.position
    free = truck.capacity - truck.load()
    cands = [(v, CYCLIC, k) for k, v in state.cyclic.entries.items() if k[0] == z]
    cands += [(v, DIRECT, k) for k, v in state.direct.entries.items() if k[0] == z]
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    loaded, skipped = 0.0, []
    for vol, kind, key in cands:
        if vol <= free + VOL_EPS:
            _load(state, m, kind, key, vol)
            free -= vol
            loaded += vol
        else:
            skipped.append((vol, kind, key))
    for vol, kind, key in skipped:
        if free <= VOL_EPS:
            break
        part = min(vol, free)
        _load(state, m, kind, key, part)
        free -= part
        loaded += part
    return loaded


def _load(state: EnvironmentState, m: int, kind: str, key: Tuple, vol: float) -> None:
    state._off_take(kind, key, vol)
    rest = key[1:] + (key[0],) if kind == CYCLIC else key[1:]
    state._on_add(m, rest, vol)
    truck = state.trucks[m]
    truck.pickups.append((len(truck.route) - 1, rest, vol))


def step(
    state: EnvironmentState, m: int, z: int, pickup: bool = True, inplace: bool = False
) -> tuple[EnvironmentState, float]:
    """Drive truck ``m`` to node ``z``, drop off, then pick up.

    Capacity is checked after the drop-offs. Returns the new state and the
    driving time; the input state is left untouched unless ``inplace``.
    """
    if not 0 <= z < state.n:
        raise ValueError(f"unknown node {z}")
    truck = state.trucks[m]
    if truck.done:
        raise InfeasibleMoveError(f"truck {m} has ended its route")
    dt = float(state.instance.time_matrix[truck.position, z])
    if truck.clock + dt > state.horizon + 1e-9:
        raise InfeasibleMoveError(f"truck {m} cannot reach node {z} before the horizon")
    s = state if inplace else state.copy()
    t = s.trucks[m]
    t.clock += dt
    t.position = z
    t.route.append(z)
    t.departures.append(t.clock)
    drop_off(s, m)
    if pickup:
        pick_up(s, m)
    return s, dt


def end_route(state: EnvironmentState, m: int, inplace: bool = False) -> tuple[EnvironmentState, float]:
    """Terminate truck ``m``: drive home and unload.

    Cargo not bound for home stays at home as direct demand continuing its
    stop sequence, so no volume is lost.
    """
    s = state if inplace else state.copy()
    t = s.trucks[m]
    dt = float(s.instance.time_matrix[t.position, t.home])
    if t.position != t.home:
        t.clock += dt
        t.position = t.home
        t.route.append(t.home)
        t.departures.append(t.clock)
        drop_off(s, m)
    for key, vol in list(t.onboard.entries.items()):
        del t.onboard.entries[key]
        s.cache.eps[m, key[0]] -= vol
        s._off_add(DIRECT, (t.home,) + key, vol)
    t.done = True
    return s, dt


def feasibility_mask(state: EnvironmentState, m: int) -> np.ndarray:
    """Boolean vector of length ``n + 1``; the last entry is ``END``.

    A node is feasible when the truck can reach it and still get home within
    the horizon, and the visit drops off or picks up material. ``END`` is
    feasible exactly when no node is.
    """
    n = state.n
    mask = np.zeros(n + 1, dtype=bool)
    truck = state.trucks[m]
    if truck.done:
        return mask
    tm = state.instance.time_matrix
    reach = truck.clock + tm[truck.position] + tm[:, truck.home] <= state.horizon + 1e-9
    c = state.cache
    drop = c.eps[m] > VOL_EPS
    free = truck.capacity - truck.load() + c.eps[m]
    pick = (c.delta_out > VOL_EPS) & (free > VOL_EPS)
    mask[:n] = reach & (drop | pick)
    mask[n] = not mask[:n].any()
    return mask


def act(state: EnvironmentState, m: int, action: int, inplace: bool = False) -> tuple[EnvironmentState, float]:
    if action == state.n:
        return end_route(state, m, inplace=inplace)
    return step(state, m, action, inplace=inplace)


def route_length(instance: Instance, route: list[int]) -> float:
    tm = instance.time_matrix
    return float(sum(tm[a, b] for a, b in zip(route[:-1], route[1:])))


def episode_reward(state: EnvironmentState, unmet_penalty: float = 0.0) -> float:
    """Negated total route time; optionally minus ``unmet_penalty`` per unit
    of volume not fulfilled."""
    total = sum(route_length(state.instance, t.route) for t in state.trucks)
    return -total - unmet_penalty * (state.initial_total - state.fulfilled)


def route_log(state: EnvironmentState, names: list[str] | None = None) -> list[dict]:
    """Rows (truck, departure_time_s, departure_node) sorted by time."""
    rows = []
    for t in state.trucks:
        for node, time in zip(t.route, t.departures):
            rows.append(dict(truck=t.index, departure_time_s=time,
                             departure_node=names[node] if names else node))
    rows.sort(key=lambda r: (r["departure_time_s"], r["truck"]))
    return rows
