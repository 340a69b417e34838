"""Random training instances (nodes in the unit square) and named presets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import Instance

SHIFT_HORIZON_S = 57_600.0

AICHI_EIGHT = [
    "NISHIO CROSS-DOCKING",
    "NO.1 AND 2 PLANT",
    "OKAZAKI AND ELECTRIC PLANT",
    "OKAZAKI EAST PLANT",
    "TAHARA PLANT",
    "GAMAGORI PLANT",
    "KIRA PLANT",
    "MEIKO",
]


@dataclass
class InstanceSpec:
    n_nodes: int = 8
    n_trucks: int = 2
    capacity: float = 10.0
    horizon_s: float = SHIFT_HORIZON_S
    speed_s_per_unit: float = 3600.0
    n_demands: int = 6
    rank3_fraction: float = 0.0
    cyclic_fraction: float = 0.0
    max_volume: float = 5.0
    min_volume: float = 1.0

    def __post_init__(self):
        if self.n_nodes < 1 or self.n_trucks < 1:
            raise ValueError("need at least one node and one truck")


def time_matrix_from_coords(coords: np.ndarray, speed: float, floor: float = 1.0) -> np.ndarray:
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1) * speed
    d = np.maximum(d, floor)
    np.fill_diagonal(d, 0.0)
    return d


def sample_demand(spec: InstanceSpec, rng: np.random.Generator) -> tuple[dict, dict]:
    """Tuples of distinct nodes drawn uniformly, volumes uniform in
    [min_volume, max_volume]; duplicate draws accumulate."""
    cyc, dr = {}, {}
    n = spec.n_nodes
    if n < 2:
        return cyc, dr
    for _ in range(spec.n_demands):
        r = 3 if (n >= 3 and rng.random() < spec.rank3_fraction) else 2
        key = tuple(int(i) for i in rng.choice(n, size=r, replace=False))
        vol = float(rng.uniform(spec.min_volume, spec.max_volume))
        target = cyc if rng.random() < spec.cyclic_fraction else dr
        target[key] = target.get(key, 0.0) + vol
    return cyc, dr


def sample_instance(spec: InstanceSpec, rng: np.random.Generator) -> Instance:
    coords = rng.random((spec.n_nodes, 2))
    cyc, dr = sample_demand(spec, rng)
    return Instance(
        coords=coords,
        time_matrix=time_matrix_from_coords(coords, spec.speed_s_per_unit),
        capacities=[spec.capacity] * spec.n_trucks,
        horizon=spec.horizon_s,
        cyclic=cyc,
        direct=dr,
    )
