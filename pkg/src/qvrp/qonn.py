"""Exact emulation of RBS-gate orthogonal layers in the unary subspace.

Convention used throughout the package (loader, pyramid, full simulator and
tomography): an RBS gate with angle ``theta`` on qubits ``(a, b)`` rotates the
unary amplitudes as

    x_a' =  cos(theta) x_a + sin(theta) x_b
    x_b' = -sin(theta) x_a + cos(theta) x_b

A pyramid on ``n`` qubits has ``n(n-1)/2`` gates; its ``thetas`` vector is
indexed in gate order (layer by layer, top pair first within a layer).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from .autodiff import DTYPE

UNIT_TOL = 1e-9


class NormalizationError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class RbsGate:
    qubit_a: int
    qubit_b: int
    theta: float

    def __post_init__(self):
        if self.qubit_a == self.qubit_b:
            raise ValueError("RBS gate needs two distinct qubits")

    def unary_matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, s], [-s, c]])


@lru_cache(maxsize=None)
def pyramid_layers(n: int) -> tuple[tuple[tuple[int, int], ...], ...]:
    """Qubit pairs of the pyramid, grouped into layers of disjoint gates."""
    layers = []
    for t in range(max(2 * n - 3, 0)):
        hi = min(t, 2 * n - 4 - t)
        layers.append(tuple((i, i + 1) for i in range(t % 2, hi + 1, 2)))
    return tuple(layers)


def pyramid_pairs(n: int) -> list[tuple[int, int]]:
    return [p for layer in pyramid_layers(n) for p in layer]


def n_params(n: int) -> int:
    return n * (n - 1) // 2


@dataclass(frozen=True)
class PyramidCircuit:
    n: int
    thetas: np.ndarray = field(repr=False)

    def __post_init__(self):
        th = np.asarray(self.thetas, dtype=np.float64).reshape(-1)
        if th.size != n_params(self.n):
            raise ValueError(f"pyramid on {self.n} qubits takes {n_params(self.n)} angles, got {th.size}")
        object.__setattr__(self, "thetas", th)

    @classmethod
    def identity(cls, n: int) -> "PyramidCircuit":
        return cls(n, np.zeros(n_params(n)))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "PyramidCircuit":
        return cls(n, rng.uniform(-np.pi, np.pi, n_params(n)))

    @property
    def gates(self) -> list[RbsGate]:
        return [RbsGate(a, b, float(t)) for (a, b), t in zip(pyramid_pairs(self.n), self.thetas)]

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "thetas": [float(t) for t in self.thetas]})

    @classmethod
    def from_json(cls, text: str) -> "PyramidCircuit":
        doc = json.loads(text)
        return cls(int(doc["n"]), np.asarray(doc["thetas"], dtype=np.float64))


@dataclass
class UnaryState:
    amplitudes: np.ndarray

    @property
    def n(self) -> int:
        return len(self.amplitudes)


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, True
    if isinstance(x, UnaryState):
        x = x.amplitudes
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def rotate_pairs(x: torch.Tensor, pairs, theta: torch.Tensor) -> torch.Tensor:
    """Apply disjoint RBS rotations on the last axis of ``x``.

    ``theta`` has one trailing entry per pair and broadcasts against
    ``x[..., a]``.
    """
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    xa, xb = x[..., a], x[..., b]
    c, s = torch.cos(theta), torch.sin(theta)
    out = x.clone()
    out[..., a] = c * xa + s * xb
    out[..., b] = -s * xa + c * xb
    return out


def _layer_slices(n: int) -> list[tuple[tuple[tuple[int, int], ...], slice]]:
    out, k = [], 0
    for layer in pyramid_layers(n):
        out.append((layer, slice(k, k + len(layer))))
        k += len(layer)
    return out


def pyramid_forward(x: torch.Tensor, thetas: torch.Tensor) -> torch.Tensor:
    """Run the pyramid on vectors ``x`` (..., n); ``thetas`` is (n(n-1)/2,)."""
    n = x.shape[-1]
    for layer, sl in _layer_slices(n):
        x = rotate_pairs(x, layer, thetas[sl])
    return x


def pyramid_matrix(thetas: torch.Tensor, n: int) -> torch.Tensor:
    """Orthogonal matrices for a batch of angle vectors ``thetas`` (..., n(n-1)/2).

    Differentiable in ``thetas``; row ``j`` of the propagated identity holds
    ``W e_j`` so the result is transposed at the end.
    """
    lead = thetas.shape[:-1]
    cols = torch.eye(n, dtype=thetas.dtype).expand(*lead, n, n)
    for layer, sl in _layer_slices(n):
        cols = rotate_pairs(cols, layer, thetas[..., sl].unsqueeze(-2))
    return cols.transpose(-1, -2)


def apply_pyramid(state, circuit: PyramidCircuit, thetas: torch.Tensor | None = None):
    """``W x`` for the circuit's orthogonal ``W``.

    Accepts numpy arrays, :class:`UnaryState` or torch tensors. Passing
    ``thetas`` as a tensor overrides the circuit angles so gradients reach them.
    """
    x, is_t = _as_tensor(state)
    if x.shape[-1] != circuit.n:
        raise ValueError(f"state has length {x.shape[-1]}, circuit acts on {circuit.n} qubits")
    th = thetas if thetas is not None else torch.as_tensor(circuit.thetas, dtype=x.dtype)
    y = pyramid_forward(x, th)
    if is_t or thetas is not None:
        return y
    out = y.numpy()
    return UnaryState(out) if isinstance(state, UnaryState) else out


def extract_orthogonal_matrix(circuit: PyramidCircuit) -> np.ndarray:
    return pyramid_matrix(torch.as_tensor(circuit.thetas, dtype=DTYPE), circuit.n).numpy()


def qonn_layer(v, circuit: PyramidCircuit, thetas: torch.Tensor | None = None):
    """The per-head operator: ``|v| * W (v / |v|)``, which is just ``W v``.

    The zero vector maps to zero. Loading needs a unit vector, but linearity
    of ``W`` lets any vector be handled by factoring its norm back in.
    """
    return apply_pyramid(v, circuit, thetas)


def loader_angles(x) -> np.ndarray:
    """Angles of the diagonal loader that prepares ``x`` from ``e_1``.

    Gate ``i`` acts on qubits ``(i, i+1)``; there are ``n - 1`` of them. The
    last angle ranges over the full circle, so every unit vector (any signs)
    is reachable without a separate sign bit.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        raise DegenerateInputError("cannot load the zero vector")
    if abs(norm - 1.0) > UNIT_TOL:
        raise NormalizationError(f"loader input must be a unit vector, norm is {norm}")
    n = x.size
    # with this gate convention amplitude k carries prod_{j<k}(-sin a_j) cos a_k,
    # i.e. standard hyperspherical coordinates with negated angles
    phi = np.zeros(max(n - 1, 0))
    for k in range(n - 1):
        tail = float(np.linalg.norm(x[k:]))
        if tail == 0.0:
            break
        if k < n - 2:
            phi[k] = math.acos(max(-1.0, min(1.0, x[k] / tail)))
        else:
            phi[k] = math.atan2(x[k + 1], x[k])
    return -phi


def load(angles) -> np.ndarray:
    """Replay the loader on ``e_1`` and return the unary amplitudes."""
    angles = np.asarray(angles, dtype=np.float64)
    n = angles.size + 1
    x = np.zeros(n)
    x[0] = 1.0
    for i, a in enumerate(angles):
        c, s = math.cos(a), math.sin(a)
        xa, xb = x[i], x[i + 1]
        x[i], x[i + 1] = c * xa + s * xb, -s * xa + c * xb
    return x
