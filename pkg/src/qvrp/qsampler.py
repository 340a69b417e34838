"""Full statevector simulation of loader + pyramid circuits, shot sampling,
three-circuit unary tomography and the accuracy benchmark.

Qubit ``i`` is the ``i``-th most significant bit of a basis index, so the
unary basis state with qubit ``i`` excited has index ``1 << (n - 1 - i)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .qonn import PyramidCircuit, RbsGate, extract_orthogonal_matrix, loader_angles

MAX_QUBITS = 14
COMPARE_PI_4 = math.pi / 4


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Depolarizing probability ``p`` after each two-qubit gate and
    independent readout bit-flip probability ``q``."""

    p: float = 0.0
    q: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.q <= 1.0):
            raise ValueError("noise probabilities must lie in [0, 1]")

    @property
    def ideal(self) -> bool:
        return self.p == 0.0 and self.q == 0.0


IDEAL = NoiseModel()


@dataclass
class StateVector:
    n: int
    amplitudes: np.ndarray

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def unary_amplitudes(self) -> np.ndarray:
        return self.amplitudes[unary_indices(self.n)]


def unary_indices(n: int) -> np.ndarray:
    return np.array([1 << (n - 1 - i) for i in range(n)], dtype=np.int64)


def loader_gates(x) -> list[RbsGate]:
    return [RbsGate(i, i + 1, float(a)) for i, a in enumerate(loader_angles(x))]


def comparison_gates(n: int, offset: int) -> list[RbsGate]:
    """pi/4 gates on pairs (offset, offset+1), (offset+2, offset+3), ..."""
    return [RbsGate(i, i + 1, COMPARE_PI_4) for i in range(offset, n - 1, 2)]


def qonn_gates(x, circuit: PyramidCircuit, extra: Sequence[RbsGate] = ()) -> list[RbsGate]:
    return loader_gates(x) + circuit.gates + list(extra)


def _idx(n: int, a: int, va: int, b: int, vb: int, batch: bool):
    i = [slice(None)] * (n + int(batch))
    i[a + int(batch)] = va
    i[b + int(batch)] = vb
    return tuple(i)


def _apply_rbs(psi: np.ndarray, n: int, g: RbsGate, batch: bool) -> None:
    ia = _idx(n, g.qubit_a, 1, g.qubit_b, 0, batch)
    ib = _idx(n, g.qubit_a, 0, g.qubit_b, 1, batch)
    c, s = math.cos(g.theta), math.sin(g.theta)
    xa, xb = psi[ia].copy(), psi[ib].copy()
    psi[ia] = c * xa + s * xb
    psi[ib] = -s * xa + c * xb


def _apply_pauli(psi: np.ndarray, qubit: int, kind: int) -> np.ndarray:
    """kind 1=X, 2=Y, 3=Z on axis ``qubit + 1`` of a batched state."""
    ax = qubit + 1
    if kind in (2, 3):
        one = [slice(None)] * psi.ndim
        one[ax] = 1
        psi[tuple(one)] *= -1
    if kind in (1, 2):
        psi = np.flip(psi, axis=ax).copy()
    if kind == 2:
        psi = psi * 1j
    return psi


def _check_n(n: int) -> None:
    if n > MAX_QUBITS:
        raise CapacityError(f"{n} qubits exceeds the {MAX_QUBITS}-qubit statevector limit")


def simulate_full(
    gates: Sequence[RbsGate],
    n: int,
    noise: NoiseModel = IDEAL,
    shots: int | None = None,
    rng: np.random.Generator | None = None,
):
    """Run ``gates`` on ``|10...0>``.

    With ``shots=None`` the exact (noiseless) statevector is returned.
    Otherwise an array of measurement counts over all ``2**n`` outcomes.
    Depolarizing noise is sampled as quantum trajectories: shots that draw
    no error share the ideal distribution, the rest are simulated one by one
    as a batch.
    """
    _check_n(n)
    psi = np.zeros((2,) * n, dtype=np.complex128)
    psi[(1,) + (0,) * (n - 1)] = 1.0
    if shots is None:
        if not noise.ideal:
            raise ValueError("exact statevector mode is noiseless; request shots for noisy runs")
        for g in gates:
            _apply_rbs(psi, n, g, batch=False)
        return StateVector(n, psi.reshape(-1))
    if shots < 1:
        raise ValueError("shots must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    ideal = psi.copy()
    for g in gates:
        _apply_rbs(ideal, n, g, batch=False)
    probs = np.abs(ideal.reshape(-1)) ** 2
    probs /= probs.sum()
    dim = 1 << n
    errs = rng.random((shots, len(gates))) < noise.p if noise.p > 0 else np.zeros((shots, 0), bool)
    hit = errs.any(axis=1) if errs.size else np.zeros(shots, bool)
    n_clean = int(shots - hit.sum())
    counts = rng.multinomial(n_clean, probs).astype(np.int64)
    if hit.any():
        rows = errs[hit]
        b = rows.shape[0]
        batch = np.zeros((b,) + (2,) * n, dtype=np.complex128)
        batch[(slice(None), 1) + (0,) * (n - 1)] = 1.0
        for k, g in enumerate(gates):
            _apply_rbs(batch, n, g, batch=True)
            sel = np.nonzero(rows[:, k])[0]
            if sel.size:
                paulis = rng.integers(1, 16, size=sel.size)
                sub = batch[sel]
                for j in range(sel.size):
                    pa, pb = divmod(int(paulis[j]), 4)
                    one = sub[j : j + 1]
                    if pa:
                        one = _apply_pauli(one, g.qubit_a, pa)
                    if pb:
                        one = _apply_pauli(one, g.qubit_b, pb)
                    sub[j : j + 1] = one
                batch[sel] = sub
        p_rows = np.abs(batch.reshape(b, dim)) ** 2
        p_rows /= p_rows.sum(axis=1, keepdims=True)
        cum = np.cumsum(p_rows, axis=1)
        u = rng.random((b, 1))
        outcomes = np.minimum((cum < u).sum(axis=1), dim - 1)
        counts += np.bincount(outcomes, minlength=dim)
    if noise.q > 0:
        counts = _readout_flips(counts, n, noise.q, rng)
    return counts


def _readout_flips(counts: np.ndarray, n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    outcomes = np.repeat(np.arange(counts.size), counts)
    flips = rng.random((outcomes.size, n)) < q
    masks = (flips * (1 << np.arange(n - 1, -1, -1))).sum(axis=1)
    return np.bincount(outcomes ^ masks, minlength=counts.size).astype(np.int64)


@dataclass
class TomographyResult:
    estimate: np.ndarray
    shots_per_circuit: int | None
    circuits_used: int = 3
    reliable: np.ndarray | None = None


def chain_signs(magnitudes: np.ndarray, same_sign: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Propagate signs from component 0 (taken positive) along adjacent
    comparisons ``same_sign[k]`` between components ``k`` and ``k+1``.

    A comparison involving a component whose magnitude is not above
    ``threshold`` is unreliable; the component then takes the sign of the
    last reliable component.
    """
    n = len(magnitudes)
    signs = np.ones(n)
    last = 1.0
    for k in range(1, n):
        if magnitudes[k - 1] > threshold and magnitudes[k] > threshold:
            signs[k] = signs[k - 1] if same_sign[k - 1] else -signs[k - 1]
        else:
            signs[k] = last
        if magnitudes[k] > threshold:
            last = signs[k]
    return signs


def tomography_probabilities(
    x,
    circuit: PyramidCircuit,
    shots: int | None,
    noise: NoiseModel = IDEAL,
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    """Unary outcome probabilities of the three tomography circuits."""
    n = circuit.n
    idx = unary_indices(n)
    out = []
    for extra in ([], comparison_gates(n, 0), comparison_gates(n, 1)):
        gates = qonn_gates(x, circuit, extra)
        if shots is None:
            out.append(simulate_full(gates, n).probabilities()[idx])
        else:
            out.append(simulate_full(gates, n, noise, shots, rng)[idx] / shots)
    return out


def tomography(
    x,
    circuit: PyramidCircuit,
    shots: int | None,
    noise: NoiseModel = IDEAL,
    rng: np.random.Generator | None = None,
) -> TomographyResult:
    """Estimate ``W x`` (sign gauge: first component non-negative).

    ``shots=None`` uses exact probabilities.
    """
    if shots is not None and shots < 1:
        raise ValueError("shots must be >= 1")
    p1, p2, p3 = tomography_probabilities(x, circuit, shots, noise, rng)
    mags = np.sqrt(p1)
    n = circuit.n
    same = np.zeros(max(n - 1, 0), dtype=bool)
    for k in range(n - 1):
        p = p2 if k % 2 == 0 else p3
        # after the pi/4 gate p_k ~ (y_k + y_k+1)^2 / 2 and p_k+1 ~ (y_k - y_k+1)^2 / 2
        same[k] = p[k] > p[k + 1]
    thr = 0.0 if shots is None else 2.0 / math.sqrt(shots)
    signs = chain_signs(mags, same, thr)
    return TomographyResult(mags * signs, shots, 3, mags > thr)


def gauge_fix(y: np.ndarray) -> np.ndarray:
    nz = np.nonzero(np.abs(y) > 0)[0]
    if nz.size and y[nz[0]] < 0:
        return -y
    return y.copy()


@dataclass
class BenchmarkReport:
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    CSV_COLUMNS = ("n", "trial", "component", "exact_value", "estimated_value", "shots", "noise_p")

    def write(self, out_dir: str | Path, stem: str = "qonn_benchmark") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        with csv_path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CSV_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in self.CSV_COLUMNS})
        json_path.write_text(json.dumps(self.summary, indent=2, sort_keys=True))
        return csv_path, json_path


def benchmark_qonn(
    qubit_counts: Sequence[int] = (4, 5, 6, 7, 8, 9, 10),
    trials: int = 10,
    shots: int | None = 500,
    noise: NoiseModel = IDEAL,
    seed: int = 0,
) -> BenchmarkReport:
    """Random pyramids and inputs (angles and entries ~ Normal(1, 1)) run
    through three-circuit tomography; compares against the exact ``W x``."""
    for n in qubit_counts:
        _check_n(n)
    master = np.random.SeedSequence(seed)
    report = BenchmarkReport()
    per_n = {}
    children = master.spawn(len(qubit_counts))
    for n, ss in zip(qubit_counts, children):
        errs, mag_errs, sign_err = [], [], 0
        for trial, tss in enumerate(ss.spawn(trials)):
            rng = np.random.default_rng(tss)
            circ = PyramidCircuit(n, rng.normal(1.0, 1.0, n * (n - 1) // 2))
            x = rng.normal(1.0, 1.0, n)
            x /= np.linalg.norm(x)
            exact = gauge_fix(extract_orthogonal_matrix(circ) @ x)
            est = tomography(x, circ, shots, noise, rng).estimate
            sign_err += int(np.sum(np.sign(est) != np.sign(exact)))
            errs.append(np.abs(est - exact))
            # sign-free error: unaffected by sign-chain cascades
            mag_errs.append(float(np.linalg.norm(np.abs(est) - np.abs(exact))))
            for k in range(n):
                report.rows.append(
                    dict(n=n, trial=trial, component=k, exact_value=float(exact[k]),
                         estimated_value=float(est[k]), shots=shots if shots is not None else "exact",
                         noise_p=noise.p)
                )
        e = np.concatenate(errs)
        per_n[str(n)] = dict(mean_abs_error=float(e.mean()), max_abs_error=float(e.max()),
                             mean_magnitude_error=float(np.mean(mag_errs)), sign_errors=sign_err,
                             circuits=3 * trials)
    circuits = 3 * trials * len(qubit_counts)
    report.summary = dict(
        qubit_counts=list(qubit_counts), trials=trials, shots=shots, noise=asdict(noise), seed=seed,
        circuits=circuits, measurements=circuits * shots if shots is not None else 0, per_n=per_n,
    )
    return report
