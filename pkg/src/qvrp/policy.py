"""Encoder-decoder attention policy with quantum (orthogonal) heads.

Shapes follow ``(batch, heads, nodes, features)``. The node index is a batch
dimension for every learned map, so one model handles any node count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .autodiff import DTYPE, MASK_SENTINEL
from .env import EnvironmentState, Instance, act, episode_reward, feasibility_mask, reset, route_length
from .qonn import PyramidCircuit, n_params, pyramid_matrix
from .qsampler import NoiseModel, tomography

PROJECTIONS = ("query", "key", "value")


@dataclass
class PolicyConfig:
    d: int = 128
    d_ff: int = 512
    n_heads: int = 8
    n_layers: int = 3
    encoder_quantum_heads: int = 0
    encoder_quantum_projections: tuple[str, ...] = PROJECTIONS
    decoder_quantum_heads: int = 0
    decoder_quantum_projections: tuple[str, ...] = PROJECTIONS
    dropout: float = 0.0
    tanh_clip: float = 10.0
    readout: str = "exact"
    shots: int = 500
    noise_p: float = 0.0
    noise_q: float = 0.0
    reencode: bool = False  # rerun the encoder on the current demand every step

    def __post_init__(self):
        self.encoder_quantum_projections = tuple(self.encoder_quantum_projections)
        self.decoder_quantum_projections = tuple(self.decoder_quantum_projections)
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")
        if self.n_layers != 3:
            raise ValueError("the encoder has exactly three attention layers")
        for q in (self.encoder_quantum_heads, self.decoder_quantum_heads):
            if not 0 <= q <= self.n_heads:
                raise ValueError("quantum head count must lie in [0, n_heads]")
        if self.readout not in ("exact", "sampled"):
            raise ValueError("readout is 'exact' or 'sampled'")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


PRESETS = {
    # QONN on every query/key/value in encoder and decoder
    "simulation-only": dict(d=128, d_ff=512, n_heads=8, encoder_quantum_heads=8, decoder_quantum_heads=8),
    # QONN only on encoder queries and keys
    "hardware-experiment": dict(d=64, d_ff=256, n_heads=8, encoder_quantum_heads=8,
                                encoder_quantum_projections=("query", "key"), decoder_quantum_heads=0),
    "classical": dict(d=128, d_ff=512, n_heads=8),
}


def _uniform(*shape, bound: float) -> nn.Parameter:
    return nn.Parameter(torch.empty(*shape, dtype=DTYPE).uniform_(-bound, bound))


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        b = 1.0 / math.sqrt(d_in)
        self.weight = _uniform(d_in, d_out, bound=b)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def forward(self, x):
        return ad.matmul(x, self.weight) + self.bias


class BatchNorm(nn.Module):
    """Affine batch norm over every position of the leading axes."""

    def __init__(self, features: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(features, dtype=DTYPE))
        self.register_buffer("running_mean", torch.zeros(features, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(features, dtype=DTYPE))

    def forward(self, x):
        state = ad.BatchNormState(self.running_mean, self.running_var)
        return ad.batch_norm(x, state, self.training, self.weight, self.bias)


class QuantumReadout:
    """Counts circuits and runs sampled tomography for inference."""

    def __init__(self, shots: int, noise: NoiseModel, seed: int = 0):
        self.shots = shots
        self.noise = noise
        self.rng = np.random.default_rng(seed)
        self.circuits = 0

    def apply(self, x: torch.Tensor, thetas: torch.Tensor) -> torch.Tensor:
        """x: (B, Hq, N, a); thetas: (Hq, a(a-1)/2)."""
        out = torch.zeros_like(x)
        a = x.shape[-1]
        xs = x.detach().numpy()
        for h in range(x.shape[1]):
            circ = PyramidCircuit(a, thetas[h].detach().numpy())
            for b in range(x.shape[0]):
                for i in range(x.shape[2]):
                    v = xs[b, h, i]
                    norm = float(np.linalg.norm(v))
                    if norm == 0.0:
                        continue
                    est = tomography(v / norm, circ, self.shots, self.noise, self.rng).estimate
                    self.circuits += 3
                    out[b, h, i] = torch.as_tensor(norm * est)
        return out


class MultiHeadAttention(nn.Module):
    """Multi-head attention with vector sources, dynamical masking and
    orthogonal (QONN) transforms on the last ``n_quantum`` heads."""

    def __init__(self, d: int, n_heads: int, n_sources: int, n_quantum: int = 0,
                 quantum_projections: Sequence[str] = PROJECTIONS, d_query_in: int | None = None):
        super().__init__()
        self.d, self.h, self.a = d, n_heads, d // n_heads
        self.n_quantum = n_quantum
        self.quantum_projections = tuple(quantum_projections) if n_quantum else ()
        dq = d_query_in or d
        b = 1.0 / math.sqrt(d)
        self.w_query = _uniform(n_heads, dq, self.a, bound=1.0 / math.sqrt(dq))
        self.w_key = _uniform(n_heads, d, self.a, bound=b)
        self.w_value = _uniform(n_heads, d, self.a, bound=b)
        self.n_sources = n_sources
        if n_sources:
            self.u_key = _uniform(n_heads, n_sources, self.a, bound=b)
            self.u_value = _uniform(n_heads, n_sources, self.a, bound=b)
        # (basic, mask, log, lin) per head
        self.masking = nn.Parameter(torch.tensor([[1.0, 0.0, 0.0, 0.0]] * n_heads, dtype=DTYPE))
        self.thetas = nn.ParameterDict({
            p: nn.Parameter(torch.empty(n_quantum, n_params(self.a), dtype=DTYPE).uniform_(-math.pi, math.pi))
            for p in self.quantum_projections
        })
        self.merge = Linear(n_heads * self.a, d)
        self.readout: QuantumReadout | None = None

    def circuit(self, projection: str, head: int) -> PyramidCircuit:
        """The pyramid used by quantum head ``head`` (absolute index)."""
        j = head - (self.h - self.n_quantum)
        return PyramidCircuit(self.a, self.thetas[projection][j].detach().numpy())

    def _quantum(self, x: torch.Tensor, projection: str) -> torch.Tensor:
        if projection not in self.thetas:
            return x
        c = self.h - self.n_quantum
        th = self.thetas[projection]
        if self.readout is not None and not torch.is_grad_enabled():
            qx = self.readout.apply(x[:, c:], th)
        else:
            w = pyramid_matrix(th, self.a)
            qx = torch.einsum("hij,bhnj->bhni", w, x[:, c:])
        return torch.cat([x[:, :c], qx], dim=1)

    def forward(self, hq, hkv, sources=None, demand=None, add_mask=None):
        """hq: (B, Nq, dq); hkv: (B, N, d); sources: (B, N, S);
        demand: (B, Nq, N) demand matrix for dynamical masking;
        add_mask: (B, Nq, N) additive 0 / sentinel mask."""
        q = torch.einsum("bnd,hda->bhna", hq, self.w_query)
        k = torch.einsum("bnd,hda->bhna", hkv, self.w_key)
        v = torch.einsum("bnd,hda->bhna", hkv, self.w_value)
        if self.n_sources and sources is not None:
            k = k + torch.einsum("bns,hsa->bhna", sources, self.u_key)
            v = v + torch.einsum("bns,hsa->bhna", sources, self.u_value)
        q, k, v = self._quantum(q, "query"), self._quantum(k, "key"), self._quantum(v, "value")
        u = torch.einsum("bhia,bhja->bhij", q, k) / math.sqrt(self.a)
        mask = torch.zeros_like(u)
        if demand is not None:
            g, hard = self._modulation(demand)
            u = u * g
            mask = mask + hard
        if add_mask is not None:
            mask = mask + add_mask[:, None]
        mask = torch.clamp_min(mask, MASK_SENTINEL)
        rho = ad.softmax_rows(u, mask)
        out = torch.einsum("bhij,bhja->bhia", rho, v)
        b, h, nq, a = out.shape
        return self.merge(out.permute(0, 2, 1, 3).reshape(b, nq, h * a))

    def _modulation(self, demand: torch.Tensor):
        """Finite part of G per head and the additive hard mask.

        Entries with zero demand get the sentinel in heads whose mask or log
        coefficient is positive (those terms tend to minus infinity there);
        the diagonal is never masked so every node can attend to itself.
        """
        pos = demand > 0
        posf = pos.to(DTYPE)
        logd = torch.where(pos, torch.log(torch.where(pos, demand, torch.ones_like(demand))),
                           torch.zeros_like(demand))
        A = self.masking.T[:, None, :, None, None]  # (4, 1, H, 1, 1)
        g = A[0] + A[1] * posf[:, None] + A[2] * logd[:, None] + A[3] * demand[:, None]
        coef = self.masking
        active = ((coef[:, 1] > 0) | (coef[:, 2] > 0)).to(DTYPE)
        off = ~pos
        n, m = demand.shape[-2:]
        if n == m:
            off = off & ~torch.eye(n, dtype=torch.bool)
        hard = off.to(DTYPE)[:, None] * active[None, :, None, None] * MASK_SENTINEL
        return g, hard


class EncoderLayer(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.mha = MultiHeadAttention(cfg.d, cfg.n_heads, 2, cfg.encoder_quantum_heads,
                                      cfg.encoder_quantum_projections)
        self.bn1 = BatchNorm(cfg.d)
        self.ff1 = Linear(cfg.d, cfg.d_ff)
        self.ff2 = Linear(cfg.d_ff, cfg.d)
        self.bn2 = BatchNorm(cfg.d)
        self.p = cfg.dropout

    def forward(self, h, sources, demand, generator=None):
        h = self.bn1(h + self.mha(h, h, sources, demand))
        ff = self.ff2(ad.dropout(ad.relu(self.ff1(h)), self.p, self.training, generator))
        return self.bn2(h + ff)


@dataclass
class EncoderInputs:
    features: torch.Tensor  # (B, n, 4): x, y, delta_in, delta_out (scaled)
    sources: torch.Tensor  # (B, n, 2): delta_out, delta_in (scaled)
    demand: torch.Tensor  # (B, n, n) scaled matrix demand


def demand_scale(instance: Instance) -> float:
    return float(max(instance.capacities))


def time_scale(instance: Instance) -> float:
    n = instance.n
    if n < 2:
        return 1.0
    return float(instance.time_matrix.sum() / (n * (n - 1)))


def encoder_inputs(instances: Sequence[Instance], states: Sequence[EnvironmentState] | None = None) -> EncoderInputs:
    feats, srcs, dem = [], [], []
    if states is None:
        states = [reset(inst) for inst in instances]
    for inst, st in zip(instances, states):
        c = st.cache
        s = demand_scale(inst)
        feats.append(np.column_stack([inst.coords, c.delta_in / s, c.delta_out / s]))
        srcs.append(np.column_stack([c.delta_out / s, c.delta_in / s]))
        dem.append(c.matrix_demand / s)
    t = lambda xs: torch.as_tensor(np.stack(xs), dtype=DTYPE)
    return EncoderInputs(t(feats), t(srcs), t(dem))


class Encoder(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.embed = Linear(4, cfg.d)
        self.layers = nn.ModuleList([EncoderLayer(cfg) for _ in range(cfg.n_layers)])

    def forward(self, inputs: EncoderInputs, generator=None):
        h = self.embed(inputs.features)
        for layer in self.layers:
            h = layer(h, inputs.sources, inputs.demand, generator)
        return h


N_CONTEXT = 3
N_DECODER_SOURCES = 4


class Decoder(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        d = cfg.d
        self.context = Linear(2 * d + N_CONTEXT, d)
        self.glimpse = MultiHeadAttention(d, cfg.n_heads, N_DECODER_SOURCES, cfg.decoder_quantum_heads,
                                          cfg.decoder_quantum_projections)
        self.w_pointer_query = _uniform(d, d, bound=1.0 / math.sqrt(d))
        self.w_pointer_key = _uniform(d, d, bound=1.0 / math.sqrt(d))
        self.u_pointer = _uniform(N_DECODER_SOURCES, d, bound=1.0 / math.sqrt(d))
        self.clip = cfg.tanh_clip

    def forward(self, h, pos, context_feats, sources, feasible):
        """h: (B, n, d); pos: (B,) node index of active trucks;
        context_feats: (B, 3); sources: (B, n, 4) holding remaining
        out/in demand, the active truck's drop-offs and travel time from its
        position; feasible: (B, n) bool.
        Returns probabilities (B, n)."""
        b = torch.arange(h.shape[0])
        ctx = torch.cat([h.mean(dim=1), h[b, pos], context_feats], dim=-1)
        query = self.context(ctx)[:, None]
        add = torch.where(feasible, 0.0, MASK_SENTINEL).to(DTYPE)[:, None]
        g = self.glimpse(query, h, sources, None, add)[:, 0]
        qp = g @ self.w_pointer_query
        kp = h @ self.w_pointer_key + sources @ self.u_pointer
        logits = self.clip * torch.tanh(torch.einsum("bd,bnd->bn", qp, kp) / math.sqrt(h.shape[-1]))
        return ad.softmax_rows(logits, add[:, 0])


class AttentionPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        if cfg.readout == "sampled":
            self.set_readout(QuantumReadout(cfg.shots, NoiseModel(cfg.noise_p, cfg.noise_q)))

    def attention_blocks(self) -> list[MultiHeadAttention]:
        return [l.mha for l in self.encoder.layers] + [self.decoder.glimpse]

    def set_readout(self, readout: QuantumReadout | None) -> None:
        for m in self.attention_blocks():
            m.readout = readout

    def encode(self, instances: Sequence[Instance], generator=None,
               states: Sequence[EnvironmentState] | None = None) -> torch.Tensor:
        return self.encoder(encoder_inputs(instances, states), generator)


def decoder_features(state: EnvironmentState, m: int):
    t = state.trucks[m]
    c = state.cache
    s = demand_scale(state.instance)
    ctx = [(t.capacity - t.load()) / t.capacity, (state.horizon - t.clock) / state.horizon,
           c.delta_out.sum() / s]
    tm = state.instance.time_matrix
    travel = tm[t.position] / time_scale(state.instance)
    src = np.column_stack([c.delta_out / s, c.delta_in / s, c.eps[m] / s, travel])
    return t.position, ctx, src


def decode_step(policy: AttentionPolicy, h: torch.Tensor, states: Sequence[EnvironmentState],
                trucks: Sequence[int]) -> torch.Tensor:
    """Action probabilities (B, n + 1) for the given active trucks.

    Rows without a feasible node put all mass on ``END`` (index ``n``), which
    signals termination of that truck's route.
    """
    n = h.shape[1]
    masks = np.stack([feasibility_mask(s, m) for s, m in zip(states, trucks)])
    live = masks[:, :n].any(axis=1)
    probs = torch.zeros(len(states), n + 1, dtype=DTYPE)
    probs[~torch.as_tensor(live), n] = 1.0
    rows = np.nonzero(live)[0]
    if rows.size:
        feats = [decoder_features(states[r], trucks[r]) for r in rows]
        pos = torch.as_tensor([f[0] for f in feats])
        ctx = torch.as_tensor(np.array([f[1] for f in feats]), dtype=DTYPE)
        src = torch.as_tensor(np.stack([f[2] for f in feats]), dtype=DTYPE)
        feas = torch.as_tensor(masks[rows, :n])
        p = policy.decoder(h[torch.as_tensor(rows)], pos, ctx, src, feas)
        probs = probs.index_put((torch.as_tensor(rows),), torch.cat([p, torch.zeros(len(rows), 1, dtype=DTYPE)], 1))
    return probs


@dataclass
class RolloutResult:
    states: list[EnvironmentState]
    log_prob: torch.Tensor  # (B,) sum of log step probabilities
    prob_sum: torch.Tensor  # (B,) sum of step probabilities
    rewards: np.ndarray
    actions: list[list[tuple[int, int]]] = field(default_factory=list)  # (truck, action) per row
    step_probs: list[list[float]] = field(default_factory=list)

    @property
    def routes(self) -> list[list[list[int]]]:
        return [[t.route for t in s.trucks] for s in self.states]

    @property
    def coverage(self) -> np.ndarray:
        return np.array([s.coverage() for s in self.states])

    @property
    def makespan(self) -> np.ndarray:
        return np.array([max(t.clock for t in s.trucks) for s in self.states])


def rollout(
    policy: AttentionPolicy,
    instances: Sequence[Instance],
    mode: str = "sample",
    generator: torch.Generator | None = None,
    replay: Sequence[Sequence[tuple[int, int]]] | None = None,
    unmet_penalty: float = 0.0,
) -> RolloutResult:
    """Run every instance to termination with one shared encoder pass.

    ``mode`` is ``sample``, ``greedy`` or ``replay`` (follow the recorded
    ``(truck, action)`` sequences, used to re-score a route). The active truck
    is the live truck with the smallest clock (lowest index on ties).
    """
    if mode not in ("sample", "greedy", "replay"):
        raise ValueError(f"unknown mode {mode}")
    n_set = {inst.n for inst in instances}
    if len(n_set) != 1:
        raise ValueError("instances in one rollout batch must share the node count")
    n = n_set.pop()
    B = len(instances)
    states = [reset(inst) for inst in instances]
    h = None if policy.cfg.reencode else policy.encode(instances, generator)
    log_prob = torch.zeros(B, dtype=DTYPE)
    prob_sum = torch.zeros(B, dtype=DTYPE)
    actions = [[] for _ in range(B)]
    step_probs = [[] for _ in range(B)]
    cursor = [0] * B
    while True:
        rows = [b for b in range(B) if not states[b].done]
        if not rows:
            break
        trucks = [states[b].active_truck() for b in rows]
        if policy.cfg.reencode:
            h_rows = policy.encode([instances[b] for b in rows], generator, [states[b] for b in rows])
        else:
            h_rows = h[rows]
        probs = decode_step(policy, h_rows, [states[b] for b in rows], trucks)
        live = probs[:, n] < 1.0
        if mode == "replay":
            chosen = []
            for b, m in zip(rows, trucks):
                tm, a = replay[b][cursor[b]]
                if tm != m:
                    raise ValueError(f"replay expects truck {tm}, scheduler picked {m}")
                cursor[b] += 1
                chosen.append(a)
            chosen = torch.as_tensor(chosen)
        elif mode == "greedy":
            chosen = probs.argmax(dim=1)
        else:
            chosen = torch.multinomial(probs.detach(), 1, generator=generator)[:, 0]
        p = probs.gather(1, chosen[:, None])[:, 0]
        idx = torch.as_tensor(rows)
        log_prob = log_prob.index_add(0, idx, torch.where(live, torch.log(p), torch.zeros_like(p)))
        prob_sum = prob_sum.index_add(0, idx, torch.where(live, p, torch.zeros_like(p)))
        for j, b in enumerate(rows):
            a = int(chosen[j])
            actions[b].append((trucks[j], a))
            step_probs[b].append(float(p[j].detach()))
            act(states[b], trucks[j], a, inplace=True)
    rewards = np.array([episode_reward(s, unmet_penalty) for s in states])
    return RolloutResult(states, log_prob, prob_sum, rewards, actions, step_probs)


def total_route_time(state: EnvironmentState) -> float:
    return sum(route_length(state.instance, t.route) for t in state.trucks)
