"""Sparsely-gated mixture of heterogeneous experts.

The gate reads the raw embedded input ``x0`` (flattened), optionally scaled
by multiplicative uniform jitter, passes it through a reduce/project FFN and
scores each expert by the cosine between the hidden state and a learnable
expert embedding, divided by a learnable temperature. Only the top-k scores
survive the softmax; the dispatcher hands each expert exactly the examples
that gave it nonzero weight, and the weighted outputs are summed back in
original batch order. The layer output is ``layer_norm(x + mixture)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .experts import Expert
from .rng import constant, glorot_uniform


class GateConfigError(ValueError):
    pass


class StatsError(ValueError):
    pass


class DispatchError(RuntimeError):
    pass


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class GatingNetwork:
    """Noisy cosine router with a learnable, floored temperature."""

    def __init__(
        self,
        in_dim: int,
        num_outputs: int,
        rng: np.random.Generator,
        reduction: int = 8,
        hidden: int = 32,
        jitter: float = 0.01,
        tau_min: float = 0.05,
        tau_init: float = 1.0,
    ) -> None:
        if num_outputs < 1:
            raise GateConfigError("gate needs at least one output")
        if reduction < 1:
            raise GateConfigError("reduction ratio must be >= 1")
        if not 0.0 <= jitter < 1.0:
            raise GateConfigError("jitter eps must lie in [0, 1)")
        if tau_init <= tau_min:
            raise GateConfigError("initial temperature must exceed its floor")
        self.in_dim = in_dim
        self.num_outputs = num_outputs
        self.reduced = max(1, in_dim // reduction)
        self.hidden = hidden
        self.jitter = jitter
        self.tau_min = tau_min
        self.params = {
            "reduce": glorot_uniform(rng, (in_dim, self.reduced)),
            "project": glorot_uniform(rng, (self.reduced, hidden)),
            "embeddings": glorot_uniform(rng, (num_outputs, hidden)),
            "tau_raw": constant((), _softplus_inverse(tau_init - tau_min)),
        }

    def temperature(self) -> Tensor:
        return ag.softplus(self.params["tau_raw"]) + self.tau_min

    def hidden_state(self, x0_flat: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        x = x0_flat
        if train and self.jitter > 0:
            if rng is None:
                raise GateConfigError("training-mode gating needs an rng for jitter")
            noise = rng.uniform(1.0 - self.jitter, 1.0 + self.jitter, size=x.shape)
            x = x * Tensor(noise)
        return ag.relu(x @ self.params["reduce"]) @ self.params["project"]

    def scores(self, x0_flat: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Cosine routing scores over the temperature, shape ``(B, N)``."""
        h = ag.l2_normalize(self.hidden_state(x0_flat, train, rng))
        e = ag.l2_normalize(self.params["embeddings"])
        return (h @ ag.transpose(e, (1, 0))) / self.temperature()

    @property
    def flops(self) -> int:
        return self.in_dim * self.reduced + self.reduced * self.hidden + self.num_outputs * self.hidden


@dataclass
class GateDecision:
    """Sparse routing for a batch: weights are zero off ``support``."""

    weights: Tensor  # (B, N)
    support: np.ndarray  # (B, N) bool
    indices: np.ndarray  # (B, k), best first

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def top_k_gate(g: Tensor, k: int) -> GateDecision:
    """Keep the k largest scores per row (ties go to the lower index) and softmax over them."""
    if g.ndim == 1:
        g = g.reshape(1, -1)
    N = g.shape[-1]
    if not 1 <= k <= N:
        raise GateConfigError(f"k must lie in 1..{N}, got {k}")
    order = np.argsort(-g.data, axis=-1, kind="stable")[:, :k]
    support = np.zeros(g.shape, dtype=bool)
    np.put_along_axis(support, order, True, axis=-1)
    return GateDecision(ag.softmax(g, mask=support), support, order)


@dataclass(frozen=True)
class AnnealSchedule:
    """Top-k staircase from ``num_experts`` down to ``k_final`` over ``anneal_steps``."""

    num_experts: int
    k_final: int
    anneal_steps: int

    def __post_init__(self) -> None:
        if not 1 <= self.k_final <= self.num_experts:
            raise GateConfigError(f"k_final must lie in 1..{self.num_experts}, got {self.k_final}")
        if self.anneal_steps < 0:
            raise GateConfigError("anneal_steps must be >= 0")

    def __call__(self, step: int) -> int:
        return anneal_k(step, self)


def anneal_k(step: int, schedule: AnnealSchedule) -> int:
    if step < 0:
        raise ValueError("step must be >= 0")
    N, k = schedule.num_experts, schedule.k_final
    if schedule.anneal_steps == 0 or step >= schedule.anneal_steps:
        return k
    return max(k, N - ((N - k) * step) // schedule.anneal_steps)


@dataclass
class DispatchPlan:
    batch_size: int
    groups: list[np.ndarray]  # example indices per expert, ascending

    def gather(self, batch: Tensor) -> list[Tensor | None]:
        return [ag.take(batch, idx, axis=0) if idx.size else None for idx in self.groups]

    def occurrences(self) -> np.ndarray:
        counts = np.zeros(self.batch_size, dtype=np.int64)
        for idx in self.groups:
            counts[idx] += 1
        return counts


def dispatch(support: np.ndarray) -> DispatchPlan:
    """Group example indices by the experts that gave them nonzero weight."""
    support = np.asarray(support, dtype=bool)
    return DispatchPlan(support.shape[0], [np.flatnonzero(support[:, j]) for j in range(support.shape[1])])


def combine(expert_outputs: Sequence[Tensor | None], plan: DispatchPlan, weights: Tensor) -> Tensor:
    """Weighted sum of per-expert outputs scattered back to batch order."""
    if len(expert_outputs) != len(plan.groups):
        raise DispatchError(f"{len(expert_outputs)} expert outputs for {len(plan.groups)} groups")
    B = plan.batch_size
    acc: Tensor | None = None
    for j, (out, idx) in enumerate(zip(expert_outputs, plan.groups)):
        if idx.size == 0:
            if out is not None:
                raise DispatchError(f"expert {j} produced output for an empty group")
            continue
        if out is None or out.shape[0] != idx.size:
            raise DispatchError(f"expert {j} output does not match its group of {idx.size}")
        w = ag.take(ag.take(weights, [j], axis=1), idx, axis=0)  # (m, 1)
        w = w.reshape((idx.size,) + (1,) * (out.ndim - 1))
        term = ag.scatter_rows(B, idx, out * w)
        acc = term if acc is None else acc + term
    if acc is None:
        shape = next((o.shape[1:] for o in expert_outputs if o is not None), None)
        if shape is None:
            raise DispatchError("no expert produced output; cannot infer shape")
        acc = Tensor(np.zeros((B,) + shape))
    return acc


@dataclass
class LoadStats:
    """Per-batch expert load: top-1 fraction ``f``, mean router probability ``P``."""

    f: np.ndarray
    P: Tensor
    batch_size: int

    @property
    def num_experts(self) -> int:
        return self.f.shape[0]


def load_stats(probs: Tensor) -> LoadStats:
    """Stats from dense router probabilities ``(B, N)``."""
    B, N = probs.shape
    if B == 0:
        raise StatsError("load statistics are undefined for an empty batch")
    top1 = np.argmax(probs.data, axis=1)
    f = np.bincount(top1, minlength=N).astype(np.float64) / B
    return LoadStats(f, ag.mean(probs, axis=0), B)


def load_balance_loss(stats: LoadStats, lam: float) -> Tensor:
    if stats.batch_size == 0:
        raise StatsError("load statistics are undefined for an empty batch")
    N = stats.num_experts
    return (stats.P * Tensor(stats.f)).sum() * (lam * N)


def validate_targets(targets: Sequence[float], n: int) -> np.ndarray:
    w = np.asarray(targets, dtype=np.float64)
    if w.shape != (n,):
        raise GateConfigError(f"expected {n} target loads, got {w.shape}")
    if np.any(w <= 0):
        raise GateConfigError("target loads must all be positive")
    if abs(w.sum() - 1.0) > 1e-6:
        raise GateConfigError(f"target loads must sum to 1, got {w.sum()}")
    return w


def load_distribution_loss(stats: LoadStats, targets: Sequence[float], lam: float) -> Tensor:
    if stats.batch_size == 0:
        raise StatsError("load statistics are undefined for an empty batch")
    w = validate_targets(targets, stats.num_experts)
    return (stats.P * Tensor(stats.f / w)).sum() * lam


@dataclass
class LayerResult:
    out: Tensor
    decision: GateDecision
    stats: LoadStats
    flops: np.ndarray  # per example


class SparseMoELayer:
    def __init__(
        self,
        experts: Sequence[Expert],
        gate: GatingNetwork,
        num_fields: int,
        dim: int,
        targets: Sequence[float] | None = None,
        norm_eps: float = 1e-5,
    ) -> None:
        kinds = [e.kind for e in experts]
        if len(set(kinds)) != len(kinds):
            raise GateConfigError(f"each expert kind may appear once per layer, got {[k.value for k in kinds]}")
        if gate.num_outputs != len(experts):
            raise GateConfigError("gate outputs must match the expert count")
        self.experts = list(experts)
        self.gate = gate
        self.num_fields = num_fields
        self.dim = dim
        n = len(experts)
        self.targets = validate_targets(targets if targets is not None else [1.0 / n] * n, n)
        self.norm_eps = norm_eps
        self.norm = {
            "gain": constant((num_fields, dim), 1.0),
            "bias": constant((num_fields, dim), 0.0),
        }

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def expert_flops(self) -> np.ndarray:
        return np.array([e.flops for e in self.experts], dtype=np.int64)

    def route(self, x0: Tensor, k: int, train: bool, rng) -> tuple[GateDecision, Tensor]:
        B = x0.shape[0]
        g = self.gate.scores(x0.reshape(B, -1), train, rng)
        return top_k_gate(g, k), ag.softmax(g)

    def forward(self, x: Tensor, x0: Tensor, k: int, train: bool = False, rng=None) -> LayerResult:
        decision, probs = self.route(x0, k, train, rng)
        plan = dispatch(decision.weights.data > 0)
        xs, x0s = plan.gather(x), plan.gather(x0)
        outputs = [None if xi is None else e(xi, x0i) for e, xi, x0i in zip(self.experts, xs, x0s)]
        mixture = combine(outputs, plan, decision.weights)
        out = ag.layer_norm(x + mixture, self.norm["gain"], self.norm["bias"], self.norm_eps)
        flops = self.gate.flops + decision.support.astype(np.int64) @ self.expert_flops()
        return LayerResult(out, decision, load_stats(probs), flops)
