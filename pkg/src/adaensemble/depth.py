"""Per-depth estimators, the depth-selecting gate, and early-exit propagation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import constant, glorot_uniform
from .sparse_moe import GatingNetwork, LayerResult, SparseMoELayer


class PlanError(ValueError):
    pass


class Estimator:
    """``sigmoid(w . flatten(x) + b)``: one logit from the whole feature map."""

    def __init__(self, num_fields: int, dim: int, rng: np.random.Generator) -> None:
        fd = num_fields * dim
        self.params = {
            "w": glorot_uniform(rng, (fd, 1), fan_in=fd, fan_out=1),
            "b": constant((), 0.0),
        }
        self.flops = fd

    def logit(self, x: Tensor) -> Tensor:
        B = x.shape[0]
        return (x.reshape(B, -1) @ self.params["w"]).reshape(B) + self.params["b"]

    def __call__(self, x: Tensor) -> Tensor:
        return ag.sigmoid(self.logit(x))


def estimate(x: Tensor, est: Estimator) -> Tensor:
    return est(x)


@dataclass
class DepthPlan:
    """Soft depth probabilities ``(B, L)`` and hard 1-based exit depths ``(B,)``."""

    probs: Tensor
    depths: np.ndarray

    @property
    def num_depths(self) -> int:
        return self.probs.shape[1]


def depth_gate(x0_flat: Tensor, net: GatingNetwork, train: bool = False, rng=None) -> DepthPlan:
    """Dense softmax over depths; the hard plan keeps only the argmax (lowest depth on ties)."""
    probs = ag.softmax(net.scores(x0_flat, train, rng))
    return DepthPlan(probs, np.argmax(probs.data, axis=1) + 1)


@dataclass
class RoutingTrace:
    """Which examples reached each layer and which experts they used there."""

    batch_size: int
    num_layers: int
    reached: list[np.ndarray] = field(default_factory=list)
    support: list[np.ndarray] = field(default_factory=list)
    top1: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def empty(cls, batch_size: int, layers: Sequence[SparseMoELayer]) -> RoutingTrace:
        return cls(
            batch_size,
            len(layers),
            [np.zeros(batch_size, dtype=bool) for _ in layers],
            [np.zeros((batch_size, layer.num_experts), dtype=bool) for layer in layers],
            [np.full(batch_size, -1, dtype=np.int64) for _ in layers],
        )

    def record(self, depth: int, ids: np.ndarray, support: np.ndarray, top1: np.ndarray) -> None:
        self.reached[depth][ids] = True
        self.support[depth][ids] = support
        self.top1[depth][ids] = top1


def dynamic_propagation(
    x0: Tensor,
    depths: np.ndarray,
    layers: Sequence[SparseMoELayer],
    estimators: Sequence[Estimator],
    k: int | Sequence[int],
    trace: RoutingTrace | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Batched early exit: run a layer, let examples whose plan ends here exit, recurse on the rest.

    Returns predictions and per-example FLOPs (layers run plus the exit
    estimator), both in the original batch order.
    """
    depths = np.asarray(depths)
    L = len(layers)
    if L < 1 or len(estimators) != L:
        raise PlanError("need at least one layer and one estimator per layer")
    if depths.size and (depths.min() < 1 or depths.max() > L):
        raise PlanError(f"plan depths must lie in 1..{L}")
    ks = [k] * L if isinstance(k, (int, np.integer)) else list(k)
    B = x0.shape[0]
    ids = np.arange(B)
    flops = np.zeros(B, dtype=np.int64)
    preds = _propagate(x0, x0, depths, ids, 0, layers, estimators, ks, flops, trace)
    return preds, flops


def _propagate(x, x0, depths, ids, depth, layers, estimators, ks, flops, trace) -> Tensor:
    res = layers[depth].forward(x, x0, ks[depth], train=False)
    flops[ids] += res.flops
    if trace is not None:
        trace.record(depth, ids, res.decision.support, res.decision.indices[:, 0])
    out = res.out
    depth += 1
    if depth == len(layers):
        flops[ids] += estimators[depth - 1].flops
        return estimators[depth - 1](out)
    leaving = depths == depth
    exit_idx = np.flatnonzero(leaving)
    keep_idx = np.flatnonzero(~leaving)
    n = x.shape[0]
    acc: Tensor | None = None
    if exit_idx.size:
        flops[ids[exit_idx]] += estimators[depth - 1].flops
        y_exit = estimators[depth - 1](ag.take(out, exit_idx, axis=0))
        acc = ag.scatter_rows(n, exit_idx, y_exit)
    if keep_idx.size:
        y_keep = _propagate(
            ag.take(out, keep_idx, axis=0),
            ag.take(x0, keep_idx, axis=0),
            depths[keep_idx],
            ids[keep_idx],
            depth,
            layers,
            estimators,
            ks,
            flops,
            trace,
        )
        part = ag.scatter_rows(n, keep_idx, y_keep)
        acc = part if acc is None else acc + part
    return acc


@dataclass
class SoftDepthResult:
    preds: Tensor  # (B,)
    per_depth: list[Tensor]
    layers: list[LayerResult]


def soft_depth_forward(
    x0: Tensor,
    depth_probs: Tensor,
    layers: Sequence[SparseMoELayer],
    estimators: Sequence[Estimator],
    k: int | Sequence[int],
    train: bool = True,
    rng=None,
) -> SoftDepthResult:
    """``sum_l p_l * estimator_l(x_l)`` with every example run through all layers."""
    L = len(layers)
    if depth_probs.shape[1] != L:
        raise PlanError(f"depth probabilities have {depth_probs.shape[1]} columns for {L} layers")
    ks = [k] * L if isinstance(k, (int, np.integer)) else list(k)
    x = x0
    per_depth: list[Tensor] = []
    results: list[LayerResult] = []
    preds: Tensor | None = None
    for l, (layer, est) in enumerate(zip(layers, estimators)):
        res = layer.forward(x, x0, ks[l], train=train, rng=rng)
        results.append(res)
        x = res.out
        y = est(x)
        per_depth.append(y)
        term = y * ag.take(depth_probs, [l], axis=1).reshape(-1)
        preds = term if preds is None else preds + term
    return SoftDepthResult(preds, per_depth, results)


def depth_histogram(depths: np.ndarray, num_depths: int) -> np.ndarray:
    depths = np.asarray(depths)
    if depths.size == 0:
        raise PlanError("depth histogram of an empty dataset")
    return np.bincount(depths - 1, minlength=num_depths)[:num_depths].astype(np.float64) / depths.size


def format_depth_table(fractions: Sequence[float]) -> str:
    """Two-row table: a ``Layer i`` header and a ``Fraction`` row in percent."""
    header = ["".ljust(10)] + [f"Layer {i + 1}".ljust(10) for i in range(len(fractions))]
    row = ["Fraction".ljust(10)] + [f"{100.0 * f:.2f}%".ljust(10) for f in fractions]
    return "\n".join(["".join(header).rstrip(), "".join(row).rstrip()])
