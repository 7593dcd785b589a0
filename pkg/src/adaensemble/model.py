"""Embedding -> stacked sparse MoE layers -> per-depth estimators, with a depth controller."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint
from .autograd import Tensor
from .depth import (
    DepthPlan,
    Estimator,
    RoutingTrace,
    SoftDepthResult,
    depth_gate,
    dynamic_propagation,
    soft_depth_forward,
)
from .experts import ExpertConfig, ExpertConfigError, ExpertKind, make_expert
from .features import EmbeddingTable, FeaturePipeline, embed
from .rng import make_rng
from .sparse_moe import (
    AnnealSchedule,
    GateConfigError,
    GatingNetwork,
    SparseMoELayer,
    load_distribution_loss,
    load_stats,
    validate_targets,
)

W_SET = "W"
ALPHA_SET = "alpha"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_sizes: tuple[int, ...]
    embedding_dim: int = 8
    num_layers: int = 2
    experts: tuple[str, ...] = ("pin", "cross", "dense")
    layer_experts: tuple[tuple[str, ...], ...] = ()
    k_final: int = 2
    anneal_steps: int = 0
    reduction: int = 8
    gate_dim: int = 32
    jitter: float = 0.01
    tau_min: float = 0.05
    lambda1: float = 0.01
    lambda2: float = 0.01
    expert_targets: tuple[float, ...] | None = None
    depth_targets: tuple[float, ...] | None = None
    dense_hidden: int | None = None
    conv_kernel: int = 3
    conv_channels: int | None = None
    attention_heads: int = 2
    seed: int = 0

    @property
    def num_fields(self) -> int:
        return len(self.vocab_sizes)

    def experts_for(self, layer: int) -> tuple[str, ...]:
        return tuple(self.layer_experts[layer]) if self.layer_experts else tuple(self.experts)

    def expert_config(self) -> ExpertConfig:
        return ExpertConfig(self.dense_hidden, self.conv_kernel, self.conv_channels, self.attention_heads)

    def validate(self) -> ModelConfig:
        if self.num_fields < 1:
            raise ConfigError("vocab_sizes must name at least one field")
        if any(v < 0 for v in self.vocab_sizes):
            raise ConfigError("vocab sizes must be >= 0")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.layer_experts and len(self.layer_experts) != self.num_layers:
            raise ConfigError(f"layer_experts lists {len(self.layer_experts)} layers, num_layers is {self.num_layers}")
        for l in range(self.num_layers):
            kinds = self.experts_for(l)
            if not kinds:
                raise ConfigError(f"layer {l + 1} has no experts")
            for kind in kinds:
                try:
                    ExpertKind(kind)
                except ValueError:
                    raise ConfigError(
                        f"unknown expert {kind!r}; choose from {[k.value for k in ExpertKind]}"
                    ) from None
            if len(set(kinds)) != len(kinds):
                raise ConfigError(f"layer {l + 1} lists an expert kind twice: {kinds}")
            if not 1 <= self.k_final <= len(kinds):
                raise ConfigError(f"k_final={self.k_final} must lie in 1..{len(kinds)} (layer {l + 1})")
            if self.expert_targets is not None:
                try:
                    validate_targets(self.expert_targets, len(kinds))
                except GateConfigError as exc:
                    raise ConfigError(f"expert_targets: {exc}") from None
        if self.depth_targets is not None:
            try:
                validate_targets(self.depth_targets, self.num_layers)
            except GateConfigError as exc:
                raise ConfigError(f"depth_targets: {exc}") from None
        if self.anneal_steps < 0:
            raise ConfigError("anneal_steps must be >= 0")
        if self.reduction < 1 or self.gate_dim < 1:
            raise ConfigError("reduction and gate_dim must be >= 1")
        if not 0.0 <= self.jitter < 1.0:
            raise ConfigError("jitter must lie in [0, 1)")
        if self.tau_min <= 0 or self.tau_min >= 1.0:
            raise ConfigError("tau_min must lie in (0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if "attention" in {k for l in range(self.num_layers) for k in self.experts_for(l)}:
            if self.embedding_dim % self.attention_heads:
                raise ConfigError(
                    f"embedding_dim={self.embedding_dim} is not divisible by attention_heads={self.attention_heads}"
                )
        if "conv" in {k for l in range(self.num_layers) for k in self.experts_for(l)}:
            if self.conv_kernel > self.num_fields:
                raise ConfigError(f"conv_kernel={self.conv_kernel} exceeds the field count {self.num_fields}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("vocab_sizes", "experts", "expert_targets", "depth_targets"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        if "layer_experts" in kw:
            kw["layer_experts"] = tuple(tuple(x) for x in kw["layer_experts"])
        return cls(**kw)


@dataclass
class TrainOutput:
    preds: Tensor
    expert_losses: list[Tensor]
    depth_loss: Tensor
    plan: DepthPlan
    soft: SoftDepthResult
    k: int


@dataclass
class InferOutput:
    preds: np.ndarray
    depths: np.ndarray
    flops: np.ndarray
    trace: RoutingTrace | None = None


class AdaEnsembleModel:
    def __init__(self, config: ModelConfig, pipeline: FeaturePipeline | None = None) -> None:
        self.config = config.validate()
        self.pipeline = pipeline
        rng = make_rng(config.seed, "init")
        F, D, L = config.num_fields, config.embedding_dim, config.num_layers
        ecfg = config.expert_config()
        self.embedding = EmbeddingTable.init(config.vocab_sizes, D, rng)
        self.layers: list[SparseMoELayer] = []
        for l in range(L):
            try:
                experts = [make_expert(kind, F, D, rng, ecfg) for kind in config.experts_for(l)]
            except ExpertConfigError as exc:
                raise ConfigError(str(exc)) from None
            gate = GatingNetwork(F * D, len(experts), rng, config.reduction, config.gate_dim, config.jitter, config.tau_min)
            self.layers.append(SparseMoELayer(experts, gate, F, D, config.expert_targets))
        self.estimators = [Estimator(F, D, rng) for _ in range(L)]
        self.depth_gate = GatingNetwork(F * D, L, rng, config.reduction, config.gate_dim, config.jitter, config.tau_min)
        self.depth_targets = validate_targets(
            config.depth_targets if config.depth_targets is not None else [1.0 / L] * L, L
        )
        self.schedules = [AnnealSchedule(layer.num_experts, config.k_final, config.anneal_steps) for layer in self.layers]

    # -- parameters ------------------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor, str]]:
        """Every trainable tensor with its name and partition (``W`` or ``alpha``)."""
        for i, t in enumerate(self.embedding.tables):
            yield f"embed.field{i}", t, W_SET
        for l, layer in enumerate(self.layers):
            for e in layer.experts:
                for pname, t in e.params.items():
                    yield f"layer{l}.expert.{e.kind.value}.{pname}", t, W_SET
            for pname, t in layer.norm.items():
                yield f"layer{l}.norm.{pname}", t, W_SET
            for pname, t in layer.gate.params.items():
                yield f"layer{l}.gate.{pname}", t, ALPHA_SET
        for l, est in enumerate(self.estimators):
            for pname, t in est.params.items():
                yield f"estimator{l}.{pname}", t, W_SET
        for pname, t in self.depth_gate.params.items():
            yield f"depth_gate.{pname}", t, ALPHA_SET

    def parameters(self, partition: str | None = None) -> list[Tensor]:
        return [t for _, t, part in self.named_parameters() if partition is None or part == partition]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: t for name, t, _ in self.named_parameters()}
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise checkpoint.CheckpointError(f"tensor names differ: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.shape:
                raise checkpoint.CheckpointError(f"{name}: shape {value.shape} != {t.shape}")
            t.data = value.copy()

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    # -- forward passes ----------------------------------------------------------
    def embed(self, indices: np.ndarray) -> Tensor:
        return embed(indices, self.embedding)

    def k_at(self, step: int) -> int:
        return self.schedules[0](step)

    def forward_train(self, indices: np.ndarray, step: int, rng: np.random.Generator, k: int | None = None) -> TrainOutput:
        """Soft depth mixture with jitter and annealed top-k; also returns the load losses (unweighted)."""
        x0 = self.embed(indices)
        B = x0.shape[0]
        ks = [k if k is not None else s(step) for s in self.schedules]
        plan = depth_gate(x0.reshape(B, -1), self.depth_gate, train=True, rng=rng)
        soft = soft_depth_forward(x0, plan.probs, self.layers, self.estimators, ks, train=True, rng=rng)
        expert_losses = [
            load_distribution_loss(res.stats, layer.targets, 1.0) for res, layer in zip(soft.layers, self.layers)
        ]
        depth_loss = load_distribution_loss(load_stats(plan.probs), self.depth_targets, 1.0)
        return TrainOutput(soft.preds, expert_losses, depth_loss, plan, soft, ks[0])

    def plan_depths(self, x0: Tensor) -> np.ndarray:
        B = x0.shape[0]
        return depth_gate(x0.reshape(B, -1), self.depth_gate, train=False).depths

    def forward_infer(
        self,
        indices: np.ndarray,
        force_full_depth: bool = False,
        k: int | None = None,
        depths: np.ndarray | None = None,
        trace: bool = False,
    ) -> InferOutput:
        """Hard top-1 depth, hard top-k experts, no jitter.

        Per-example FLOPs cover the layers actually run (their gates and
        selected experts) plus the exit estimator; the depth gate itself is
        not counted.
        """
        with ag.no_grad():
            x0 = self.embed(indices)
            B = x0.shape[0]
            kk = self.config.k_final if k is None else k
            if depths is None:
                if force_full_depth:
                    depths = np.full(B, self.config.num_layers)
                else:
                    depths = self.plan_depths(x0)
            rt = RoutingTrace.empty(B, self.layers) if trace else None
            preds, flops = dynamic_propagation(x0, depths, self.layers, self.estimators, kk, rt)
        return InferOutput(preds.data.copy(), np.asarray(depths), flops, rt)

    def predict(self, indices: np.ndarray, batch_size: int = 4096, **kw) -> InferOutput:
        depths = kw.pop("depths", None)
        outs = [
            self.forward_infer(
                indices[i : i + batch_size], depths=None if depths is None else depths[i : i + batch_size], **kw
            )
            for i in range(0, len(indices), batch_size)
        ]
        if not outs:
            return InferOutput(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        rt = None
        if outs[0].trace is not None:
            rt = RoutingTrace(
                len(indices),
                self.config.num_layers,
                [np.concatenate([o.trace.reached[l] for o in outs]) for l in range(self.config.num_layers)],
                [np.concatenate([o.trace.support[l] for o in outs]) for l in range(self.config.num_layers)],
                [np.concatenate([o.trace.top1[l] for o in outs]) for l in range(self.config.num_layers)],
            )
        return InferOutput(
            np.concatenate([o.preds for o in outs]),
            np.concatenate([o.depths for o in outs]),
            np.concatenate([o.flops for o in outs]),
            rt,
        )

    # -- persistence -------------------------------------------------------------
    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {"config": self.config.to_dict(), "pipeline": self.pipeline.to_dict() if self.pipeline else None}
        if extra_meta:
            meta.update(extra_meta)
        checkpoint.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path: str | Path) -> AdaEnsembleModel:
        tensors, meta = checkpoint.load(path)
        try:
            config = ModelConfig.from_dict(meta["config"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise checkpoint.CorruptCheckpointError(f"checkpoint config unreadable: {exc}") from exc
        pipe = FeaturePipeline.from_dict(meta["pipeline"]) if meta.get("pipeline") else None
        model = cls(config, pipe)
        model.load_state_dict(tensors)
        return model


class EmbeddingLogistic:
    """Baseline: per-field embeddings read by one linear sigmoid head (no interactions)."""

    def __init__(self, vocab_sizes: Sequence[int], dim: int, seed: int = 0) -> None:
        rng = make_rng(seed, "baseline")
        self.embedding = EmbeddingTable.init(vocab_sizes, dim, rng)
        self.estimator = Estimator(len(vocab_sizes), dim, rng)

    def parameters(self) -> list[Tensor]:
        return list(self.embedding.tables) + list(self.estimator.params.values())

    def forward(self, indices: np.ndarray) -> Tensor:
        return self.estimator(embed(indices, self.embedding))

    def predict(self, indices: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return self.forward(indices).data.copy()
