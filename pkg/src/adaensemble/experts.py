"""Feature-interaction experts.

Every expert maps a batch of feature maps ``(B, F, D)`` to ``(B, F, D)``;
polynomial and cross experts additionally read the raw embedded input ``x0``.
None of them carries its own residual connection or normalization, the
mixture layer applies both around the ensemble.

FLOPs are multiply-adds per example from dense algebra only (matrix
products, convolutions, Hadamard products); activations, softmax and
normalization are not counted.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import constant, glorot_uniform


class ExpertKind(str, enum.Enum):
    DENSE = "dense"
    CONV = "conv"
    ATTENTION = "attention"
    PIN = "pin"
    CROSS = "cross"


class ExpertConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertConfig:
    """Dimension settings; ``None`` means the desk-scale default for the layer's F and D."""

    dense_hidden: int | None = None
    conv_kernel: int = 3
    conv_channels: int | None = None
    attention_heads: int = 2


class Expert:
    kind: ExpertKind

    def __init__(self, num_fields: int, dim: int) -> None:
        self.num_fields = num_fields
        self.dim = dim
        self.params: dict[str, Tensor] = {}
        self.calls = 0
        self.examples_seen = 0

    def __call__(self, x: Tensor, x0: Tensor) -> Tensor:
        if x.shape[1:] != (self.num_fields, self.dim):
            raise ag.DimensionError(f"{self.kind.value} expert expects (B, {self.num_fields}, {self.dim}), got {x.shape}")
        self.calls += 1
        self.examples_seen += x.shape[0]
        return self.forward(x, x0)

    def forward(self, x: Tensor, x0: Tensor) -> Tensor:
        raise NotImplementedError

    @property
    def flops(self) -> int:
        raise NotImplementedError

    def reset_counters(self) -> None:
        self.calls = 0
        self.examples_seen = 0


class DenseExpert(Expert):
    """Flatten, hidden relu layer of width H, project back to F*D."""

    kind = ExpertKind.DENSE

    def __init__(self, num_fields: int, dim: int, rng: np.random.Generator, hidden: int | None = None) -> None:
        super().__init__(num_fields, dim)
        fd = num_fields * dim
        self.hidden = hidden if hidden is not None else 4 * fd
        self.params["w1"] = glorot_uniform(rng, (fd, self.hidden))
        self.params["w2"] = glorot_uniform(rng, (self.hidden, fd))

    def forward(self, x, x0):
        B = x.shape[0]
        h = ag.relu(x.reshape(B, -1) @ self.params["w1"])
        return (h @ self.params["w2"]).reshape(B, self.num_fields, self.dim)

    @property
    def flops(self) -> int:
        return 2 * self.num_fields * self.dim * self.hidden


class ConvExpert(Expert):
    """Fields as sequence, D as channels: conv1d (same padding) -> relu -> max-pool(2, 2) -> dense."""

    kind = ExpertKind.CONV

    def __init__(
        self,
        num_fields: int,
        dim: int,
        rng: np.random.Generator,
        kernel: int = 3,
        channels: int | None = None,
    ) -> None:
        super().__init__(num_fields, dim)
        if kernel < 1:
            raise ExpertConfigError("conv kernel width must be >= 1")
        if num_fields < kernel:
            raise ExpertConfigError(f"conv kernel width {kernel} exceeds field count {num_fields}")
        self.kernel = kernel
        self.channels = channels if channels is not None else dim
        self.pooled = math.ceil(num_fields / 2)
        self.params["kernel"] = glorot_uniform(
            rng, (kernel * dim, self.channels), fan_in=kernel * dim, fan_out=kernel * self.channels
        )
        self.params["proj"] = glorot_uniform(rng, (self.pooled * self.channels, num_fields * dim))
        left = (kernel - 1) // 2
        self._pad = (left, kernel - 1 - left)
        self._windows = np.arange(num_fields)[:, None] + np.arange(kernel)[None, :]
        starts = 2 * np.arange(self.pooled)
        self._pool = np.stack([starts, np.minimum(starts + 1, num_fields - 1)], axis=1)

    def forward(self, x, x0):
        B, F, D = x.shape
        left, right = self._pad
        pieces = []
        if left:
            pieces.append(Tensor(np.zeros((B, left, D))))
        pieces.append(x)
        if right:
            pieces.append(Tensor(np.zeros((B, right, D))))
        padded = ag.concat(pieces, axis=1) if len(pieces) > 1 else x
        windows = ag.take(padded, self._windows, axis=1)  # (B, F, w, D)
        conv = ag.relu(windows.reshape(B, F, self.kernel * D) @ self.params["kernel"])  # (B, F, C)
        pooled = ag.max_(ag.take(conv, self._pool, axis=1), axis=2)  # (B, P, C)
        out = pooled.reshape(B, self.pooled * self.channels) @ self.params["proj"]
        return out.reshape(B, F, D)

    @property
    def flops(self) -> int:
        F, D, C = self.num_fields, self.dim, self.channels
        return F * self.kernel * D * C + self.pooled * C * F * D


class AttentionExpert(Expert):
    """Multi-head self-attention over field tokens, then a token-wise dense projection."""

    kind = ExpertKind.ATTENTION

    def __init__(self, num_fields: int, dim: int, rng: np.random.Generator, heads: int = 2) -> None:
        super().__init__(num_fields, dim)
        if heads < 1 or dim % heads:
            raise ExpertConfigError(f"embedding dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        for name in ("wq", "wk", "wv", "wo", "proj"):
            self.params[name] = glorot_uniform(rng, (dim, dim))
        self.last_attention: np.ndarray | None = None

    def _split(self, t: Tensor) -> Tensor:
        B, F, D = t.shape
        return ag.transpose(t.reshape(B, F, self.heads, D // self.heads), (0, 2, 1, 3))

    def forward(self, x, x0):
        B, F, D = x.shape
        dk = D // self.heads
        q = self._split(x @ self.params["wq"])
        k = self._split(x @ self.params["wk"])
        v = self._split(x @ self.params["wv"])
        scores = (q @ ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
        attn = ag.softmax(scores, axis=-1)
        self.last_attention = attn.data
        heads = ag.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, F, D)
        return (heads @ self.params["wo"]) @ self.params["proj"]

    @property
    def flops(self) -> int:
        F, D = self.num_fields, self.dim
        return 5 * F * D * D + 2 * F * F * D


class PINExpert(Expert):
    """``x * (W @ x0)`` with a field-mixing kernel ``W`` of shape F x F."""

    kind = ExpertKind.PIN

    def __init__(self, num_fields: int, dim: int, rng: np.random.Generator) -> None:
        super().__init__(num_fields, dim)
        self.params["w"] = glorot_uniform(rng, (num_fields, num_fields))

    def forward(self, x, x0):
        return ag.hadamard(x, ag.matmul(self.params["w"], x0))

    @property
    def flops(self) -> int:
        F, D = self.num_fields, self.dim
        return F * F * D + F * D


class CrossExpert(Expert):
    """``x0 * (W @ x) + b`` with ``W`` of shape F x F and a full F x D bias."""

    kind = ExpertKind.CROSS

    def __init__(self, num_fields: int, dim: int, rng: np.random.Generator) -> None:
        super().__init__(num_fields, dim)
        self.params["w"] = glorot_uniform(rng, (num_fields, num_fields))
        self.params["b"] = constant((num_fields, dim), 0.0)

    def forward(self, x, x0):
        return ag.hadamard(x0, ag.matmul(self.params["w"], x)) + self.params["b"]

    @property
    def flops(self) -> int:
        F, D = self.num_fields, self.dim
        return F * F * D + F * D


def make_expert(
    kind: ExpertKind | str, num_fields: int, dim: int, rng: np.random.Generator, cfg: ExpertConfig | None = None
) -> Expert:
    kind = ExpertKind(kind)
    cfg = cfg or ExpertConfig()
    if kind is ExpertKind.DENSE:
        return DenseExpert(num_fields, dim, rng, cfg.dense_hidden)
    if kind is ExpertKind.CONV:
        return ConvExpert(num_fields, dim, rng, cfg.conv_kernel, cfg.conv_channels)
    if kind is ExpertKind.ATTENTION:
        return AttentionExpert(num_fields, dim, rng, cfg.attention_heads)
    if kind is ExpertKind.PIN:
        return PINExpert(num_fields, dim, rng)
    return CrossExpert(num_fields, dim, rng)


def expert_flops(kind: ExpertKind | str, num_fields: int, dim: int, cfg: ExpertConfig | None = None) -> int:
    """Per-example multiply-adds of an expert, from its dimensions alone."""
    kind = ExpertKind(kind)
    cfg = cfg or ExpertConfig()
    F, D = num_fields, dim
    if kind is ExpertKind.DENSE:
        H = cfg.dense_hidden if cfg.dense_hidden is not None else 4 * F * D
        return 2 * F * D * H
    if kind is ExpertKind.CONV:
        C = cfg.conv_channels if cfg.conv_channels is not None else D
        return F * cfg.conv_kernel * D * C + math.ceil(F / 2) * C * F * D
    if kind is ExpertKind.ATTENTION:
        return 5 * F * D * D + 2 * F * F * D
    return F * F * D + F * D
