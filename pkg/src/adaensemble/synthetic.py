"""Categorical CTR-like data with planted feature interactions.

Each field has ``levels`` categories and every category owns a latent vector.
The latent vectors are centered across each field's levels, so under uniform
sampling a multiplicative interaction contributes nothing to any single
field's marginal effect: a model without interactions cannot see it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import make_rng

MULTIPLICATIVE = "multiplicative"
ADDITIVE = "additive"


@dataclass(frozen=True)
class Interaction:
    fields: tuple[int, ...]
    kind: str = MULTIPLICATIVE
    coefficient: float = 1.0


@dataclass(frozen=True)
class SyntheticSpec:
    num_fields: int = 6
    levels: int = 12
    latent_dim: int = 4
    interactions: tuple[Interaction, ...] = (
        Interaction((0, 1), MULTIPLICATIVE, 2.0),
        Interaction((2, 3), MULTIPLICATIVE, 2.0),
        Interaction((4, 5), MULTIPLICATIVE, 2.0),
    )
    label_noise: float = 0.0
    bias: float = 0.0
    num_examples: int = 10_000
    seed: int = 0

    def __post_init__(self) -> None:
        for it in self.interactions:
            if it.kind not in (MULTIPLICATIVE, ADDITIVE):
                raise ValueError(f"unknown interaction kind {it.kind!r}")
            if not it.fields or any(not 0 <= f < self.num_fields for f in it.fields):
                raise ValueError(f"interaction fields {it.fields} out of range")


@dataclass
class SyntheticData:
    levels: np.ndarray  # (n, F) category ids
    labels: np.ndarray  # (n,)
    logits: np.ndarray  # (n,) noise-free ground truth
    latents: list[np.ndarray] = field(repr=False, default_factory=list)

    def __len__(self) -> int:
        return self.labels.size

    def records(self) -> list[list[str]]:
        return [[str(v) for v in row] for row in self.levels]

    def split(self, sizes: Sequence[int]) -> list[SyntheticData]:
        out, start = [], 0
        for n in sizes:
            sl = slice(start, start + n)
            out.append(SyntheticData(self.levels[sl], self.labels[sl], self.logits[sl], self.latents))
            start += n
        return out


def true_logits(levels: np.ndarray, latents: Sequence[np.ndarray], spec: SyntheticSpec) -> np.ndarray:
    logit = np.full(levels.shape[0], spec.bias, dtype=np.float64)
    scale = 1.0 / np.sqrt(spec.latent_dim)
    for it in spec.interactions:
        vecs = [latents[f][levels[:, f]] for f in it.fields]
        if it.kind == MULTIPLICATIVE:
            prod = np.ones_like(vecs[0])
            for v in vecs:
                prod = prod * v
            logit += it.coefficient * scale * prod.sum(axis=1)
        else:
            logit += it.coefficient * sum(v[:, 0] for v in vecs)
    return logit


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> SyntheticData:
    """Sample a labeled dataset; ``spec.seed`` fixes everything when ``rng`` is omitted."""
    rng = rng if rng is not None else make_rng(spec.seed, "synthetic")
    latents = []
    for _ in range(spec.num_fields):
        u = rng.standard_normal((spec.levels, spec.latent_dim))
        latents.append(u - u.mean(axis=0, keepdims=True))
    levels = rng.integers(0, spec.levels, size=(spec.num_examples, spec.num_fields))
    logits = true_logits(levels, latents, spec)
    noisy = logits + spec.label_noise * rng.standard_normal(spec.num_examples)
    probs = 1.0 / (1.0 + np.exp(-noisy))
    labels = (rng.random(spec.num_examples) < probs).astype(np.float64)
    return SyntheticData(levels, labels, logits, latents)
