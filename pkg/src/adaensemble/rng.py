"""Seeded random streams and weight initialization.

All randomness comes from numpy's PCG64 bit generator seeded through a
``SeedSequence`` built from ``(seed, crc32(stream_name))``. PCG64 output is
specified bit-for-bit by numpy, so a given seed and stream name produce the
same values on every platform.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from .autograd import Tensor


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Return an independent generator for the named sub-stream of ``seed``."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode("utf-8"))]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def glorot_uniform(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    fan_in: int | None = None,
    fan_out: int | None = None,
    name: str | None = None,
) -> Tensor:
    fan_in = shape[0] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)


def constant(shape: tuple[int, ...], value: float, name: str | None = None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)
