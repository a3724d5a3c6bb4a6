"""Seeded parameter initialization."""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def layer_rng(seed: int, *path) -> np.random.Generator:
    """Generator for one layer, split deterministically from the run seed.

    ``path`` may mix ints and strings, e.g. ``layer_rng(7, "step", 3, "conv1.weight")``.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_part(p) for p in path))
    return np.random.default_rng(ss)


def fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) < 2:
        raise ShapeError(f"fan computation needs at least 2 dims, got shape {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_bound(shape: tuple[int, ...]) -> float:
    fan_in, fan_out = fans(shape)
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(weight: Tensor, rng_seed) -> Tensor:
    """Fill ``weight`` in place with U(-a, a), a = sqrt(6 / (fan_in + fan_out)).

    ``rng_seed`` is an int or a ready :class:`numpy.random.Generator`.
    """
    a = xavier_bound(weight.shape)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    weight.data = rng.uniform(-a, a, size=weight.shape).astype(weight.dtype)
    return weight
