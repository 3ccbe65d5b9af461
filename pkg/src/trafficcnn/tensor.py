"""Dense arrays and seeded randomness.

Tensors are plain row-major ``numpy.ndarray`` objects of rank 0-4 in one of
two precisions: float32 for training weights and activations, float64 for
gradient checking.  The helpers here add the shape validation the rest of
the package relies on.

The random generator is numpy's PCG64 (a permuted congruential generator).
Child streams come from ``numpy.random.SeedSequence`` spawn keys, so
``Rng(seed).child(k)`` is fully determined by ``(seed, k)``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

SINGLE = np.float32
DOUBLE = np.float64


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) > 4:
        raise ShapeError(f"rank {len(dims)} exceeds 4")
    for d in dims:
        if d < 1:
            raise ShapeError(f"dimension must be >= 1, got {dims}")
    return dims


def tensor_full(dims: Sequence[int], value: float, dtype=SINGLE) -> np.ndarray:
    return np.full(_check_dims(dims), value, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    return a @ b


ELEMENTWISE: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda x: np.maximum(x, 0),
    "tanh": np.tanh,
    "exp": np.exp,
    "neg": np.negative,
    "square": np.square,
    "abs": np.abs,
    "identity": lambda x: x.copy(),
}


def map_elementwise(t: np.ndarray, f: str) -> np.ndarray:
    try:
        fn = ELEMENTWISE[f]
    except KeyError:
        raise ValueError(f"unknown elementwise function {f!r}") from None
    return fn(t)


def reduce_sum(t: np.ndarray, axis: int | None = None) -> np.ndarray:
    return np.sum(t, axis=axis)


def reduce_max(t: np.ndarray, axis: int | None = None) -> np.ndarray:
    return np.max(t, axis=axis)


def reshape(t: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims, dtype=np.int64)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {dims}")
    return np.reshape(t, dims, order="C")


class Rng:
    """Seeded PCG64 generator with deterministic child streams."""

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def seed(self) -> int:
        return int(self._seq.entropy)

    def child(self, *keys: int) -> "Rng":
        """Independent stream addressed by ``keys``; independent of draws made so far."""
        seq = np.random.SeedSequence(
            self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + tuple(int(k) for k in keys)
        )
        return Rng(seq)

    def normal(self, dims: Sequence[int], mean: float = 0.0, std: float = 1.0,
               dtype=SINGLE) -> np.ndarray:
        return rng_normal(self, dims, mean, std, dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def random(self, size=None):
        return self.generator.random(size)


def rng_normal(rng: Rng, dims: Sequence[int], mean: float = 0.0, std: float = 1.0,
               dtype=SINGLE) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    dims = _check_dims(dims)
    z = rng.generator.standard_normal(dims, dtype=np.dtype(dtype).type)
    if std == 0:
        return np.full(dims, mean, dtype=dtype)
    out = z * dtype(std)
    out += dtype(mean)
    return out
