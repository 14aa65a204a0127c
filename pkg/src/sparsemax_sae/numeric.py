"""Dense float64 arrays and seeded randomness shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64, row-major, with
the batch as the leading dimension.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def as_matrix(a, name: str = "array") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
        raise NumericError(f"{name} contains {bad} non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with a shape check that names both operands."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}: "
            f"inner dimensions {a.shape[1]} and {b.shape[0]} differ"
        )
    return a @ b


class Rng:
    """Seeded generator (PCG64), reproducible across platforms for a given seed."""

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream; the same (seed, stream) pair always gives the same child."""
        child_seed = np.random.SeedSequence([self.seed, int(stream)]).generate_state(1, np.uint64)[0]
        return Rng(int(child_seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, lo: float, hi: float, shape) -> np.ndarray:
        return self._gen.uniform(lo, hi, shape)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)


def randn(rng: Rng, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if rows < 0 or cols < 0:
        raise ShapeError(f"negative shape {rows}x{cols}")
    return rng.normal((rows, cols)) * scale


def unit_columns(a: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(a, axis=0, keepdims=True)
    return a / np.maximum(norms, eps)
