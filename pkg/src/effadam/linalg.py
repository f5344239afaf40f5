"""Dense vector helpers and reproducible random streams.

Vectors are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here only add the validation the rest of the package relies on (finite
entries, matching dimensions).

Random streams use numpy's PCG64 bit generator. Gaussian draws go through
``Generator.standard_normal``, which is numpy's ziggurat transform. For a
fixed numpy release the scalar sequence for a given seed is identical on
every platform.
"""

from __future__ import annotations

import numpy as np

PRNG_ALGORITHM = "PCG64+ziggurat"


def as_vector(x, *, name: str = "x") -> np.ndarray:
    """Return ``x`` as a 1-D float64 array, rejecting NaN/Inf and empty input."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def check_finite(x: np.ndarray, *, name: str = "x") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite entries")


def norm2(x) -> float:
    """Euclidean norm, scaled by max |x_i| so tiny and huge entries neither underflow nor overflow."""
    x = as_vector(x)
    scale = float(np.max(np.abs(x)))
    if scale == 0.0:
        return 0.0
    return scale * float(np.linalg.norm(x / scale))


def norm_inf(x) -> float:
    return float(np.max(np.abs(as_vector(x))))


def matvec(A, x) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    x = as_vector(x)
    if A.ndim != 2 or A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {A.shape} vs vector {x.shape}")
    return A @ x


def axpy(a: float, x, y) -> np.ndarray:
    """Return ``a*x + y``."""
    x = as_vector(x, name="x")
    y = as_vector(y, name="y")
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return a * x + y


class RandomStream:
    """Seeded source of uniform and Gaussian draws.

    ``child(*key)`` derives an independent stream from the same seed, so
    callers can hand separate streams to separate consumers (noise,
    stochastic rounding) without the draw order of one affecting the other.
    """

    algorithm = PRNG_ALGORITHM

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *key: int) -> "RandomStream":
        return RandomStream(self.seed, self.key + tuple(key))

    def gaussian(self, shape, mean: float = 0.0, variance: float = 1.0) -> np.ndarray:
        if variance < 0:
            raise ValueError("variance must be non-negative")
        z = self._gen.standard_normal(shape)
        return mean + np.sqrt(variance) * z

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(shape)

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, key={self.key})"


def gaussian_vector(stream: RandomStream, dim: int, mean: float = 0.0, variance: float = 1.0) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be positive")
    return stream.gaussian(dim, mean, variance)
