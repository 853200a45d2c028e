"""Small numeric kernel shared by the rest of the package.

Vectors and matrices are plain float64 numpy arrays; the helpers here only
validate shapes/finiteness and give the handful of reductions a single home.
Randomness goes through :class:`Rng`, a Philox (counter-based) generator, so a
seed produces the same stream on every platform.
"""

import math
import zlib

import numpy as np

from .errors import DimensionError, EmptyInputError


def as_vector(x, name="vector"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v


def as_matrix(x, name="matrix"):
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    return m


def dot(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"dot: length mismatch {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def l2_norm(a):
    return math.sqrt(dot(a, a))


def matvec(m, v):
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec: cannot multiply {m.shape} by {v.shape}")
    return m @ v


def mean_std(xs):
    """Mean and population (1/n) standard deviation."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyInputError("mean_std of empty input")
    mean = float(np.mean(x))
    std = float(np.sqrt(np.mean((x - mean) ** 2)))
    return mean, std


class Rng:
    """Seeded Philox stream. Single owner; use :meth:`spawn` to split per stage."""

    def __init__(self, seed):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(seed))

    def spawn(self, label):
        """Independent child stream keyed by ``label``; does not advance this one."""
        child = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32,
                                        zlib.crc32(str(label).encode())])
        return Rng(int(child.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, size):
        return self._gen.standard_normal(size)

    def uniform(self, low, high, size):
        return self._gen.uniform(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)


def gaussian_sample(rng, n):
    if n < 1:
        raise ValueError(f"gaussian_sample needs n >= 1, got {n}")
    return rng.normal(int(n))
