"""Dense float64 helpers and a splittable, counter-based RNG.

Everything is a thin layer over numpy. Vectors and matrices are plain
``np.ndarray`` of dtype float64; the helpers here only add shape checks.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ShapeError

FLOAT = np.float64


def as_vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=FLOAT)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    return v


def as_mat(x) -> np.ndarray:
    m = np.asarray(x, dtype=FLOAT)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"expected a non-empty 2-d matrix, got shape {m.shape}")
    return m


def vec_mat(v, M) -> np.ndarray:
    """Row vector times matrix: ``result[j] = sum_i v[i] * M[i, j]``."""
    v, M = as_vec(v), as_mat(M)
    if v.shape[0] != M.shape[0]:
        raise ShapeError(f"vec_mat: len(v)={v.shape[0]} but M has {M.shape[0]} rows")
    return v @ M


def hadamard(a, b) -> np.ndarray:
    a, b = as_vec(a), as_vec(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: lengths {a.shape[0]} and {b.shape[0]} differ")
    return a * b


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


class Rng:
    """Philox-backed generator keyed by a 64-bit seed.

    ``child(*path)`` derives an independent stream from the seed and a path of
    ints or strings, so e.g. per-layer initialization does not depend on the
    order in which layers are visited.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        words = [self.seed] + [_path_word(p) for p in self.path]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, *path) -> "Rng":
        return Rng(self.seed, self.path + tuple(path))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def _path_word(p) -> int:
    if isinstance(p, str):
        return zlib.crc32(p.encode("utf-8"))
    return int(p) & 0xFFFFFFFF


def rng_normal(rng: Rng, n: int, scale: float) -> np.ndarray:
    """``n`` draws from N(0, scale**2)."""
    if n <= 0:
        raise ShapeError(f"rng_normal: n must be positive, got {n}")
    if scale < 0:
        raise ValueError(f"rng_normal: scale must be >= 0, got {scale}")
    return rng.normal(n, scale)
