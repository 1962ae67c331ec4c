"""Dense float64 helpers with canonically ordered reductions.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  Every
reduction in the package goes through :func:`ordered_sum`, which adds terms
strictly in ascending index order (``np.add.accumulate`` is sequential), so
results are bitwise reproducible and match a naive scalar loop exactly.

Random numbers come from SplitMix64 (Steele, Lea & Flood, 2014), a counter
based 64-bit generator.  Output ``i`` (``i = 1, 2, ...``) for seed ``s`` is
``mix(s + i * 0x9E3779B97F4A7C15)`` taken modulo 2**64, where ``mix`` is the
standard SplitMix64 finalizer.  Doubles use the top 53 bits:
``(x >> 11) * 2**-53``.  The stream depends only on integer arithmetic, so
the same seed gives the same values on every platform.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Operand shapes do not conform."""


def as_mat(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def ordered_sum(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along ``axis`` adding terms in ascending index order."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[axis] == 0:
        shape = list(a.shape)
        del shape[axis]
        return np.zeros(shape)
    # +0.0 normalises a lone -0.0 term the same way a loop starting at 0.0 would
    return np.take(np.add.accumulate(a, axis=axis), -1, axis=axis) + 0.0


def matmul(a, b) -> np.ndarray:
    a = as_mat(a, "left operand")
    b = as_mat(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return ordered_sum(a[:, :, None] * b[None, :, :], axis=1)


def rowsum(a) -> np.ndarray:
    """Row sums as a rows x 1 matrix."""
    a = as_mat(a)
    return ordered_sum(a, axis=1)[:, None]


def colsum(a) -> np.ndarray:
    """Column sums as a 1 x cols matrix."""
    a = as_mat(a)
    return ordered_sum(a, axis=0)[None, :]


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    _check_same(a, b, "add")
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    _check_same(a, b, "sub")
    return a - b


def hadamard(a, b) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    _check_same(a, b, "hadamard")
    return a * b


def scale(a, alpha: float) -> np.ndarray:
    return as_mat(a) * float(alpha)


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_mat(a).T)


def sqnorm_rows(a) -> np.ndarray:
    """Squared L2 norm of every row, as a flat array of length ``rows``."""
    a = as_mat(a)
    return ordered_sum(a * a, axis=1)


def splitmix64_mix(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *tags) -> int:
    """Deterministically derive a child seed from ``seed`` and integer/str tags."""
    z = int(seed) & _MASK64
    for tag in tags:
        if isinstance(tag, str):
            t = 0
            for byte in tag.encode("utf-8"):
                t = (t * 131 + byte) & _MASK64
        else:
            t = int(tag) & _MASK64
        z = int(splitmix64_mix(np.array([((z ^ t) + 0x9E3779B97F4A7C15) & _MASK64], dtype=np.uint64))[0])
    return z


class Rng:
    """SplitMix64 stream.  Draws advance an internal counter."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return splitmix64_mix(np.uint64(self.seed) + idx * GOLDEN_GAMMA)

    def random(self, shape) -> np.ndarray:
        """Uniform doubles in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        x = self.next_u64(n) >> np.uint64(11)
        return (x.astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform(self, lo: float, hi: float, shape) -> np.ndarray:
        u = self.random(shape)
        out = lo + (hi - lo) * u
        return np.minimum(out, np.nextafter(hi, lo))

    def normal(self, shape) -> np.ndarray:
        # Box-Muller, cosine branch only
        n = int(np.prod(shape, dtype=np.int64))
        u = self.random((2, n))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        return (r * np.cos(2.0 * np.pi * u[1])).reshape(shape)

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """``n`` integers uniform in [lo, hi)."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        u = self.random((n,))
        return lo + np.minimum(np.floor(u * (hi - lo)).astype(np.int64), hi - lo - 1)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")


def seeded_uniform(rows: int, cols: int, lo: float, hi: float, seed: int) -> np.ndarray:
    """rows x cols matrix uniform in [lo, hi), filled row-major from SplitMix64(seed)."""
    if not lo < hi:
        raise ValueError(f"seeded_uniform requires lo < hi, got lo={lo}, hi={hi}")
    return Rng(seed).uniform(lo, hi, (rows, cols))
