"""Dense-matrix helpers, a fixed xoshiro256** generator, 3x3 SVD and
central finite differences.

Matrices are plain ``float64`` numpy arrays; the helpers here only add the
shape and finiteness checks the rest of the package relies on.
"""

from __future__ import annotations

import math
from typing import Callable

import numba
import numpy as np

_MASK64 = (1 << 64) - 1


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array."""
    m = np.array(data, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"{name}: expected 2-D data, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: {a.shape} x {b.shape} not conformable")
    return a @ b


def svd3(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix: ``m = U @ diag(S) @ Vt``, S descending, >= 0."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"svd3 expects a 3x3 matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd3: non-finite input")
    u, s, vt = np.linalg.svd(m)
    return u, s, vt


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite function value at entry {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), the usual gradient-check metric."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# --------------------------------------------------------------------------
# xoshiro256** (Blackman & Vigna), seeded through splitmix64.


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << k) | (x >> (np.uint64(64) - k))


@numba.njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.size):
        s0 = s[0]
        s1 = s[1]
        s2 = s[2]
        s3 = s[3]
        out[i] = _rotl(s1 * np.uint64(5), np.uint64(7)) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, np.uint64(45))
        s[0] = s0
        s[1] = s1
        s[2] = s2
        s[3] = s3


@numba.njit(cache=True)
def _fill_unit(s, out):
    # 53 high bits -> [0, 1)
    buf = np.empty(out.size, dtype=np.uint64)
    _fill_u64(s, buf)
    for i in range(out.size):
        out[i] = np.float64(buf[i] >> np.uint64(11)) * (1.0 / 9007199254740992.0)


class Rng:
    """Deterministic xoshiro256** stream.

    Seeding fills the four state words from splitmix64(seed). Uniform reals
    use the top 53 bits; normals use Box-Muller on two uniforms (cosine
    branch only); ``choice(n)`` is ``floor(u * n)``.
    """

    def __init__(self, seed: int = 0):
        x = int(seed) & _MASK64
        words = []
        for _ in range(4):
            x, z = _splitmix64(x)
            words.append(z)
        self._s = np.array(words, dtype=np.uint64)

    @classmethod
    def from_state(cls, state) -> "Rng":
        rng = cls.__new__(cls)
        rng._s = np.array([int(w) & _MASK64 for w in state], dtype=np.uint64)
        if not np.any(rng._s):
            raise ValueError("xoshiro256** state must not be all zero")
        return rng

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(int(w) for w in self._s)

    def split(self, label) -> "Rng":
        """Child generator; depends only on the current state and ``label``.

        The parent is not advanced.
        """
        if isinstance(label, (int, np.integer)):
            lab = int(label) & _MASK64
        else:
            lab = _fnv1a64(str(label).encode("utf-8"))
        x = lab
        for w in self.state:
            x, z = _splitmix64(x ^ w)
            x = z
        return Rng(x)

    def next_u64(self) -> int:
        out = np.empty(1, dtype=np.uint64)
        _fill_u64(self._s, out)
        return int(out[0])

    def u64_array(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        _fill_u64(self._s, out)
        return out

    def random(self, shape=()) -> np.ndarray | float:
        """Uniform [0, 1) draws in C order."""
        size = int(np.prod(shape)) if shape != () else 1
        out = np.empty(size, dtype=np.float64)
        _fill_unit(self._s, out)
        if shape == ():
            return float(out[0])
        return out.reshape(shape)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, shape=()):
        if not lo < hi:
            raise ValueError(f"uniform: need lo < hi, got [{lo}, {hi})")
        u = self.random(shape)
        return lo + (hi - lo) * u

    def normal(self, mean: float = 0.0, std: float = 1.0, shape=()):
        if std < 0:
            raise ValueError("normal: std must be >= 0")
        n = int(np.prod(shape)) if shape != () else 1
        u = self.random((n, 2))
        z = np.sqrt(-2.0 * np.log(1.0 - u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        z = mean + std * z
        if shape == ():
            return float(z[0])
        return z.reshape(shape)

    def choice(self, n: int) -> int:
        if n < 1:
            raise ValueError("choice: n must be >= 1")
        return min(int(self.random() * n), n - 1)

    def choices(self, n: int, size: int) -> np.ndarray:
        if n < 1:
            raise ValueError("choices: n must be >= 1")
        return np.minimum((self.random((size,)) * n).astype(np.int64), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        u = self.random((max(n - 1, 0),))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
