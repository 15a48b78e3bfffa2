"""Dense float64 helpers and a portable seeded random generator.

Tensors are plain ``numpy.ndarray`` objects with dtype float64. The helpers
here add the shape checks and edge-case handling the rest of the package
relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, DimensionError

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

SLERP_MIN_ANGLE = 1e-6


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    x = as_tensor(x)
    if x.shape[-1] == 0:
        return x.copy()
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def lerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """``(1 - t) a + t b``; exact at ``t`` in {0, 1}."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"lerp shape mismatch: {a.shape} vs {b.shape}")
    if t == 0:
        return a.copy()
    if t == 1:
        return b.copy()
    # a + t(b - a) returns a exactly when a == b, which keeps degenerate
    # interpolations bitwise constant
    return a + t * (b - a)


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation between two tensors viewed as flat vectors.

    Falls back to :func:`lerp` when the angle between ``a`` and ``b`` is
    below ``SLERP_MIN_ANGLE``. ``t == 0`` and ``t == 1`` return exact copies
    of the endpoints.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"slerp shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.ravel())
    nb = np.linalg.norm(b.ravel())
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("slerp needs two nonzero tensors")
    if t == 0:
        return a.copy()
    if t == 1:
        return b.copy()
    cos = float(np.dot(a.ravel(), b.ravel()) / (na * nb))
    theta = float(np.arccos(np.clip(cos, -1.0, 1.0)))
    if theta < SLERP_MIN_ANGLE:
        return lerp(a, b, t)
    s = np.sin(theta)
    return (np.sin((1.0 - t) * theta) / s) * a + (np.sin(t * theta) / s) * b


def _splitmix64(states: np.ndarray) -> np.ndarray:
    z = states
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """Counter-based SplitMix64 stream.

    Output ``i`` (0-based, counted over the lifetime of the instance) is
    ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15)`` in wrapping 64-bit
    arithmetic, which is the reference SplitMix64 sequence. Normals come from
    Box-Muller on consecutive pairs of uniforms. Not thread-safe: one owner
    per instance.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + idx * _GOLDEN
            return _splitmix64(states)

    def uniform(self, size) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53 random bits each."""
        shape = _shape(size)
        n = int(np.prod(shape, dtype=np.int64))
        bits = self._raw(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def normal(self, size) -> np.ndarray:
        shape = _shape(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = radius * np.cos(angle)
        out[:, 1] = radius * np.sin(angle)
        return out.ravel()[:n].reshape(shape)

    def integers(self, high: int, size) -> np.ndarray:
        """Integers in ``[0, high)``."""
        u = self.uniform(size)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def _shape(size) -> tuple[int, ...]:
    if isinstance(size, (int, np.integer)):
        return (int(size),)
    return tuple(int(s) for s in size)


def randn(rng: SeededRng, shape) -> np.ndarray:
    return rng.normal(shape)
