"""Counter-based keyed random streams.

Every draw is a pure function of a 64-bit key and an integer counter, so
results do not depend on the order in which samples are generated.  Keys are
derived by hashing a seed together with a path of labels and integers, e.g.
``Stream(seed).child("wiener", epoch)``.
"""

from __future__ import annotations

import zlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_COMBINE = np.uint64(0xD6E8FEB86659FD93)
_MASK = (1 << 64) - 1


def _mix(z):
    # splitmix64 finalizer; uint64 arithmetic wraps modulo 2**64
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _label(value) -> int:
    if isinstance(value, str):
        return zlib.crc32(value.encode()) | (1 << 40)
    return int(value) & _MASK


def _combine(key, value):
    with np.errstate(over="ignore"):
        return _mix(np.asarray(key, dtype=np.uint64) ^ (np.asarray(value, dtype=np.uint64) * _COMBINE))


def derive_key(seed: int, *path) -> int:
    key = _mix(np.uint64(int(seed) & _MASK))
    for part in path:
        key = _combine(key, np.uint64(_label(part)))
    return int(key)


def hash_bits(key: int, *counters) -> np.ndarray:
    """64 random bits per element of the broadcast counter arrays."""
    h = np.uint64(key)
    for c in counters:
        h = _combine(h, np.asarray(c, dtype=np.int64).astype(np.uint64))
    return np.asarray(h, dtype=np.uint64)


def uniform_from_bits(bits: np.ndarray) -> np.ndarray:
    # 52 bits shifted half a step: both ends stay exactly representable inside (0, 1)
    return ((bits >> np.uint64(12)).astype(np.float64) + 0.5) * 2.0**-52


class Stream:
    """A node in a tree of independent keyed streams."""

    def __init__(self, seed: int, *path):
        self.seed = int(seed)
        self.path = tuple(path)
        self.key = derive_key(self.seed, *self.path)

    def child(self, *path) -> "Stream":
        return Stream(self.seed, *self.path, *path)

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, path={self.path!r})"

    def uniform_at(self, *counters) -> np.ndarray:
        return uniform_from_bits(hash_bits(self.key, *counters))

    def normal_at(self, *counters) -> np.ndarray:
        """Standard normals indexed by counters (Box-Muller on two sub-draws)."""
        u1 = uniform_from_bits(hash_bits(self.key, *counters, 0))
        u2 = uniform_from_bits(hash_bits(self.key, *counters, 1))
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def uniform(self, shape) -> np.ndarray:
        return self.uniform_at(*_grid(shape))

    def normal(self, shape) -> np.ndarray:
        return self.normal_at(*_grid(shape))

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")


def _grid(shape) -> list[np.ndarray]:
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    return list(np.indices(shape, dtype=np.int64)) if shape else [np.zeros((), np.int64)]
