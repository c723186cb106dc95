"""Portable counter-based random streams.

Uniform bits come from SplitMix64 evaluated at ``seed + (counter + 1) * GAMMA``
(Steele, Lea & Flood 2014 finalizer). Standard normals use the basic
Box-Muller transform on consecutive uniform pairs:

    u1 = ((x0 >> 11) + 1) * 2**-53        in (0, 1]
    u2 = (x1 >> 11) * 2**-53              in [0, 1)
    n0 = sqrt(-2 ln u1) * cos(2 pi u2)
    n1 = sqrt(-2 ln u1) * sin(2 pi u2)

A request for ``n`` normals consumes ``2 * ceil(n / 2)`` counter slots, so the
stream only depends on the seed and the sequence of request sizes.
"""
from __future__ import annotations

import functools
import hashlib
import math

import numpy as np

from .._accel import HAVE_NUMBA, njit

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1
_TWO_M53 = 1.0 / 9007199254740992.0


def _splitmix_numpy(seed, start, count):
    idx = np.arange(1, count + 1, dtype=np.uint64) + np.uint64(start)
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + idx * GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def normals_numpy(seed, start, n):
    """Draw ``n`` standard normals starting at counter ``start``."""
    pairs = (n + 1) // 2
    bits = _splitmix_numpy(seed, start, 2 * pairs)
    u1 = ((bits[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_M53
    u2 = (bits[1::2] >> np.uint64(11)).astype(np.float64) * _TWO_M53
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]


@njit
def _splitmix_one(seed, i):
    z = seed + i * np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit
def normals_numba(seed, start, n):
    """Scalar-loop twin of :func:`normals_numpy`."""
    out = np.empty(n)
    pairs = (n + 1) // 2
    s = np.uint64(seed)
    base = np.uint64(start)
    two_pi = 2.0 * np.pi
    for p in range(pairs):
        b0 = _splitmix_one(s, base + np.uint64(2 * p + 1))
        b1 = _splitmix_one(s, base + np.uint64(2 * p + 2))
        u1 = (float(b0 >> np.uint64(11)) + 1.0) * 1.1102230246251565e-16
        u2 = float(b1 >> np.uint64(11)) * 1.1102230246251565e-16
        r = np.sqrt(-2.0 * np.log(u1))
        out[2 * p] = r * np.cos(two_pi * u2)
        if 2 * p + 1 < n:
            out[2 * p + 1] = r * np.sin(two_pi * u2)
    return out


if not HAVE_NUMBA:
    # interpreted twin: uint64 wraparound is intended, silence numpy's overflow warning
    _normals_loop = normals_numba

    @functools.wraps(_normals_loop)
    def normals_numba(seed, start, n):
        with np.errstate(over="ignore"):
            return _normals_loop(seed, start, n)


def _uniforms(seed, start, n):
    bits = _splitmix_numpy(seed, start, n)
    return (bits >> np.uint64(11)).astype(np.float64) * _TWO_M53


def derive_seed(*keys) -> int:
    """Stable 64-bit seed from arbitrary keys (blake2b of their ``repr`` joined by '|')."""
    text = "|".join(repr(k) for k in keys)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Seeded stream of uniforms and standard normals.

    >>> a, b = Rng(7), Rng(7)
    >>> bool((a.normal((3,)) == b.normal((3,))).all())
    True
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def clone(self) -> "Rng":
        return Rng(self.seed, self.counter)

    def derive(self, *keys) -> "Rng":
        """Independent child stream keyed by ``keys``; does not advance self."""
        return Rng(derive_seed(self.seed, *keys))

    def normal(self, shape) -> np.ndarray:
        shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ValueError(f"invalid shape {shape}")
        n = math.prod(shape)
        if n == 0:
            return np.zeros(shape)
        fn = normals_numba if HAVE_NUMBA else normals_numpy
        out = fn(np.uint64(self.seed), np.uint64(self.counter), n)
        self.counter += 2 * ((n + 1) // 2)
        return out.reshape(shape)

    def uniform(self, n: int) -> np.ndarray:
        out = _uniforms(self.seed, self.counter, n)
        self.counter += n
        return out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"
