"""Deterministic named-stream random numbers.

Every random value in the package flows from a 64-bit master seed through a
named stream. A stream is a counter-based splitmix64 sequence whose starting
state is derived from (seed, name), so adding a new parameter or synthetic
input never shifts the values of existing ones, and regeneration is
bit-identical across runs.
"""

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

# chunk size for bulk generation, keeps uint64 temporaries small
_CHUNK = 1 << 23


def _mix64(z: int) -> int:
    """Scalar splitmix64 finalizer."""
    z &= 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over a uint64 array (in place)."""
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _MIX1
        z ^= z >> np.uint64(27)
        z *= _MIX2
        z ^= z >> np.uint64(31)
    return z


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class StreamRng:
    """Collection of independent, reproducible streams under one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream_state(self, name: str) -> int:
        """Starting state for the stream `name`; stable in seed and name."""
        return _mix64(_mix64(self.seed ^ _fnv1a64(name)) + _GOLDEN)

    def raw(self, name: str, count: int, offset: int = 0) -> np.ndarray:
        """`count` raw uint64 draws from the stream, starting at `offset`."""
        base = self.stream_state(name)
        out = np.empty(count, dtype=np.uint64)
        for lo in range(0, count, _CHUNK):
            hi = min(lo + _CHUNK, count)
            idx = np.arange(offset + lo + 1, offset + hi + 1, dtype=np.uint64)
            with np.errstate(over="ignore"):
                z = np.uint64(base) + idx * np.uint64(_GOLDEN)
            out[lo:hi] = _mix64_array(z)
        return out

    def uniform(self, name, shape, low=0.0, high=1.0, dtype=np.float64):
        """Uniform values in [low, high) with the given shape."""
        count = int(np.prod(shape)) if np.ndim(shape) else int(shape)
        out = np.empty(count, dtype=dtype)
        span = high - low
        for lo in range(0, count, _CHUNK):
            hi = min(lo + _CHUNK, count)
            bits = self.raw(name, hi - lo, offset=lo)
            u = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
            out[lo:hi] = (low + span * u).astype(dtype, copy=False)
        return out.reshape(shape)

    def normal(self, name, shape, dtype=np.float64):
        """Standard normal values via Box-Muller on the uniform stream."""
        count = int(np.prod(shape)) if np.ndim(shape) else int(shape)
        pairs = (count + 1) // 2
        bits = self.raw(name, 2 * pairs)
        u = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        # shift u1 away from zero so log() is finite
        u1 = u[:pairs] + 2.0 ** -53
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        vals = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        return vals.astype(dtype, copy=False).reshape(shape)
