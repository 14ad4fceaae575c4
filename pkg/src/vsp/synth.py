"""Synthetic patch-feature grids for tests, demos and benchmarks."""

import numpy as np

from .rng import StreamRng
from .tensor import Tensor, TensorError

KINDS = ("noise", "gradient", "checker", "constant")


def gen_synthetic_features(kind, grid, channels, seed=0, value=1.0,
                           dtype=np.float64):
    """Deterministic (G, G, C) grid of the requested kind.

    noise: standard normal per element; gradient: linear ramp in row + col,
    scaled to [0, 1]; checker: alternating +1/-1 tiles; constant: every
    element equals `value`. The same kind, dims and seed always reproduce
    the identical grid.
    """
    g, c = int(grid), int(channels)
    if g < 1 or c < 1:
        raise TensorError("grid and channels must be positive")
    if kind == "noise":
        rng = StreamRng(seed)
        arr = rng.normal(f"synth.noise.g{g}.c{c}", (g, g, c), dtype=dtype)
    elif kind == "gradient":
        ramp = np.add.outer(np.arange(g), np.arange(g)).astype(dtype)
        if g > 1:
            ramp /= 2 * (g - 1)
        arr = np.repeat(ramp[:, :, None], c, axis=2)
    elif kind == "checker":
        tiles = np.add.outer(np.arange(g), np.arange(g)) % 2
        plane = np.where(tiles == 0, 1.0, -1.0).astype(dtype)
        arr = np.repeat(plane[:, :, None], c, axis=2)
    elif kind == "constant":
        arr = np.full((g, g, c), value, dtype=dtype)
    else:
        raise TensorError(f"unknown synthetic kind {kind!r}; pick one of {KINDS}")
    return Tensor(arr)
