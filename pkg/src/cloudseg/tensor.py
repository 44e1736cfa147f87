"""Rank-4 tensor conventions and seeded random fills.

Every feature map in this package is a plain ``numpy.ndarray`` with shape
``(n, c, h, w)`` (batch, channels, rows, cols) in C (row-major) order.
``Tensor4`` is just an alias used in signatures to flag that convention.

Randomness: all seeded draws go through PCG64 (numpy's documented 64-bit
generator) and normals are produced with the Box-Muller transform on PCG64
uniforms. That keeps every random fill bit-reproducible for a given seed,
independent of numpy's own normal-sampling algorithm.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, ShapeError

Tensor4 = np.ndarray

DEFAULT_DTYPE = np.float32


def _check_dims(n: int, c: int, h: int, w: int) -> None:
    for name, d in (("n", n), ("c", c), ("h", h), ("w", w)):
        if int(d) != d or d < 1:
            raise ShapeError(f"dimension {name}={d} must be a positive integer")


def create(n: int, c: int, h: int, w: int, fill, dtype=DEFAULT_DTYPE) -> Tensor4:
    """Build an (n, c, h, w) tensor from a scalar or a flat row-major list.

    A scalar fill is replicated; a sequence must have exactly n*c*h*w
    elements and is laid out in row-major (n, c, h, w) order.
    """
    _check_dims(n, c, h, w)
    size = n * c * h * w
    if np.isscalar(fill):
        data = np.full(size, fill, dtype=dtype)
    else:
        data = np.asarray(fill, dtype=dtype).ravel()
        if data.size != size:
            raise ShapeError(
                f"fill has {data.size} elements, shape ({n},{c},{h},{w}) needs {size}"
            )
    if not np.all(np.isfinite(data)):
        raise ArgumentError("fill contains non-finite values")
    return data.reshape(n, c, h, w)


def seeded_normal(
    n: int, c: int, h: int, w: int, mean: float, stddev: float, seed: int,
    dtype=DEFAULT_DTYPE,
) -> Tensor4:
    """Deterministic normal fill: PCG64 uniforms through Box-Muller."""
    _check_dims(n, c, h, w)
    if stddev < 0:
        raise ArgumentError(f"stddev must be >= 0, got {stddev}")
    size = n * c * h * w
    draws = normal_draws(size, seed)
    return (mean + stddev * draws).astype(dtype).reshape(n, c, h, w)


def normal_draws(size: int, seed: int) -> np.ndarray:
    """``size`` standard-normal float64 draws, Box-Muller over PCG64."""
    rng = np.random.Generator(np.random.PCG64(seed))
    pairs = (size + 1) // 2
    # u1 in (0, 1]: shift the half-open [0, 1) draw away from log(0)
    u1 = 1.0 - rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(2.0 * np.pi * u2)
    z[1::2] = radius * np.sin(2.0 * np.pi * u2)
    return z[:size]


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    """Elementwise sum of two identically shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return a + b


def concat_channels(tensors) -> Tensor4:
    """Stack tensors along the channel axis, preserving argument order."""
    tensors = list(tensors)
    if not tensors:
        raise ArgumentError("concat_channels needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (
            first.shape[0], first.shape[2], first.shape[3],
        ):
            raise ShapeError(
                f"concat_channels: spatial/batch mismatch {t.shape} vs {first.shape}"
            )
    if len(tensors) == 1:
        return first
    return np.concatenate(tensors, axis=1)
