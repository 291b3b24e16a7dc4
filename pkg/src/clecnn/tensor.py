"""Dense arrays, seeded random streams and weight initialisation.

Tensors are plain C-ordered numpy arrays (row-major, last index fastest).
float32 is the working precision; float64 is used by the gradient checks.
"""
from math import prod, sqrt

import numpy as np

from .errors import ConfigError

Tensor = np.ndarray

DTYPE = np.float32

# Independent random streams; a (seed, stream) pair fully determines a sequence.
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_DROPOUT = 2
STREAM_BATCH = 3
STREAM_SPLIT = 4


def make_rng(seed, stream=STREAM_INIT, *extra):
    """Counter-based (Philox) generator keyed on ``(seed, stream, *extra)``.

    ``extra`` integers (fold id, patient index, ...) derive independent
    sub-streams without consuming draws from a shared generator.
    """
    key = [int(seed), int(stream), *(int(e) for e in extra)]
    if any(k < 0 for k in key):
        raise ConfigError("seed, stream and sub-stream ids must be non-negative integers")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def index_of(coords, shape):
    """Row-major flat index of ``coords`` inside ``shape``."""
    if len(coords) != len(shape):
        raise IndexError(f"expected {len(shape)} coordinates, got {len(coords)}")
    flat = 0
    for axis, (c, n) in enumerate(zip(coords, shape)):
        if not 0 <= c < n:
            raise IndexError(f"coordinate {c} out of bounds for axis {axis} with extent {n}")
        flat = flat * n + c
    return flat


def coords_of(index, shape):
    size = prod(shape)
    if not 0 <= index < size:
        raise IndexError(f"flat index {index} out of bounds for size {size}")
    coords = []
    for n in reversed(shape):
        index, c = divmod(index, n)
        coords.append(c)
    return tuple(reversed(coords))


def fans(shape):
    """(fan_in, fan_out) for conv (out, in, kh, kw) and dense (in, out) weights."""
    shape = tuple(shape)
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = prod(shape[2:])
    return shape[1] * receptive, shape[0] * receptive


def init_weights(shape, scheme="uniform_scaled", rng=None, *, sigma=0.01, value=0.0, dtype=DTYPE):
    """Fill a new tensor according to ``scheme``.

    ``uniform_scaled`` draws from U(-b, b) with b = sqrt(6 / (fan_in + fan_out));
    ``gaussian`` draws N(0, sigma^2); ``constant`` fills with ``value``.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ConfigError(f"invalid weight shape {shape}")
    if scheme == "constant":
        return np.full(shape, value, dtype=dtype)
    if rng is None:
        raise ConfigError(f"scheme {scheme!r} needs a random generator")
    if scheme == "gaussian":
        if not sigma > 0:
            raise ConfigError(f"gaussian sigma must be positive, got {sigma}")
        return (rng.standard_normal(shape) * sigma).astype(dtype)
    if scheme == "uniform_scaled":
        fan_in, fan_out = fans(shape)
        bound = sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    raise ConfigError(f"unknown init scheme {scheme!r}")
