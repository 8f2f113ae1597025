"""Dense float64 tensor helpers and a deterministic random source.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64``.  The
helpers here add the shape discipline the rest of the package relies on:
only scalar and per-row broadcasting are accepted.

The random source is SplitMix64 with Box-Muller Gaussians so that a
``(seed, stream_id)`` pair always yields the same bits on every platform.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "RandomSource",
    "as_tensor",
    "gaussian_vector",
    "l2_norm",
    "add",
    "scale",
    "matmul",
    "row_softmax",
]

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_STREAM_MULT = 0xD1B54A32D192ED03


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinite value reached an operation that forbids it."""


def as_tensor(x, *, finite: bool = False) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if finite and not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64, matching the scalar version
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class RandomSource:
    """SplitMix64 generator keyed by ``(seed, stream_id)``.

    Distinct stream ids give statistically independent sequences from the
    same master seed.  A source is single-owner: hand each consumer its own
    stream via :meth:`stream`.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.state = _mix64(_mix64(self.seed & _MASK64) ^ ((self.stream_id * _STREAM_MULT + 1) & _MASK64))

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, stream_id={self.stream_id})"

    def stream(self, stream_id: int) -> "RandomSource":
        """Fresh source on the same master seed with another stream id."""
        return RandomSource(self.seed, stream_id)

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            out = _mix64_array(states)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """``n`` doubles in ``[low, high)`` built from the top 53 bits."""
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        if low == 0.0 and high == 1.0:
            return u
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via the basic Box-Muller transform.

        Always consumes ``2 * ceil(n / 2)`` uniforms; the spare value of an
        odd request is discarded.
        """
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # in (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)``."""
        if size > n:
            raise ValueError("cannot choose more items than available")
        return self.permutation(n)[:size]


def gaussian_vector(rng: RandomSource, n: int, sigma: float) -> np.ndarray:
    """``n`` independent draws from N(0, sigma**2)."""
    if sigma < 0 or not math.isfinite(sigma):
        raise ValueError(f"sigma must be a finite non-negative number, got {sigma}")
    if n < 0:
        raise ValueError("n must be non-negative")
    z = rng.normal(n)
    if sigma == 0:
        return np.zeros(n)
    return z * sigma


def l2_norm(v) -> float:
    arr = as_tensor(v)
    if not np.all(np.isfinite(arr)):
        raise NumericError("l2_norm of a non-finite tensor")
    flat = arr.ravel()
    if flat.size == 0:
        return 0.0
    m = float(np.max(np.abs(flat)))
    if m == 0.0:
        return 0.0
    if 1e-150 < m < 1e150:
        return float(math.sqrt(np.dot(flat, flat)))
    # rescale so squares neither overflow nor underflow
    y = flat / m
    return m * float(math.sqrt(np.dot(y, y)))


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if b.ndim == 0 or a.shape == b.shape:
        return
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def add(a, b) -> np.ndarray:
    """Elementwise sum; ``b`` may be a scalar or one row broadcast over ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return a + b


def scale(a, c: float) -> np.ndarray:
    if np.ndim(c) != 0:
        raise ShapeError("scale factor must be a scalar")
    return as_tensor(a) * float(c)


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    return a @ b


def row_softmax(a) -> np.ndarray:
    """Softmax of each row (max-shifted; entries underflow to 0 only when
    a row's logits differ by more than about 745)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("row_softmax expects a 2-D tensor")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
