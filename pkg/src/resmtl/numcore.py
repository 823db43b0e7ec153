"""Deterministic dense linear algebra, RNG, and parameter initialization.

The sole numeric carrier is the "matrix": a C-contiguous 2-D float64
numpy array.  ``as_matrix`` coerces inputs into that form and every public
operation returns one.  Randomness comes from :class:`RngState`, a
counter-based splitmix64 generator chosen so that a seed fully determines
the stream on every platform, independent of numpy's global state.
"""

from __future__ import annotations

import math

import numpy as np

from .backend import kernels

Matrix = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(data) -> Matrix:
    """Coerce to a C-contiguous 2-D float64 array; 1-D input becomes a row."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected 1-D or 2-D data, got ndim={arr.ndim}")
    return arr


def _contig(a: Matrix) -> Matrix:
    return np.ascontiguousarray(a, dtype=np.float64)


# --------------------------------------------------------------------------
# splitmix64: counter-based, so draws vectorize and streams are splittable.

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class RngState:
    """Deterministic stream of draws derived from (seed, counter).

    Draw *i* of the stream is ``splitmix64(seed + (i+1) * GAMMA)``; the
    counter advances by the number of values consumed, so any prefix of the
    stream is reproducible from the seed alone.

    Distinct subsystems sharing one user seed must not consume the same
    stream (a shuffle keyed on the draws that generated the data would
    correlate with it), so ``stream`` derives an independent substream:
    the effective seed is splitmix64(seed XOR fnv1a64(stream)).
    """

    def __init__(self, seed: int, stream: str = ""):
        if seed < 0:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        key = int(seed) & 0xFFFFFFFFFFFFFFFF
        if stream:
            with np.errstate(over="ignore"):
                key = int(_splitmix64(np.uint64(key ^ _fnv1a64(stream))))
        self.seed = key
        self.stream = stream
        self.counter = 0

    def _next_block(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _splitmix64(np.uint64(self.seed) + idx * _GAMMA)

    def uniforms(self, n: int) -> np.ndarray:
        """n uniform draws in [0, 1) with 53-bit resolution."""
        return (self._next_block(n) >> np.uint64(11)) * (2.0**-53)

    def normals(self, n: int) -> np.ndarray:
        """n standard normal draws via the Box-Muller transform."""
        pairs = (n + 1) // 2
        # shift into (0, 1] so the log argument never hits zero
        u1 = ((self._next_block(pairs) >> np.uint64(11)) + np.uint64(1)) * (2.0**-53)
        u2 = (self._next_block(pairs) >> np.uint64(11)) * (2.0**-53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of uniform keys)."""
        return np.argsort(self.uniforms(n), kind="stable")


# --------------------------------------------------------------------------
# matrix ops


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return kernels.matmul(_contig(a), _contig(b))


def matmul_at(a: Matrix, b: Matrix) -> Matrix:
    """a.T @ b, the dW pattern of a dense layer's backward pass."""
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_at shape mismatch: {a.shape}^T x {b.shape}")
    return kernels.matmul_at(_contig(a), _contig(b))


def matmul_bt(a: Matrix, b: Matrix) -> Matrix:
    """a @ b.T, the dx pattern of a dense layer's backward pass."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_bt shape mismatch: {a.shape} x {b.shape}^T")
    return kernels.matmul_bt(_contig(a), _contig(b))


def relu(x: Matrix) -> Matrix:
    return kernels.relu(_contig(x))


def relu_backward(x: Matrix, upstream: Matrix) -> Matrix:
    """Pass upstream gradient where x > 0, zero elsewhere."""
    if x.shape != upstream.shape:
        raise ShapeError(
            f"relu_backward shape mismatch: x {x.shape} vs upstream {upstream.shape}"
        )
    return kernels.relu_backward(_contig(x), _contig(upstream))


def softmax_rows(logits: Matrix) -> Matrix:
    """Row-wise softmax, computed with max-subtraction for stability."""
    if logits.shape[1] < 1:
        raise ShapeError(f"softmax_rows needs at least one column, got {logits.shape}")
    return kernels.softmax_rows(_contig(logits))


def he_init(rows: int, cols: int, rng: RngState) -> Matrix:
    """Zero-mean normal entries with std sqrt(2/rows) (fan-in scaling)."""
    if rows < 1 or cols < 1:
        raise ValueError(f"he_init needs positive dims, got ({rows}, {cols})")
    std = math.sqrt(2.0 / rows)
    return (std * rng.normals(rows * cols)).reshape(rows, cols)


def dropout_mask(shape: tuple[int, int], rate: float, rng: RngState) -> Matrix:
    """Inverted-dropout mask: 0 with probability rate, else 1/(1-rate).

    E[mask * x] == x, so evaluation mode needs no rescaling.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    rows, cols = shape
    u = rng.uniforms(rows * cols).reshape(rows, cols)
    return np.where(u < rate, 0.0, 1.0 / (1.0 - rate))
