"""Dense numeric helpers: grid pooling, seeded RNG, finite-difference gradients.

Grids are numpy arrays of shape ``(rows, cols)`` or ``(rows, cols, dim)``;
vectors are 1-D float arrays. Every stochastic routine in the package takes
an explicit ``numpy.random.Generator`` built by :func:`make_rng`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NonFiniteError, ShapeError

_MASK64 = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give bit-identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))


def derive_seed(seed: int, stream: int) -> int:
    """Child seed for parallel work: ``seed XOR stream`` on 64 bits."""
    return (int(seed) ^ int(stream)) & _MASK64


def _check_grid(grid: np.ndarray, kernel: int) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim not in (2, 3):
        raise ShapeError(f"expected a (rows, cols[, dim]) grid, got shape {grid.shape}")
    if kernel < 1:
        raise ShapeError(f"kernel must be >= 1, got {kernel}")
    rows, cols = grid.shape[:2]
    if rows % kernel or cols % kernel:
        raise ShapeError(f"kernel {kernel} does not divide grid {rows}x{cols}")
    if not np.all(np.isfinite(grid)):
        raise NonFiniteError("grid contains non-finite values")
    return grid


def _blocks(grid: np.ndarray, kernel: int) -> np.ndarray:
    rows, cols = grid.shape[:2]
    tail = grid.shape[2:]
    # (R/k, k, C/k, k, *tail) -> (R/k, C/k, k*k, *tail) in row-major block order
    b = grid.reshape(rows // kernel, kernel, cols // kernel, kernel, *tail)
    b = np.moveaxis(b, 2, 1)
    return b.reshape(rows // kernel, cols // kernel, kernel * kernel, *tail)


def avg_pool_2d(grid: np.ndarray, kernel: int) -> np.ndarray:
    """Non-overlapping ``kernel x kernel`` mean pooling over the first two axes."""
    grid = _check_grid(grid, kernel)
    return _blocks(grid, kernel).mean(axis=2)


def max_pool_2d(grid: np.ndarray, kernel: int) -> np.ndarray:
    """Elementwise maximum over non-overlapping ``kernel x kernel`` blocks."""
    grid = _check_grid(grid, kernel)
    return _blocks(grid, kernel).max(axis=2)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Works on arrays of any shape; the result has the shape of ``x``.
    Raises :class:`NonFiniteError` carrying the flat index of the first
    coordinate where ``f`` is not finite.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite around coordinate {i}", index=i)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` with Euclidean norms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def sinusoid_table(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos features: column ``2i`` is ``sin(p * w_i)``, ``2i+1`` is ``cos``.

    ``w_i = max_period ** (-2i / dim)``; ``dim`` must be even.
    """
    if dim % 2:
        raise ShapeError(f"sinusoid dim must be even, got {dim}")
    positions = np.asarray(positions, dtype=np.float64)
    freqs = max_period ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = positions[..., None] * freqs
    out = np.empty(positions.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out
