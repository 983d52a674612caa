"""Tensor helpers, seeded random streams and the finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order.
Training runs in float32; gradient checks run in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator; extra ``keys`` derive independent streams."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must be non-empty")
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape extents must be positive, got {shape}")
    return shape


def gaussian_init(shape, mean=0.0, stddev=1.0, rng=None, dtype=TRAIN_DTYPE) -> np.ndarray:
    shape = _check_shape(shape)
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    if stddev == 0:
        return np.full(shape, mean, dtype=dtype)
    if rng is None:
        raise ValueError("rng is required for stddev > 0")
    return rng.normal(mean, stddev, size=shape).astype(dtype)


def strides_of(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides (not byte strides)."""
    strides = [1] * len(shape)
    for axis in range(len(shape) - 2, -1, -1):
        strides[axis] = strides[axis + 1] * shape[axis + 1]
    return tuple(strides)


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    if len(index) != len(shape):
        raise ValueError("index rank does not match shape rank")
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
    return sum(i * s for i, s in zip(index, strides_of(shape)))


def unflat_index(offset: int, shape: Sequence[int]) -> tuple[int, ...]:
    out = []
    for s in strides_of(shape):
        out.append(offset // s)
        offset %= s
    return tuple(out)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_index: tuple[int, ...] | None = None
    message: str = ""
    max_abs_error: float = 0.0

    def __bool__(self) -> bool:
        return self.passed


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-6,
    tol: float = 1e-5,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``analytic_grad`` with central differences of ``f`` at ``x``.

    A coordinate whose absolute discrepancy is at most ``abs_floor`` counts as
    exact; otherwise its error is ``|a - n| / max(|a|, |n|)``.  ``x`` is
    perturbed in place and restored, so callers may pass a live parameter.
    """
    if x.shape != analytic_grad.shape:
        return GradCheckReport(math.inf, False, None, f"shape mismatch {x.shape} vs {analytic_grad.shape}")
    if x.dtype != np.float64:
        return GradCheckReport(math.inf, False, None, "finite_diff_check requires float64 inputs")
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        return GradCheckReport(math.inf, False, None, "x must be contiguous")
    grad = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    worst, worst_i, worst_abs = 0.0, None, 0.0
    for i in range(flat.size):
        orig = flat[i]
        try:
            flat[i] = orig + eps
            fp = float(f(x))
            flat[i] = orig - eps
            fm = float(f(x))
        finally:
            flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            return GradCheckReport(math.inf, False, unflat_index(i, x.shape), "non-finite function value")
        numeric = (fp - fm) / (2.0 * eps)
        diff = abs(numeric - grad[i])
        worst_abs = max(worst_abs, diff)
        if diff <= abs_floor:
            continue
        rel = diff / max(abs(numeric), abs(grad[i]))
        if rel > worst:
            worst, worst_i = rel, unflat_index(i, x.shape)
    return GradCheckReport(worst, worst <= tol, worst_i, max_abs_error=worst_abs)
