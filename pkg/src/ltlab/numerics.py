"""Numerically stable reductions and the finite-difference gradient oracle.

All arithmetic is float64: the gradient checks in the test suite run at
1e-4 relative tolerance, which is not reachable in float32.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

NORM_EPS = 1e-12


class NumericalDivergence(RuntimeError):
    """Raised when values that must stay finite stop being finite."""


def logsumexp(v: np.ndarray) -> float:
    """log(sum(exp(v))) via the max-shift trick; safe for |v| up to ~700."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    m = float(np.max(v))
    return m + float(np.log(np.sum(np.exp(v - m))))


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp of a 2-D array, returned as a length-rows vector."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] == 0:
        raise ValueError("empty reduction")
    m = np.max(a, axis=1)
    return m + np.log(np.sum(np.exp(a - m[:, None]), axis=1))


def softmax(v: np.ndarray) -> np.ndarray:
    """exp(v - logsumexp(v)); positive entries summing to 1."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    return np.exp(v - logsumexp(v))


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array."""
    return np.exp(np.asarray(a, dtype=np.float64) - logsumexp_rows(a)[:, None])


def l2_normalize(v: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """v / max(||v||_2, eps); eps guards the zero vector."""
    v = np.asarray(v, dtype=np.float64)
    return v / max(float(np.linalg.norm(v)), eps)


def l2_normalize_rows(a: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Row-wise unit normalization with the same eps guard as l2_normalize."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(a, axis=1), eps)
    return a / norms[:, None]


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Works for arrays of any shape; the returned gradient has the shape of x.
    Raises if f evaluates to a non-finite value at any probe point.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """max|a - r| scaled by the larger of the two infinity norms.

    Used to compare analytic gradients against the finite-difference oracle
    without blowing up on coordinates that happen to be near zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if analytic.shape != reference.shape:
        raise ValueError(f"shape mismatch: {analytic.shape} vs {reference.shape}")
    if analytic.size == 0:
        return 0.0
    scale = max(
        float(np.max(np.abs(analytic))), float(np.max(np.abs(reference))), 1e-12
    )
    return float(np.max(np.abs(analytic - reference))) / scale
