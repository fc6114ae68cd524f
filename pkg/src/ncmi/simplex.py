"""Probability-simplex primitives.

The array functions (``kl_divergence``, ``cross_entropy``) act on the last
axis, so they accept single rows or stacks of rows.  ``nsf``, ``softmax`` and
``normalize_and_scale`` also accept a :class:`~ncmi.autodiff.Tensor`, in which
case they build a differentiable graph.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError, Tensor

EPS_FLOOR = 1e-12

# Counters for recoverable numerical events (e.g. zero feature rows).
diagnostics: Counter = Counter()


def _pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q.shape[-1]:
        raise DimensionError(f"simplex dimension mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    return p, q


def safe_log(x) -> np.ndarray:
    return np.log(np.maximum(x, EPS_FLOOR))


def kl_divergence(p, q) -> np.ndarray | float:
    """D(p||q) = sum_i p_i ln(p_i / q_i), with both arguments floored at EPS_FLOOR."""
    p, q = _pair(p, q)
    pc = np.maximum(p, EPS_FLOOR)
    qc = np.maximum(q, EPS_FLOOR)
    out = np.sum(p * (np.log(pc) - np.log(qc)), axis=-1)
    # Round-off can leave tiny negatives for (near-)identical rows.
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def cross_entropy(p, q) -> np.ndarray | float:
    """Nonnegative cross-entropy -sum_i p_i ln q_i."""
    p, q = _pair(p, q)
    out = -np.sum(p * safe_log(q), axis=-1)
    return float(out) if out.ndim == 0 else out


def check_simplex(rows, tol: float = 1e-9) -> None:
    """Raise ValueError unless every row is a probability vector."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if not np.all(np.isfinite(rows)):
        raise ValueError("simplex rows contain non-finite values")
    if np.any(rows < 0) or np.any(rows > 1 + tol):
        raise ValueError("simplex entries must lie in [0, 1]")
    worst = np.max(np.abs(rows.sum(axis=-1) - 1.0))
    if worst > tol:
        raise ValueError(f"simplex rows must sum to 1 (worst deviation {worst:.3e})")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def nsf(z):
    """Normalized sigmoid: elementwise logistic, then l1-normalize each row."""
    if isinstance(z, Tensor):
        s = z.sigmoid()
        return s / s.sum(axis=-1, keepdims=True)
    s = _sigmoid(np.asarray(z, dtype=np.float64))
    return s / s.sum(axis=-1, keepdims=True)


def softmax(z):
    """Max-shifted softmax along the last axis."""
    if isinstance(z, Tensor):
        return z.log_softmax(axis=-1).exp()
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def normalize_and_scale(z, tau: float):
    """Project each row onto the unit sphere and divide by ``tau``.

    All-zero rows are replaced by the uniform direction 1/sqrt(D) (and counted
    in ``diagnostics["zero_feature_rows"]``); they carry no gradient.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if data.ndim == 1:
        if isinstance(z, Tensor):
            return normalize_and_scale(z.reshape(1, -1), tau).reshape(-1)
        return normalize_and_scale(data[None, :], tau)[0]
    # Rescale by the largest entry first so squaring cannot under- or overflow.
    peak = np.max(np.abs(data), axis=-1, keepdims=True)
    zero = peak[:, 0] == 0.0
    peak = np.where(zero[:, None], 1.0, peak)
    scaled = data / peak
    scaled_norm = np.sqrt(np.sum(scaled * scaled, axis=-1, keepdims=True))
    if zero.any():
        diagnostics["zero_feature_rows"] += int(zero.sum())
    d = data.shape[-1]
    uniform = np.full(d, 1.0 / (np.sqrt(d) * tau))

    scaled_norm = np.where(zero[:, None], 1.0, scaled_norm)
    unit = scaled / scaled_norm
    out = unit / tau
    out[zero] = uniform
    if not isinstance(z, Tensor):
        return out
    safe = peak * scaled_norm
    live = ~zero[:, None]

    def backward(g):
        # d(z/|z|) = (I - u u^T) / |z|
        proj = g - unit * np.sum(g * unit, axis=-1, keepdims=True)
        return (np.where(live, proj / (safe * tau), 0.0),)

    return Tensor._make(out, (z,), backward, "normalize_and_scale")


@dataclass
class CenterState:
    """Running feature center for EMA centering."""

    center: np.ndarray
    momentum: float = 0.9
    updates: int = field(default=0)

    @classmethod
    def zeros(cls, dim: int, momentum: float = 0.9) -> "CenterState":
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"center momentum must lie in [0, 1), got {momentum}")
        return cls(np.zeros(dim), float(momentum))


def ema_center_update(state: CenterState, batch_features) -> CenterState:
    """c <- m c + (1 - m) mean(batch_features), in place; returns ``state``.

    ``batch_features`` is read as plain data, so no gradient flows from here.
    """
    data = batch_features.data if isinstance(batch_features, Tensor) else np.asarray(batch_features)
    if data.shape[0] == 0:
        raise ValueError("cannot update the center from an empty batch")
    m = state.momentum
    state.center = m * state.center + (1.0 - m) * data.mean(axis=0)
    state.updates += 1
    return state


def apply_center(z, state: CenterState):
    """z - c, broadcasting the center over rows."""
    if isinstance(z, Tensor):
        return z - Tensor(state.center)
    return np.asarray(z, dtype=np.float64) - state.center
