"""Mini-batch NCMI surrogate with learnable per-class centroids.

For a batch of probability rows ``p`` with labels ``c`` and centroids ``q``::

    numerator   = 1/B   sum_x D(p_x || q^{c_x})
    denominator = 1/B^2 sum_{x,z: c_x != c_z} sum_i p_x[i] ln(q^{c_x}[i] / p_z[i])
    loss        = numerator / denominator

With ``q`` fixed at the exact class centroids both factors coincide with the
dataset CMI and Gamma, so the ratio is the dataset NCMI.  Summing over
``x`` in a class first makes the denominator linear in ``p_x``, which is
what lets it be evaluated per batch without the dataset-wide centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics
from .autodiff import ContractError, Tensor, matmul, no_grad
from .simplex import EPS_FLOOR, nsf, softmax

DENOMINATOR_FLOOR = 1e-8


class SingleClassBatchError(ContractError):
    """Raised instead of skipping when strict mode is on."""


@dataclass
class BatchLossBreakdown:
    numerator: float
    denominator: float
    loss: float
    pairs_used: int
    skipped: bool = False
    reason: str = ""

    def to_record(self, step: int) -> dict:
        return {"step": step, "numerator": self.numerator, "denominator": self.denominator,
                "loss": self.loss, "pairs_used": self.pairs_used, "skipped": int(self.skipped)}


HEADS = {"nsf": nsf, "softmax": softmax}


class CentroidBank:
    """Unconstrained per-class parameters whose head image is the centroid."""

    def __init__(self, xi: np.ndarray, head: str = "nsf"):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        self.xi = Tensor(np.array(xi, dtype=np.float64), requires_grad=True)
        self.head = head

    @classmethod
    def initialize(cls, n_classes: int, dim: int, rng: np.random.Generator,
                   head: str = "nsf", scale: float = 0.01) -> "CentroidBank":
        return cls(rng.normal(0.0, scale, size=(n_classes, dim)), head)

    @property
    def n_classes(self) -> int:
        return self.xi.shape[0]

    def q_tensor(self) -> Tensor:
        return HEADS[self.head](self.xi)

    @property
    def q(self) -> np.ndarray:
        return HEADS[self.head](self.xi.data)

    def parameters(self) -> list[Tensor]:
        return [self.xi]


def _log(t: Tensor) -> Tensor:
    return t.clamp_min(EPS_FLOOR).log()


def batch_ncmi_loss(probs: Tensor, labels, q) -> tuple[Tensor | None, BatchLossBreakdown]:
    """Build the differentiable batch ratio.

    Args:
        probs: (B, m) tracked probability rows.
        labels: (B,) integer class labels.
        q: (C, m) tracked centroid rows, or a :class:`CentroidBank`.

    Returns:
        ``(loss, breakdown)``.  ``loss`` is None when the batch is skipped
        (a single label present, or a denominator at or below
        ``DENOMINATOR_FLOOR``).
    """
    if isinstance(q, CentroidBank):
        q = q.q_tensor()
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    q = q if isinstance(q, Tensor) else Tensor(q)
    labels = np.asarray(labels, dtype=np.intp)
    b = probs.shape[0]
    if labels.shape != (b,):
        raise ContractError(f"{labels.shape[0]} labels for {b} probability rows")
    if labels.max() >= q.shape[0]:
        raise ContractError(f"label {labels.max()} has no centroid (bank has {q.shape[0]})")

    differ = labels[:, None] != labels[None, :]
    pairs = int(differ.sum())
    if pairs == 0:
        return None, BatchLossBreakdown(float("nan"), 0.0, float("nan"), 0, True, "single_class")

    logp = _log(probs)
    logq_own = _log(q).take_rows(labels)
    numerator = (probs * (logp - logq_own)).sum().scale(1.0 / b)

    mask = differ.astype(np.float64)
    n_other = mask.sum(axis=1)
    own_term = ((probs * logq_own).sum(axis=1) * Tensor(n_other)).sum()
    # cross[x, z] = sum_i p_x[i] ln p_z[i]
    cross = matmul(probs, logp.T)
    cross_term = (cross * Tensor(mask)).sum()
    denominator = (own_term - cross_term).scale(1.0 / (b * b))

    num_v, den_v = numerator.item(), denominator.item()
    if not den_v > DENOMINATOR_FLOOR:
        return None, BatchLossBreakdown(num_v, den_v, float("nan"), pairs, True, "denominator")
    loss = numerator / denominator
    return loss, BatchLossBreakdown(num_v, den_v, loss.item(), pairs)


def numerator_tensor(probs: Tensor, labels, q: Tensor) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    logq_own = _log(q).take_rows(labels)
    return (probs * (_log(probs) - logq_own)).sum().scale(1.0 / len(labels))


def numerator_value(probs, labels, q) -> float:
    """Concentration term alone, evaluated without recording a graph."""
    with no_grad():
        probs = Tensor(np.asarray(probs, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.intp)
        logq_own = _log(Tensor(np.asarray(q, dtype=np.float64))).take_rows(labels)
        return (probs * (_log(probs) - logq_own)).sum().item() / len(labels)


def theorem1_residual(probs, labels, q) -> float:
    """Relative gap between the batch surrogate and the exact NCMI on the same samples.

    Meaningful when ``q`` holds the exact class centroids of ``probs``.
    Returns nan when Gamma is degenerate.
    """
    probs = np.asarray(probs, dtype=np.float64)
    report = metrics.ncmi(probs, labels, n_classes=np.asarray(q).shape[0])
    if not report.defined:
        return float("nan")
    with no_grad():
        loss, breakdown = batch_ncmi_loss(Tensor(probs), labels, Tensor(np.asarray(q)))
    if loss is None:
        return float("nan")
    target = report.ncmi
    return abs(breakdown.loss - target) / max(abs(target), 1e-300)


def invert_nsf(target) -> np.ndarray:
    """Unconstrained rows whose normalized sigmoid reproduces ``target``.

    Any positive rescaling ``k * s`` with ``k * max(s) < 1`` is a valid vector
    of sigmoid outputs; choosing ``k = 1 / (2 max s)`` puts the largest entry
    at logit 0, so a uniform target maps to the zero vector.
    """
    s = np.clip(np.atleast_2d(np.asarray(target, dtype=np.float64)), EPS_FLOOR, 1.0 - EPS_FLOOR)
    a = s / (2.0 * s.max(axis=1, keepdims=True))
    return np.log(a) - np.log1p(-a)


def centroid_greedy_refresh(probs, labels, bank: CentroidBank) -> None:
    """Set the bank to the exact class centroids of an epoch's probability dump."""
    cents = metrics.class_centroids(probs, labels, bank.n_classes).centroids
    if bank.head == "nsf":
        xi = invert_nsf(cents)
    else:
        xi = np.log(np.clip(cents, EPS_FLOOR, None))
    bank.xi.data[...] = xi


def numerator_stationarity(probs, labels, q) -> float:
    """Largest tangent-space gradient norm of the numerator over the centroid rows.

    The gradient is taken with respect to ``q`` itself and projected onto the
    simplex tangent space (zero-sum directions), so it vanishes exactly at a
    constrained minimizer.
    """
    q_t = Tensor(np.asarray(q, dtype=np.float64), requires_grad=True)
    numerator_tensor(Tensor(np.asarray(probs, dtype=np.float64)), labels, q_t).backward()
    g = q_t.grad
    tangent = g - g.mean(axis=1, keepdims=True)
    present = np.isin(np.arange(len(g)), np.asarray(labels))
    return float(np.linalg.norm(tangent[present], axis=1).max())


def grid_minimizer_2d(probs, labels, n_classes: int, resolution: float = 1e-3) -> np.ndarray:
    """Per-class grid-search minimizer of the numerator over the 2-simplex.

    Returns a (C, 2) array of the best grid points ``(t, 1 - t)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if probs.shape[1] != 2:
        raise ContractError("grid search needs two-dimensional probability rows")
    t = np.arange(resolution, 1.0, resolution)
    grid = np.stack([t, 1.0 - t], axis=1)
    log_grid = np.log(grid)
    out = np.full((n_classes, 2), np.nan)
    for v in range(n_classes):
        p = probs[labels == v]
        if len(p) == 0:
            continue
        # Only the cross-entropy part depends on q.
        score = -(p @ log_grid.T).sum(axis=0)
        out[v] = grid[np.argmin(score)]
    return out
