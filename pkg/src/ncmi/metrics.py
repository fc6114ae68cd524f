"""Full-dataset plug-in estimators of CMI, Gamma and NCMI.

Reductions across samples go through :func:`math.fsum`, which is exactly
rounded and therefore independent of sample order: permuting the dataset
leaves every reported number unchanged bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError
from .simplex import safe_log

GAMMA_FLOOR = 1e-15


class EmptyClassError(ValueError):
    """A class in the label range has no samples."""


@dataclass
class CentroidSet:
    centroids: np.ndarray  # (C, m)
    counts: np.ndarray  # (C,)

    @property
    def n_classes(self) -> int:
        return len(self.counts)


@dataclass
class NcmiReport:
    cmi: float
    gamma: float
    ncmi: float  # nan when undefined
    per_class_cmi: dict[int, float]
    n_samples: int
    n_classes: int
    defined: bool = True
    centroids: CentroidSet | None = field(default=None, repr=False)

    def to_record(self, **extra) -> dict:
        rec = {"cmi": self.cmi, "gamma": self.gamma,
               "ncmi": self.ncmi if self.defined else None}
        rec.update(extra)
        return rec


def _as_inputs(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if probs.ndim != 2:
        raise DimensionError(f"probs must be 2-D, got shape {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match {probs.shape[0]} rows")
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be nonnegative")
    return probs, labels


def class_centroids(probs, labels, n_classes: int | None = None) -> CentroidSet:
    """Per-class arithmetic mean of the probability rows."""
    probs, labels = _as_inputs(probs, labels)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if labels.max() >= n_classes:
        raise ValueError(f"label {labels.max()} out of range for {n_classes} classes")
    counts = np.bincount(labels, minlength=n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyClassError(f"classes without samples: {empty.tolist()}")
    m = probs.shape[1]
    cents = np.empty((n_classes, m))
    for y in range(n_classes):
        rows = probs[labels == y]
        cents[y] = [math.fsum(col) / counts[y] for col in rows.T]
    return CentroidSet(cents, counts)


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.sum(p * (safe_log(p) - safe_log(q)), axis=-1)


def _check_centroids(probs, centroids: CentroidSet):
    if centroids.centroids.shape[1] != probs.shape[1]:
        raise DimensionError(
            f"centroid dim {centroids.centroids.shape[1]} vs probability dim {probs.shape[1]}")


def per_sample_kl_to_centroid(probs, labels, centroids: CentroidSet) -> np.ndarray:
    probs, labels = _as_inputs(probs, labels)
    _check_centroids(probs, centroids)
    return _kl_rows(probs, centroids.centroids[labels])


def cmi(probs, labels, centroids: CentroidSet) -> float:
    """Dataset-average KL from each sample to its own class centroid."""
    kl = per_sample_kl_to_centroid(probs, labels, centroids)
    return math.fsum(kl) / len(kl)


def _centroid_to_sample_kl(probs, centroids: CentroidSet) -> np.ndarray:
    """(C, N) matrix of D(s^y || p_z)."""
    s = centroids.centroids
    return np.sum(s[:, None, :] * (safe_log(s)[:, None, :] - safe_log(probs)[None, :, :]),
                  axis=-1)


def gamma(probs, labels, centroids: CentroidSet) -> float:
    """Cross-class separation, grouped as sum_y |D^y| sum_{z not in y} D(s^y||p_z) / N^2."""
    probs, labels = _as_inputs(probs, labels)
    _check_centroids(probs, centroids)
    n = len(labels)
    kl = _centroid_to_sample_kl(probs, centroids)
    terms = []
    for y in range(centroids.n_classes):
        others = kl[y, labels != y]
        if others.size:
            terms.append(centroids.counts[y] * math.fsum(others))
    return math.fsum(terms) / (n * n)


def ncmi(probs, labels, n_classes: int | None = None) -> NcmiReport:
    """Centroids, CMI, Gamma and their ratio; never raises on Gamma == 0."""
    probs, labels = _as_inputs(probs, labels)
    cents = class_centroids(probs, labels, n_classes)
    kl = per_sample_kl_to_centroid(probs, labels, cents)
    per_class = {}
    for y in range(cents.n_classes):
        per_class[y] = math.fsum(kl[labels == y]) / cents.counts[y]
    c = math.fsum(kl) / len(kl)
    g = gamma(probs, labels, cents)
    defined = g > GAMMA_FLOOR
    return NcmiReport(cmi=c, gamma=g, ncmi=c / g if defined else math.nan,
                      per_class_cmi=per_class, n_samples=len(labels),
                      n_classes=cents.n_classes, defined=defined, centroids=cents)
