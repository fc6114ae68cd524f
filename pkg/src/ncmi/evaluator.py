"""Evaluation protocols: centroid comparison, linear probing, correlation study."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import SGD, DimensionError, Tensor, matmul
from .simplex import safe_log

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    protocol: str
    top1: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    confusion: list[list[int]]
    n_eval: int
    top5: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def kl_to_centroids(probs, centroids, chunk: int = 4096) -> np.ndarray:
    """(N, C) matrix of D(p_n || q_v), evaluated row by row."""
    probs = np.asarray(probs, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if probs.shape[1] != centroids.shape[1]:
        raise DimensionError(f"probability dim {probs.shape[1]} vs centroid dim {centroids.shape[1]}")
    logq = safe_log(centroids)
    out = np.empty((len(probs), len(centroids)))
    for start in range(0, len(probs), chunk):
        p = probs[start:start + chunk]
        out[start:start + chunk] = np.sum(
            p[:, None, :] * (safe_log(p)[:, None, :] - logq[None, :, :]), axis=-1)
    return out


def classify_cc(probs, centroids, k: int = 1) -> np.ndarray:
    """Nearest centroid in KL divergence; ties go to the lowest class index.

    With ``k > 1`` returns the (N, k) ranking instead.
    """
    d = kl_to_centroids(probs, centroids)
    if k == 1:
        return np.argmin(d, axis=1)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def confusion_matrix(labels, preds, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def metrics_from_confusion(confusion) -> tuple[float, list[float], list[float], list[float]]:
    """Macro-F1 plus per-class precision, recall and F1 (rows = true class).

    Any 0/0 ratio is taken as 0.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)

    def ratio(a, b):
        return [float(x / y) if y > 0 else 0.0 for x, y in zip(a, b)]

    precision = ratio(tp, pred_tot)
    recall = ratio(tp, true_tot)
    f1 = ratio(2 * tp, pred_tot + true_tot)
    return float(np.mean(f1)), precision, recall, f1


def evaluate_predictions(labels, preds, n_classes: int, protocol: str,
                         ranking: np.ndarray | None = None) -> EvalResult:
    labels = np.asarray(labels)
    cm = confusion_matrix(labels, preds, n_classes)
    macro, precision, recall, _ = metrics_from_confusion(cm)
    top5 = None
    if ranking is not None:
        top5 = float(np.mean(np.any(ranking == labels[:, None], axis=1)))
    return EvalResult(protocol, float(np.trace(cm) / len(labels)), macro, precision, recall,
                      cm.tolist(), int(len(labels)), top5)


def evaluate_cc(probs, labels, centroids, n_classes: int | None = None) -> EvalResult:
    n_classes = n_classes or len(centroids)
    preds = classify_cc(probs, centroids)
    ranking = classify_cc(probs, centroids, k=5) if n_classes > 5 else None
    return evaluate_predictions(labels, preds, n_classes, "cc", ranking)


# -- linear probing -------------------------------------------------------------

@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    seed: int = 0


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    train_log: list[float] = field(default_factory=list)

    def predict(self, features) -> np.ndarray:
        return np.argmax(np.asarray(features) @ self.weight + self.bias, axis=1)


def _cosine(base, epoch, total):
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total)) if total else base


def train_linear_probe(features, labels, n_classes: int,
                       config: ProbeConfig | None = None) -> LinearProbe:
    """Softmax-regression head fit by SGD with cosine learning-rate decay."""
    config = config or ProbeConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if np.all(x.std(axis=0) == 0):
        log.warning("probe features have zero variance in every dimension; expect chance accuracy")
    rng = np.random.default_rng(config.seed)
    d = x.shape[1]
    w = Tensor(np.zeros((d, n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = SGD([w, b], config.lr, config.momentum, config.weight_decay)
    onehot = np.eye(n_classes)
    probe = LinearProbe(w.data, b.data)
    for epoch in range(config.epochs):
        opt.lr = _cosine(config.lr, epoch, config.epochs)
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            logits = matmul(Tensor(x[idx]), w) + b
            loss = -(logits.log_softmax() * Tensor(onehot[y[idx]])).sum().scale(1.0 / len(idx))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        probe.train_log.append(total / len(y))
    return probe


def linear_probe(train_features, train_labels, test_features, test_labels, n_classes: int,
                 config: ProbeConfig | None = None) -> tuple[LinearProbe, EvalResult]:
    """Fit on the training features only, then score the test features."""
    probe = train_linear_probe(train_features, train_labels, n_classes, config)
    preds = probe.predict(test_features)
    return probe, evaluate_predictions(test_labels, preds, n_classes, "lp")


# -- NCMI vs accuracy -----------------------------------------------------------

@dataclass
class PearsonReport:
    r: float  # nan when undefined
    defined: bool
    pairs: list[tuple[float, float]]
    n: int

    def to_dict(self) -> dict:
        return {"r": self.r if self.defined else None, "defined": self.defined, "n": self.n}


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return math.nan
    return float(np.sum(da * db)) / denom


def correlate_ncmi_accuracy(pairs, min_points: int = 5) -> PearsonReport:
    """Pearson r between NCMI and accuracy over (ncmi, acc) checkpoint pairs."""
    pairs = [(float(n), float(a)) for n, a in pairs]
    if len(pairs) < min_points:
        raise ValueError(f"need at least {min_points} checkpoints, got {len(pairs)}")
    # Canonical order makes the result independent of checkpoint order.
    ordered = sorted(pairs)
    r = pearson([p[0] for p in ordered], [p[1] for p in ordered])
    return PearsonReport(r, not math.isnan(r), pairs, len(pairs))


def write_correlation_csv(path, rows) -> None:
    """rows: iterable of (checkpoint, step, ncmi, acc_cc)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "step", "ncmi", "acc_cc"])
        for row in rows:
            w.writerow(list(row))
