"""Alternating NCMI training loop, cross-entropy baseline, schedules and checkpoints.

Per NCMI batch the loop runs, in this order:

1. ``z = f(x) - c`` using the center from before this batch,
2. ``z' = z / (|z| tau)``,
3. ``c <- m c + (1 - m) mean(z)`` (plain data, no gradient),
4. ``p = head(z')`` and ``q = head(xi)``,
5. the batch NCMI ratio, one backward pass, then a step of both the model
   and the centroid optimizer.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import metrics
from .autodiff import SGD, Tensor, no_grad
from .data import DatasetSplits, LabeledDataset
from .evaluator import ProbeConfig, classify_cc, evaluate_cc, evaluate_predictions, linear_probe
from .models import Model, ModelSpec
from .objective import HEADS as _HEAD
from .objective import (BatchLossBreakdown, CentroidBank, SingleClassBatchError, batch_ncmi_loss,
                        centroid_greedy_refresh)
from .simplex import CenterState, apply_center, ema_center_update, normalize_and_scale, softmax

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ["step", "epoch", "lr", "loss", "numerator", "denominator", "cmi", "gamma",
                  "ncmi", "acc_cc", "acc_lp", "skipped_batches"]
BATCH_COLUMNS = ["step", "numerator", "denominator", "loss", "pairs_used", "skipped"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, breakdown: BatchLossBreakdown | None):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    loss: str = "ncmi"  # ncmi | ce | ce_ls
    epochs: int = 200
    batch_size: int = 64
    lr_model: float = 0.1
    lr_centroids: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    tau: float = 0.1
    center_momentum: float = 0.9
    lr_schedule: str = "multistep"  # multistep | cosine | constant
    milestones: list[int] = field(default_factory=lambda: [60, 120, 160])
    lr_factor: float = 0.1
    label_smoothing: float = 0.0
    seed: int = 0
    eval_every: int = 100
    skip_single_class_batches: bool = True
    head: str = "nsf"  # nsf | softmax
    centering: bool = True
    centroid_init: str = "normal"  # normal | refresh
    # model
    arch: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [64])
    feature_dim: int = 16
    activation: str = "relu"
    # linear probe
    probe_epochs: int = 100
    probe_lr: float = 0.1
    probe_momentum: float = 0.9
    probe_weight_decay: float = 0.0
    probe_batch_size: int = 128

    def __post_init__(self):
        if self.loss not in ("ncmi", "ce", "ce_ls"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "ncmi" and self.batch_size < 2:
            raise ValueError("ncmi needs batch_size >= 2")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs nonnegative")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValueError(f"center_momentum must lie in [0, 1), got {self.center_momentum}")
        if self.centroid_init not in ("normal", "refresh"):
            raise ValueError(f"unknown centroid_init {self.centroid_init!r}")
        if self.lr_schedule not in ("multistep", "cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.head not in ("nsf", "softmax"):
            raise ValueError(f"unknown head {self.head!r}")
        if not 0.0 <= self.label_smoothing <= 1.0:
            raise ValueError("label_smoothing must lie in [0, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_spec(self, train: LabeledDataset) -> ModelSpec:
        image_shape = None
        if self.arch == "tinyconv":
            shape = train.inputs.shape[1:]
            image_shape = [1, *shape] if len(shape) == 2 else [shape[2], shape[0], shape[1]]
        return ModelSpec(self.arch, int(np.prod(train.inputs.shape[1:])), list(self.hidden),
                         self.feature_dim, self.activation, self.seed, image_shape)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(self.probe_epochs, self.probe_lr, self.probe_momentum,
                           self.probe_weight_decay, self.probe_batch_size, self.seed)


def lr_at(config: TrainConfig, epoch: int, base: float | None = None) -> float:
    base = config.lr_model if base is None else base
    if config.lr_schedule == "multistep":
        passed = sum(1 for m in config.milestones if epoch >= m)
        return base * config.lr_factor ** passed
    if config.lr_schedule == "cosine":
        if config.epochs == 0:
            return base
        return base * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
    return base


# -- checkpoints ----------------------------------------------------------------

class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointNonFiniteError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    model_spec: dict
    state: dict  # counters
    arrays: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """JSON manifest, then one length-prefixed little-endian float64 blob per array."""
    names = list(ckpt.arrays)
    manifest = {
        "format": "ncmi-checkpoint",
        "version": ckpt.version,
        "config": ckpt.config,
        "model_spec": ckpt.model_spec,
        "state": ckpt.state,
        "arrays": [{"name": n, "shape": list(ckpt.arrays[n].shape)} for n in names],
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    chunks = [struct.pack("<Q", len(head)), head]
    for n in names:
        a = np.ascontiguousarray(ckpt.arrays[n], dtype="<f8")
        chunks.append(struct.pack("<Q", a.size))
        chunks.append(a.tobytes())
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise CheckpointCorruptError(f"{path}: too short for a manifest length")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise CheckpointCorruptError(f"{path}: manifest length {hlen} exceeds file size")
    try:
        manifest = json.loads(raw[8:8 + hlen])
    except ValueError as exc:
        raise CheckpointCorruptError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {manifest.get('version')}, expected {CHECKPOINT_VERSION}")
    offset = 8 + hlen
    arrays = {}
    for entry in manifest["arrays"]:
        if offset + 8 > len(raw):
            raise CheckpointCorruptError(f"{path}: truncated before array {entry['name']!r}")
        (count,) = struct.unpack("<Q", raw[offset:offset + 8])
        offset += 8
        expected = int(np.prod(entry["shape"]))
        end = offset + 8 * count
        if count != expected or end > len(raw):
            raise CheckpointCorruptError(f"{path}: array {entry['name']!r} has a bad length")
        a = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(entry["shape"])
        if not np.all(np.isfinite(a)):
            raise CheckpointNonFiniteError(f"{path}: array {entry['name']!r} has non-finite values")
        arrays[entry["name"]] = a
        offset = end
    if offset != len(raw):
        raise CheckpointCorruptError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(manifest["config"], manifest["model_spec"], manifest["state"], arrays,
                      manifest["version"])


# -- training ----------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_rows_csv(path, columns, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")


class Trainer:
    """Owns the model, centroid bank, center, optimizers and counters of one run."""

    def __init__(self, config: TrainConfig, splits: DatasetSplits, model_spec: ModelSpec | None = None):
        self.config = config
        self.splits = splits
        self.n_classes = splits.train.n_classes
        if config.loss == "ncmi" and self.n_classes < 2:
            raise ValueError("ncmi training needs at least two classes")
        self.model = Model(model_spec or config.model_spec(splits.train))
        init_rng = np.random.default_rng([config.seed, 1])
        self.bank = None
        self.center = None
        if config.loss == "ncmi":
            self.bank = CentroidBank.initialize(self.n_classes, self.model.spec.feature_dim,
                                                init_rng, head=config.head)
            self.center = CenterState.zeros(self.model.spec.feature_dim, config.center_momentum)
        else:
            self.model.add_head(self.n_classes, init_rng)
        self.opt_model = SGD(self.model.parameters(), config.lr_model, config.momentum,
                             config.weight_decay)
        self.opt_xi = (SGD(self.bank.parameters(), config.lr_centroids, config.momentum,
                           config.weight_decay) if self.bank else None)
        self.step = 0
        self.epoch = 0
        self.batch_in_epoch = 0
        self.skipped = 0
        self.counts = {"forward": 0, "backward": 0}
        self.metric_rows: list[dict] = []
        self.batch_rows: list[dict] = []
        self._window: list[BatchLossBreakdown] = []
        self._x_train = splits.train.flat_inputs
        self._x_test = splits.test.flat_inputs

    # -- pipeline ---------------------------------------------------------------
    def head_inputs(self, features: Tensor, update_center: bool = False) -> Tensor:
        """Center (optionally updating the EMA afterwards) and normalize/scale."""
        z = features
        if self.center is not None and self.config.centering:
            z = apply_center(features, self.center)
        zp = normalize_and_scale(z, self.config.tau)
        if update_center and self.center is not None and self.config.centering:
            ema_center_update(self.center, z.data)
        return zp

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, 2, epoch]).permutation(len(self.splits.train))

    def n_batches(self) -> int:
        return -(-len(self.splits.train) // self.config.batch_size)

    # -- one step ---------------------------------------------------------------
    def train_step(self, idx: np.ndarray) -> BatchLossBreakdown:
        cfg = self.config
        x = Tensor(self._x_train[idx])
        y = self.splits.train.labels[idx]
        lr_m = lr_at(cfg, self.epoch, cfg.lr_model)
        self.opt_model.lr = lr_m
        self.counts["forward"] += 1
        features = self.model.features(x)
        if cfg.loss == "ncmi":
            self.opt_xi.lr = lr_at(cfg, self.epoch, cfg.lr_centroids)
            zp = self.head_inputs(features, update_center=True)
            p = _HEAD[cfg.head](zp)
            loss, br = batch_ncmi_loss(p, y, self.bank.q_tensor())
            if loss is None:
                if br.reason == "single_class" and not cfg.skip_single_class_batches:
                    raise SingleClassBatchError(f"single-class batch at step {self.step}")
                self.skipped += 1
                return br
        else:
            logits = self.model.logits(features)
            alpha = cfg.label_smoothing if cfg.loss == "ce_ls" else 0.0
            target = np.eye(self.n_classes)[y]
            if alpha:
                target = (1.0 - alpha) * target + alpha / self.n_classes
            loss = -(logits.log_softmax() * Tensor(target)).sum().scale(1.0 / len(y))
            br = BatchLossBreakdown(float("nan"), float("nan"), loss.item(), 0)
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(self.step, br)
        self.opt_model.zero_grad()
        if self.opt_xi:
            self.opt_xi.zero_grad()
        loss.backward()
        self.counts["backward"] += 1
        self.opt_model.step()
        if self.opt_xi:
            self.opt_xi.step()
        return br

    def _advance(self) -> None:
        if self.batch_in_epoch == 0:
            self._order = self.epoch_order(self.epoch)
        bs = self.config.batch_size
        idx = self._order[self.batch_in_epoch * bs:(self.batch_in_epoch + 1) * bs]
        br = self.train_step(idx)
        self.step += 1
        self.batch_rows.append(br.to_record(self.step))
        self._window.append(br)
        self.batch_in_epoch += 1
        if self.batch_in_epoch == self.n_batches():
            self.batch_in_epoch = 0
            self.epoch += 1

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.n_batches()

    def run(self, max_steps: int | None = None) -> None:
        """Train to the configured budget (or ``max_steps`` more steps)."""
        if self.step == 0 and not self.metric_rows:
            if self.bank is not None and self.config.centroid_init == "refresh":
                _, p = self.outputs(self._x_train)
                centroid_greedy_refresh(p, self.splits.train.labels, self.bank)
            self.log_eval()
        target = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        if self.batch_in_epoch:
            self._order = self.epoch_order(self.epoch)
        while self.step < target:
            self._advance()
            if self.config.eval_every and self.step % self.config.eval_every == 0:
                self.log_eval()
        if self.step == self.total_steps and self.metric_rows[-1]["step"] != self.step:
            self.log_eval()

    # -- evaluation -------------------------------------------------------------
    def outputs(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(head inputs, simplex outputs) without graph recording."""
        with no_grad():
            f = self.model.features(Tensor(x))
            if self.config.loss == "ncmi":
                zp = self.head_inputs(f)
                return zp.data, _HEAD[self.config.head](zp.data)
            logits = self.model.logits(f).data
            return f.data, softmax(logits)

    def log_eval(self) -> dict:
        cfg = self.config
        _, p_train = self.outputs(self._x_train)
        _, p_test = self.outputs(self._x_test)
        try:
            report = metrics.ncmi(p_train, self.splits.train.labels, self.n_classes)
        except metrics.EmptyClassError as exc:
            # Monitoring must not abort a run; the NCMI columns stay empty.
            log.warning("step %d: %s", self.step, exc)
            report = None
        test_y = self.splits.test.labels
        acc_cc = acc_lp = None
        if cfg.loss == "ncmi":
            acc_cc = float(np.mean(classify_cc(p_test, self.bank.q) == test_y))
        else:
            if report is not None:
                acc_cc = float(np.mean(classify_cc(p_test, report.centroids.centroids) == test_y))
            acc_lp = float(np.mean(np.argmax(p_test, axis=1) == test_y))
        win = [b for b in self._window if not b.skipped]
        mean = (lambda attr: float(np.mean([getattr(b, attr) for b in win]))) if win else (lambda a: None)
        row = {"step": self.step, "epoch": self.epoch, "lr": lr_at(cfg, self.epoch),
               "loss": mean("loss"),
               "numerator": mean("numerator") if cfg.loss == "ncmi" else None,
               "denominator": mean("denominator") if cfg.loss == "ncmi" else None,
               "cmi": report.cmi if report else None,
               "gamma": report.gamma if report else None,
               "ncmi": report.ncmi if report and report.defined else None,
               "acc_cc": acc_cc, "acc_lp": acc_lp, "skipped_batches": self.skipped}
        self._window = []
        self.metric_rows.append(row)
        log.debug("eval %s", row)
        return row

    def evaluate(self, protocol: str = "both") -> dict:
        """Final evaluation on the test split.

        ``cc`` reports both the learned centroids and recomputed train-set
        centroids; ``lp`` fits a linear probe on the frozen head inputs.
        """
        out: dict = {}
        c = self.n_classes
        zp_tr, p_tr = self.outputs(self._x_train)
        zp_te, p_te = self.outputs(self._x_test)
        y_tr, y_te = self.splits.train.labels, self.splits.test.labels
        if protocol in ("cc", "both"):
            train_cents = metrics.class_centroids(p_tr, y_tr, c).centroids
            out["cc_train_centroids"] = evaluate_cc(p_te, y_te, train_cents, c).to_dict()
            if self.bank is not None:
                out["cc_learned"] = evaluate_cc(p_te, y_te, self.bank.q, c).to_dict()
            else:
                out["argmax"] = evaluate_predictions(y_te, np.argmax(p_te, axis=1), c,
                                                     "argmax").to_dict()
        if protocol in ("lp", "both"):
            _, res = linear_probe(zp_tr, y_tr, zp_te, y_te, c, self.config.probe_config())
            out["lp"] = res.to_dict()
        report = metrics.ncmi(p_tr, y_tr, c)
        out["train_ncmi"] = report.to_record()
        return out

    # -- persistence ----------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        arrays = {f"model/{k}": v.copy() for k, v in self.model.state_arrays().items()}
        for i, v in enumerate(self.opt_model.velocity):
            arrays[f"velocity_model/{i}"] = v.copy()
        if self.bank is not None:
            arrays["bank/xi"] = self.bank.xi.data.copy()
            arrays["velocity_xi/0"] = self.opt_xi.velocity[0].copy()
            arrays["center/c"] = self.center.center.copy()
        state = {"step": self.step, "epoch": self.epoch, "batch_in_epoch": self.batch_in_epoch,
                 "skipped": self.skipped, "n_classes": self.n_classes,
                 "center_updates": self.center.updates if self.center else 0}
        return Checkpoint(self.config.to_dict(), self.model.spec.to_dict(), state, arrays)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, splits: DatasetSplits) -> "Trainer":
        config = TrainConfig.from_dict(ckpt.config)
        if splits.train.n_classes != ckpt.state["n_classes"]:
            raise ValueError(f"checkpoint has {ckpt.state['n_classes']} classes, "
                             f"data has {splits.train.n_classes}")
        trainer = cls(config, splits, ModelSpec(**ckpt.model_spec))
        trainer.model.load_arrays({k[len("model/"):]: v for k, v in ckpt.arrays.items()
                                   if k.startswith("model/")})
        for i, v in enumerate(trainer.opt_model.velocity):
            v[...] = ckpt.arrays[f"velocity_model/{i}"]
        if trainer.bank is not None:
            trainer.bank.xi.data[...] = ckpt.arrays["bank/xi"]
            trainer.opt_xi.velocity[0][...] = ckpt.arrays["velocity_xi/0"]
            trainer.center.center = ckpt.arrays["center/c"].copy()
            trainer.center.updates = ckpt.state["center_updates"]
        for key in ("step", "epoch", "batch_in_epoch", "skipped"):
            setattr(trainer, key, ckpt.state[key])
        return trainer


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    batches: list[dict]
    trainer: Trainer


def train(config: TrainConfig, splits: DatasetSplits, model_spec: ModelSpec | None = None) -> TrainResult:
    trainer = Trainer(config, splits, model_spec)
    trainer.run()
    return TrainResult(trainer.checkpoint(), trainer.metric_rows, trainer.batch_rows, trainer)


def train_ce(config: TrainConfig, splits: DatasetSplits, model_spec: ModelSpec | None = None) -> TrainResult:
    if config.loss == "ncmi":
        config = TrainConfig.from_dict({**config.to_dict(), "loss": "ce"})
    return train(config, splits, model_spec)
