"""Command-line front end.

Exit codes: 0 success, 1 parameter or contract error, 2 numerical failure.
Every command writes its results as CSV/JSON; stdout only mirrors them.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__, metrics
from .autodiff import ContractError
from .data import gen_gaussian_blobs, gen_rings, load_dir, write_csv
from .evaluator import correlate_ncmi_accuracy, write_correlation_csv
from .objective import grid_minimizer_2d, numerator_stationarity, theorem1_residual
from .trainer import (BATCH_COLUMNS, METRIC_COLUMNS, CheckpointError, TrainConfig, Trainer,
                      TrainingDiverged, load_checkpoint, save_checkpoint, write_rows_csv)

log = logging.getLogger("ncmi")

EXIT_OK, EXIT_PARAM, EXIT_NUMERIC = 0, 1, 2
IDENTITY_TOL = 1e-9
STATIONARITY_TOL = 1e-6
GRID_RESOLUTION = 1e-3


class ParameterError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    started: str = field(default_factory=lambda: _now())
    finished: str | None = None
    artifacts: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, directory) -> None:
        self.finished = _now()
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@contextlib.contextmanager
def staged_dir(out, force: bool):
    """Yield a scratch directory that replaces ``out`` only if the body succeeds."""
    out = os.path.abspath(out)
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise ParameterError(f"{out} exists and is not empty; pass --force to replace it")
    parent = os.path.dirname(out)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=f".{os.path.basename(out)}-")
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if os.path.exists(out):
        old = tempfile.mkdtemp(dir=parent, prefix=f".{os.path.basename(out)}-old-")
        os.rmdir(old)
        os.rename(out, old)
    os.rename(tmp, out)
    if old:
        shutil.rmtree(old, ignore_errors=True)


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _emit(payload) -> None:
    print(json.dumps(payload, sort_keys=True))


# -- gen -------------------------------------------------------------------------

def cmd_gen(args) -> int:
    try:
        if args.kind == "blobs":
            splits = gen_gaussian_blobs(args.per_class, args.classes, args.dim, args.separation,
                                        args.spread, args.seed)
        else:
            splits = gen_rings(args.per_class, args.classes, args.seed, args.noise)
    except ValueError as exc:
        raise ParameterError(str(exc)) from None
    params = {k: getattr(args, k) for k in ("kind", "classes", "dim", "per_class", "separation",
                                            "spread", "noise")}
    with staged_dir(args.out, args.force) as tmp:
        write_csv(os.path.join(tmp, "train.csv"), splits.train)
        write_csv(os.path.join(tmp, "test.csv"), splits.test)
        manifest = RunManifest("gen", params, args.seed)
        manifest.artifacts = {"train": os.path.join(args.out, "train.csv"),
                              "test": os.path.join(args.out, "test.csv")}
        manifest.write(tmp)
    _emit({"train_rows": len(splits.train), "test_rows": len(splits.test), "out": args.out})
    return EXIT_OK


# -- train -----------------------------------------------------------------------

def _load_config(path, seed) -> TrainConfig:
    try:
        raw = {}
        if path:
            with open(path) as fh:
                raw = json.load(fh)
            if not isinstance(raw, dict):
                raise ValueError("config must be a JSON object")
        if seed is not None:
            raw["seed"] = seed
        return TrainConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise ParameterError(f"config: {exc}") from None


def _load_data(path):
    if not os.path.isdir(path):
        raise ParameterError(f"data directory {path} not found")
    return load_dir(path)


def write_run(directory, trainer: Trainer) -> dict:
    """Checkpoint plus metric and batch logs; returns artifact paths."""
    paths = {"checkpoint": os.path.join(directory, "checkpoint.ckpt"),
             "metrics": os.path.join(directory, "metrics.csv"),
             "batches": os.path.join(directory, "batches.csv")}
    save_checkpoint(paths["checkpoint"], trainer.checkpoint())
    write_rows_csv(paths["metrics"], METRIC_COLUMNS, trainer.metric_rows)
    write_rows_csv(paths["batches"], BATCH_COLUMNS, trainer.batch_rows)
    return paths


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    splits = _load_data(args.data)
    with staged_dir(args.out, args.force) as tmp:
        manifest = RunManifest("train", config.to_dict(), config.seed)
        trainer = Trainer(config, splits)
        trainer.run()
        paths = write_run(tmp, trainer)
        manifest.artifacts = {k: os.path.join(args.out, os.path.basename(v)) for k, v in paths.items()}
        manifest.write(tmp)
    _emit({"final": trainer.metric_rows[-1], "steps": trainer.step, "out": args.out})
    return EXIT_OK


# -- eval ------------------------------------------------------------------------

def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise ParameterError(f"checkpoint {args.checkpoint} not found") from None
    splits = _load_data(args.data)
    trainer = Trainer.from_checkpoint(ckpt, splits)
    result = trainer.evaluate(args.protocol)
    result["protocol"] = args.protocol
    result["checkpoint"] = args.checkpoint
    result["step"] = trainer.step
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                   f"eval_{args.protocol}.json")
    _write_json(out, _jsonable(result))
    _emit({"out": out, **{k: v["top1"] for k, v in result.items()
                          if isinstance(v, dict) and "top1" in v}})
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


# -- verify-theorem1 -------------------------------------------------------------

def random_instance(n: int, c: int, m: int, seed: int):
    """Random probability rows with every class present."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, m))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n) % c)
    return probs, labels


def verify_theorem1(n: int, c: int, m: int, seed: int) -> dict:
    if c < 2:
        raise ParameterError("need at least 2 classes (Gamma is undefined otherwise)")
    if n < 2 * c:
        raise ParameterError(f"need at least {2 * c} samples for {c} classes, got {n}")
    if m < 2:
        raise ParameterError("probability dimension must be at least 2")
    probs, labels = random_instance(n, c, m, seed)
    q = metrics.class_centroids(probs, labels, c).centroids
    report = {"samples": n, "classes": c, "dim": m, "seed": seed,
              "residual": theorem1_residual(probs, labels, q), "residual_tol": IDENTITY_TOL}
    if m == 2:
        best = grid_minimizer_2d(probs, labels, c, GRID_RESOLUTION)
        err = float(np.abs(best - q).max())
        report.update(check="grid", grid_error=err, grid_tol=GRID_RESOLUTION,
                      minimizer_ok=err <= GRID_RESOLUTION)
    else:
        norm = numerator_stationarity(probs, labels, q)
        report.update(check="stationarity", gradient_norm=norm, gradient_tol=STATIONARITY_TOL,
                      minimizer_ok=norm < STATIONARITY_TOL)
    report["passed"] = bool(report["residual"] < IDENTITY_TOL and report["minimizer_ok"])
    return report


def cmd_verify_theorem1(args) -> int:
    report = verify_theorem1(args.samples, args.classes, args.dim, args.seed)
    if args.out:
        _write_json(args.out, _jsonable(report))
    _emit(_jsonable(report))
    if not report["passed"]:
        raise NumericalFailure(f"identity check failed: residual {report['residual']:.3e}")
    return EXIT_OK


# -- ablate ----------------------------------------------------------------------

ABLATION_GRID = [("nsf", True), ("nsf", False), ("softmax", True), ("softmax", False)]
ABLATION_COLUMNS = ["head", "centering", "acc_cc", "final_ncmi"]


def run_ablation(base: TrainConfig, splits, directory=None) -> list[dict]:
    """Train the four head/centering variants with an identical budget."""
    rows = []
    for head, centering in ABLATION_GRID:
        config = TrainConfig.from_dict({**base.to_dict(), "head": head, "centering": centering,
                                        "loss": "ncmi"})
        trainer = Trainer(config, splits)
        try:
            trainer.run()
            final = trainer.metric_rows[-1]
            acc, ncmi = final["acc_cc"], final["ncmi"]
        except TrainingDiverged as exc:
            log.warning("%s/%s diverged: %s", head, centering, exc)
            acc, ncmi = None, None
        rows.append({"head": head, "centering": int(centering), "acc_cc": acc, "final_ncmi": ncmi})
        if directory is not None:
            tag = f"{head}_{'centered' if centering else 'plain'}"
            zp, _ = trainer.outputs(trainer._x_test)
            with open(os.path.join(directory, f"features_{tag}.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"f{i}" for i in range(zp.shape[1])] + ["label"])
                for vec, label in zip(zp, splits.test.labels):
                    w.writerow([repr(float(v)) for v in vec] + [int(label)])
            center = trainer.center.center if trainer.center is not None else np.zeros(zp.shape[1])
            with open(os.path.join(directory, f"center_{tag}.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"f{i}" for i in range(len(center))])
                w.writerow([repr(float(v)) for v in center])
    return rows


def cmd_ablate(args) -> int:
    base = _load_config(args.config, args.seed)
    splits = _load_data(args.data)
    with staged_dir(args.out, args.force) as tmp:
        manifest = RunManifest("ablate", base.to_dict(), base.seed)
        rows = run_ablation(base, splits, tmp)
        write_rows_csv(os.path.join(tmp, "ablation.csv"), ABLATION_COLUMNS, rows)
        manifest.artifacts = {"ablation": os.path.join(args.out, "ablation.csv")}
        manifest.write(tmp)
    _emit({"rows": _jsonable(rows), "out": args.out})
    return EXIT_OK


# -- correlate -------------------------------------------------------------------

def read_metric_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def correlation_points(rows) -> list[tuple[str, int, float, float]]:
    """(checkpoint, step, ncmi, acc_cc) for every evaluation with both values."""
    points = []
    for i, row in enumerate(rows):
        if row.get("ncmi") and row.get("acc_cc"):
            points.append((f"eval-{i}", int(row["step"]), float(row["ncmi"]), float(row["acc_cc"])))
    return points


def cmd_correlate(args) -> int:
    metrics_path = os.path.join(args.run, "metrics.csv")
    if not os.path.exists(metrics_path):
        raise ParameterError(f"{metrics_path} not found")
    points = correlation_points(read_metric_rows(metrics_path))
    try:
        report = correlate_ncmi_accuracy([(p[2], p[3]) for p in points])
    except ValueError as exc:
        raise ParameterError(str(exc)) from None
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    write_correlation_csv(os.path.join(out, "correlation.csv"), points)
    _write_json(os.path.join(out, "correlation.json"), _jsonable(report.to_dict()))
    _emit(_jsonable(report.to_dict()))
    if not report.defined:
        raise NumericalFailure("Pearson r is undefined (constant NCMI or accuracy)")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncmi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("kind", choices=["blobs", "rings"])
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--dim", type=int, default=10)
    g.add_argument("--per-class", type=int, default=400)
    g.add_argument("--separation", type=float, default=8.0)
    g.add_argument("--spread", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.1, help="radial noise for rings")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model (ncmi or ce) and write logs + checkpoint")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=["cc", "lp", "both"], default="both")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify-theorem1", help="check batch surrogate against exact NCMI")
    v.add_argument("--samples", type=int, default=64)
    v.add_argument("--classes", type=int, default=4)
    v.add_argument("--dim", type=int, default=8)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify_theorem1)

    a = sub.add_parser("ablate", help="train the head x centering grid")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("correlate", help="Pearson r between NCMI and accuracy over a run")
    c.add_argument("--run", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_correlate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_PARAM
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingDiverged, NumericalFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParameterError, ContractError, CheckpointError, ValueError, KeyError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAM


if __name__ == "__main__":
    sys.exit(main())
