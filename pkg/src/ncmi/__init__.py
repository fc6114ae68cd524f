"""Normalized conditional mutual information (NCMI) as a training objective.

A small numpy stack: reverse-mode autodiff, simplex operations, exact NCMI
metrics, the mini-batch NCMI surrogate with learnable centroids, a training
loop with checkpoints, evaluation protocols and a CLI.
"""

__version__ = "0.1.0"

from .autodiff import SGD, Tensor, no_grad
from .data import DatasetSplits, LabeledDataset, gen_gaussian_blobs, gen_rings, load_dir
from .evaluator import classify_cc, correlate_ncmi_accuracy, linear_probe
from .metrics import class_centroids, cmi, gamma, ncmi
from .objective import CentroidBank, batch_ncmi_loss
from .simplex import kl_divergence, nsf, softmax
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint, train, train_ce

__all__ = [
    "SGD", "Tensor", "no_grad", "DatasetSplits", "LabeledDataset", "gen_gaussian_blobs",
    "gen_rings", "load_dir", "classify_cc", "correlate_ncmi_accuracy", "linear_probe",
    "class_centroids", "cmi", "gamma", "ncmi", "CentroidBank", "batch_ncmi_loss",
    "kl_divergence", "nsf", "softmax", "TrainConfig", "Trainer", "load_checkpoint",
    "save_checkpoint", "train", "train_ce",
]
