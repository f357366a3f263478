"""Accuracy split by ground-truth alignment, selection FPR, and feature export."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .datagen import LabeledDataset, read_table, write_table
from .nncore import DimensionError, Mlp, forward, hidden_features


@dataclass
class EvalReport:
    overall_acc: Optional[float]
    aligned_acc: Optional[float]
    conflicting_acc: Optional[float]  # None when the group is empty
    n: int
    n_aligned: int
    n_conflicting: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _group_acc(correct: np.ndarray) -> Optional[float]:
    return float(correct.mean()) if correct.size else None


def report_from_predictions(pred, labels, aligned_flags) -> EvalReport:
    pred, labels = np.asarray(pred), np.asarray(labels)
    flags = np.asarray(aligned_flags, dtype=bool)
    correct = pred == labels
    return EvalReport(_group_acc(correct), _group_acc(correct[flags]), _group_acc(correct[~flags]),
                      len(labels), int(flags.sum()), int((~flags).sum()))


def accuracy(model: Mlp, dataset: LabeledDataset, batch_size: int = 4096) -> EvalReport:
    """Argmax accuracy overall and on aligned / conflicting samples."""
    if dataset.features.shape[1] != model.layer_dims[0]:
        raise DimensionError(f"model expects {model.layer_dims[0]} inputs, dataset has {dataset.features.shape[1]}")
    pred = np.empty(len(dataset), dtype=np.int64)
    for s in range(0, len(dataset), batch_size):
        pred[s:s + batch_size] = forward(model, dataset.features[s:s + batch_size]).argmax(axis=1)
    return report_from_predictions(pred, dataset.labels, dataset.aligned_flags)


def selection_fpr(selected_indices, aligned_flags) -> float:
    """Fraction of ground-truth aligned samples that were selected as
    likely conflicting; 0 when there are no aligned samples."""
    flags = np.asarray(aligned_flags, dtype=bool)
    n_aligned = int(flags.sum())
    if n_aligned == 0:
        return 0.0
    sel = np.unique(np.asarray(selected_indices, dtype=np.int64))
    return int(flags[sel].sum()) / n_aligned


@dataclass(eq=False)
class FeatureTable:
    features: np.ndarray
    labels: np.ndarray
    aligned_flags: np.ndarray
    num_classes: int
    meta: dict


def export_features(model: Mlp, dataset: LabeledDataset, path) -> FeatureTable:
    """Write last-hidden-layer activations with labels and flags as a DBFT file."""
    feats = hidden_features(model, dataset.features) if len(dataset) else np.zeros((0, model.layer_dims[-2]))
    meta = {"layer_dims": model.layer_dims, "source_spec": dataset.spec.to_dict()}
    write_table(path, b"DBFT", feats, dataset.labels, dataset.aligned_flags, dataset.num_classes, meta)
    return FeatureTable(feats.astype(np.float32), dataset.labels, dataset.aligned_flags, dataset.num_classes, meta)


def read_features(path) -> FeatureTable:
    return FeatureTable(*read_table(path, b"DBFT"))
