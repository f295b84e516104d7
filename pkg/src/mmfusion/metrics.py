"""Confusion accounting, macro-averaged metrics and the two experiment
harnesses (branch ablation and unimodal baselines)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import clone

from .errors import LabelOutOfRange, LengthMismatch
from .fusion import BRANCHES

CSV_HEADER = "model,precision,accuracy,f1,recall"
ABLATIONS = (
    ("FULL", BRANCHES),
    ("NO_CNN", ("rnn", "vit", "fcn")),
    ("NO_RNN", ("cnn", "vit", "fcn")),
    ("NO_VIT", ("cnn", "rnn", "fcn")),
)
BASELINES = (("CNN", "cnn"), ("RNN", "rnn"), ("Transformer", "vit"))


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest counts, one entry per class."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def precision(self) -> np.ndarray:
        return _ratio(self.tp, self.tp + self.fp)

    def recall(self) -> np.ndarray:
        return _ratio(self.tp, self.tp + self.fn)

    def accuracy(self) -> np.ndarray:
        """Per-class one-vs-rest accuracy."""
        return _ratio(self.tp + self.tn, self.tp + self.fp + self.fn + self.tn)


def _ratio(num, den) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def confusion(predictions, truths, n_classes: int) -> ConfusionCounts:
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(truths, dtype=np.int64).ravel()
    if len(pred) != len(true):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(true)} truths")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelOutOfRange(f"label outside [0, {n_classes})")
    table = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(table, (true, pred), 1)
    tp = np.diag(table).copy()
    fp = table.sum(axis=0) - tp
    fn = table.sum(axis=1) - tp
    tn = len(pred) - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass(frozen=True)
class MetricsRow:
    model_name: str
    precision: float
    accuracy: float
    f1: float
    recall: float

    def csv_line(self) -> str:
        return (f"{self.model_name},{self.precision:.4f},{self.accuracy:.4f},"
                f"{self.f1:.4f},{self.recall:.4f}")


def compute_metrics(counts: ConfusionCounts, model_name: str = "") -> MetricsRow:
    precision = float(counts.precision().mean())
    recall = float(counts.recall().mean())
    total = counts.total
    accuracy = float(counts.tp.sum() / total) if total else 0.0
    denom = precision + recall
    f1 = 2 * precision * recall / denom if denom > 0 else 0.0
    return MetricsRow(model_name, precision, accuracy, f1, recall)


def evaluate(estimator, samples, model_name: str = "") -> MetricsRow:
    truths = np.array([s.label for s in samples])
    preds = estimator.predict(samples)
    return compute_metrics(confusion(preds, truths, len(estimator.classes_)), model_name)


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    return "\n".join([CSV_HEADER, *(r.csv_line() for r in rows)]) + "\n"


def _fit_eval(estimator, splits, name):
    train, val, test = splits
    estimator.fit(train, eval_set=val)
    return evaluate(estimator, test, name)


def run_ablation(splits, base_estimator) -> list[MetricsRow]:
    """Retrain ``base_estimator`` with each named branch removed in turn.

    ``splits`` is ``(train, val, test)``. The structured-data branch stays on
    in every row. All four models share the base seed, and parameters are
    drawn per name, so overlapping branches start from identical weights.
    """
    return [_fit_eval(clone(base_estimator).set_params(branches=branches), splits, name)
            for name, branches in ABLATIONS]


def compare_baselines(splits, base_estimator) -> list[MetricsRow]:
    """Unimodal CNN, RNN and ViT models followed by the fused model ("Our")."""
    rows = [_fit_eval(clone(base_estimator).set_params(branches=(branch,), fusion_mode="late"),
                      splits, name)
            for name, branch in BASELINES]
    rows.append(_fit_eval(clone(base_estimator), splits, "Our"))
    return rows
