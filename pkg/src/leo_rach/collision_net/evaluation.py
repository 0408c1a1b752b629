"""Classifier evaluation: accuracy, detection error rates, confusion matrix."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import WindowDataset
from .model import Network


@dataclass
class ConfusionMatrix:
    """``q[pred, true]``: share of true-class samples predicted as each class.

    Columns for classes absent from the evaluation set are NaN and listed
    in ``undefined``.
    """

    q: np.ndarray
    counts: np.ndarray
    undefined: list[int] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, pred: np.ndarray, true: np.ndarray, n_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (pred, true), 1)
        col = counts.sum(axis=0)
        q = np.full(counts.shape, np.nan)
        ok = col > 0
        q[:, ok] = counts[:, ok] / col[ok]
        return cls(q, counts, [int(k) for k in np.flatnonzero(~ok)])

    @classmethod
    def identity(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.eye(n_classes), np.eye(n_classes, dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.q.shape[0]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pred\\true", *range(self.n_classes)])
            for k_hat in range(self.n_classes):
                w.writerow([k_hat, *(_fmt(v) for v in self.q[k_hat])])

    @classmethod
    def from_csv(cls, path: str | Path) -> "ConfusionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        q = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError(f"{path}: confusion matrix must be square, got {q.shape}")
        undefined = [int(k) for k in np.flatnonzero(np.isnan(q).any(axis=0))]
        return cls(q, np.zeros(q.shape, dtype=np.int64), undefined)


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else repr(float(v))


@dataclass
class EvalReport:
    accuracy: float
    confusion: ConfusionMatrix
    misdetection_rate: float
    false_alarm_rate: float
    n_samples: int


def predict(net: Network, x: np.ndarray, batch: int = 4096) -> np.ndarray:
    """Argmax class per window; ties go to the lowest class index."""
    out = [np.argmax(net.logits(x[i : i + batch]), axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def detection_rates(pred: np.ndarray, true: np.ndarray) -> tuple[float, float]:
    """(P[pred = 0 | true > 0], P[pred > 0 | true = 0]); NaN when undefined."""
    busy = true > 0
    idle = ~busy
    md = float(np.mean(pred[busy] == 0)) if busy.any() else float("nan")
    fa = float(np.mean(pred[idle] > 0)) if idle.any() else float("nan")
    return md, fa


def evaluate(net: Network, testset: WindowDataset) -> EvalReport:
    if len(testset) == 0:
        raise ValueError("test set is empty")
    if (testset.n_ant, testset.n_cs) != (net.arch.n_ant, net.arch.n_cs) or testset.k_max != net.arch.k_max:
        raise ValueError(
            f"dimension mismatch: test set (n_ant={testset.n_ant}, n_cs={testset.n_cs}, K={testset.k_max}) "
            f"vs weights (n_ant={net.arch.n_ant}, n_cs={net.arch.n_cs}, K={net.arch.k_max})"
        )
    pred = predict(net, testset.x)
    true = testset.labels
    md, fa = detection_rates(pred, true)
    return EvalReport(
        accuracy=float(np.mean(pred == true)),
        confusion=ConfusionMatrix.from_predictions(pred, true, net.arch.n_classes),
        misdetection_rate=md,
        false_alarm_rate=fa,
        n_samples=len(testset),
    )


def evaluate_by_snr(net: Network, testset: WindowDataset) -> dict[float, EvalReport]:
    return {float(s): evaluate(net, testset.where_snr(s)) for s in np.unique(testset.snr_db)}
