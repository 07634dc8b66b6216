"""Task metrics and per-group gradient-norm telemetry."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, UsageError


def _pair(preds, labels, what: str) -> tuple[np.ndarray, np.ndarray]:
    p, y = np.asarray(preds), np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise UsageError(f"{what}: preds {p.shape} and labels {y.shape} must be equal-length 1-d sequences")
    if p.size == 0:
        raise UsageError(f"{what}: empty input")
    return p, y


def argmax_predictions(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def accuracy(preds, labels) -> float:
    p, y = _pair(preds, labels, "accuracy")
    return int((p == y).sum()) / p.size


def confusion(preds, labels, positive_class: int = 1) -> dict[str, int]:
    p, y = _pair(preds, labels, "confusion")
    pp, yp = p == positive_class, y == positive_class
    return {
        "tp": int((pp & yp).sum()),
        "fp": int((pp & ~yp).sum()),
        "fn": int((~pp & yp).sum()),
        "tn": int((~pp & ~yp).sum()),
    }


def f1_binary(preds, labels, positive_class: int = 1) -> float:
    """2TP / (2TP + FP + FN), and 0.0 when that denominator is 0."""
    c = confusion(preds, labels, positive_class)
    denom = 2 * c["tp"] + c["fp"] + c["fn"]
    return 2 * c["tp"] / denom if denom else 0.0


def matthews_corr(preds, labels, positive_class: int = 1) -> float:
    """Matthews correlation; 0.0 if any marginal of the confusion table is empty."""
    c = confusion(preds, labels, positive_class)
    tp, tn, fp, fn = c["tp"], c["tn"], c["fp"], c["fn"]
    factors = (tp + fp, tp + fn, tn + fp, tn + fn)
    if 0 in factors:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(math.prod(float(f) for f in factors))


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x, y) -> float:
    x, y = _pair(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), "pearson")
    if x.size < 2:
        raise UsageError("pearson: need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DataError("correlation undefined for constant input")
    # one sqrt of the product: exact +-1 when y is x or -x
    return float(np.clip(float(dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def spearman(x, y) -> float:
    x, y = _pair(x, y, "spearman")
    return pearson(average_ranks(x), average_ranks(y))


def pearson_spearman(preds, labels) -> tuple[float, float]:
    return pearson(preds, labels), spearman(preds, labels)


METRICS = ("accuracy", "f1", "mcc", "pearson", "spearman")


@dataclass
class MetricReport:
    metrics: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]


def compute_metrics(preds, labels, metric_set: Sequence[str]) -> MetricReport:
    unknown = [m for m in metric_set if m not in METRICS]
    if unknown:
        raise UsageError(f"unknown metrics {unknown}; available: {METRICS}")
    out: dict[str, float] = {}
    counts: dict[str, int] = {"n_examples": int(np.asarray(preds).size)}
    for m in metric_set:
        if m == "accuracy":
            out[m] = accuracy(preds, labels)
            counts["n_correct"] = int((np.asarray(preds) == np.asarray(labels)).sum())
        elif m == "f1":
            out[m] = f1_binary(preds, labels)
            counts.update(confusion(preds, labels))
        elif m == "mcc":
            out[m] = matthews_corr(preds, labels)
            counts.update(confusion(preds, labels))
        elif m == "pearson":
            out[m] = pearson(preds, labels)
        elif m == "spearman":
            out[m] = spearman(preds, labels)
    return MetricReport(out, counts)


def write_predictions(path, example_ids, preds, labels) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "pred", "label"])
        for row in zip(example_ids, np.asarray(preds).tolist(), np.asarray(labels).tolist()):
            w.writerow([row[0], repr(row[1]), repr(row[2])])


def read_predictions(path) -> tuple[list[str], list, list]:
    ids, preds, labels = [], [], []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["example_id"])
            preds.append(_num(row["pred"]))
            labels.append(_num(row["label"]))
    return ids, preds, labels


def _num(s: str):
    try:
        return int(s)
    except ValueError:
        return float(s)


# -- gradient telemetry --------------------------------------------------------------


@dataclass
class GradNormSnapshot:
    iteration: int
    norms: dict[str, float]

    def total(self) -> float:
        """Norm of the concatenation of every group, from the group norms."""
        return math.sqrt(sum(v * v for v in self.norms.values()))


def sum_of_squares(arrays) -> float:
    return float(sum(float(np.dot(a.ravel(), a.ravel())) for a in arrays))


def grad_norm_by_group(model, iteration: int = 0) -> GradNormSnapshot:
    """L2 norm of the concatenated gradients of each parameter group (0 where absent)."""
    norms = {}
    for name, g in model.groups.items():
        grads = [p.grad for p in g.params if p.grad is not None]
        norms[name] = math.sqrt(sum_of_squares(grads)) if grads else 0.0
    return GradNormSnapshot(iteration, norms)
