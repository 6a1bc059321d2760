"""GLUE-style metrics and the leaderboard aggregation rule."""

from __future__ import annotations

import math
import warnings
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

METRICS = ("accuracy", "f1", "matthews", "pearson", "spearman")


class DegenerateMetricWarning(RuntimeWarning):
    """A metric hit a zero denominator and was reported as 0."""


class MissingMetricError(KeyError):
    pass


def _pair(preds, golds) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(preds), np.asarray(golds)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    if p.size < 1:
        raise ValueError("need at least one prediction")
    return p, g


def accuracy(preds, golds) -> float:
    p, g = _pair(preds, golds)
    return float(np.mean(p == g))


def _confusion(p, g, positive) -> tuple[int, int, int, int]:
    tp = int(np.sum((p == positive) & (g == positive)))
    fp = int(np.sum((p == positive) & (g != positive)))
    fn = int(np.sum((p != positive) & (g == positive)))
    tn = int(np.sum((p != positive) & (g != positive)))
    return tp, fp, fn, tn


def f1(preds, golds, positive_class=1) -> float:
    p, g = _pair(preds, golds)
    tp, fp, fn, _ = _confusion(p, g, positive_class)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        warnings.warn("f1: precision + recall is 0", DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return 2 * precision * recall / (precision + recall)


def matthews(preds, golds) -> float:
    """Matthews correlation; the binary confusion formula for two classes,
    its multiclass generalisation otherwise."""
    p, g = _pair(preds, golds)
    classes = np.unique(np.concatenate([p, g]))
    if len(classes) <= 2:
        positive = classes[-1]
        tp, fp, fn, tn = _confusion(p, g, positive)
        denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        if denom == 0:
            warnings.warn("matthews: zero denominator", DegenerateMetricWarning, stacklevel=2)
            return 0.0
        return (tp * tn - fp * fn) / denom
    index = {c: i for i, c in enumerate(classes)}
    C = np.zeros((len(classes), len(classes)))
    for a, b in zip(g, p):
        C[index[a], index[b]] += 1
    t = C.sum(axis=1)
    q = C.sum(axis=0)
    n = C.sum()
    c = np.trace(C)
    denom = math.sqrt((n * n - q @ q) * (n * n - t @ t))
    if denom == 0:
        warnings.warn("matthews: zero denominator", DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return float((c * n - t @ q) / denom)


def pearson(x, y) -> float:
    a, b = _pair(x, y)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if a.size < 2:
        raise ValueError("pearson needs at least two points")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0:
        warnings.warn("pearson: constant input", DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return float(da @ db) / denom


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    a, b = _pair(x, y)
    return pearson(rankdata(a, method="average"), rankdata(b, method="average"))


def compute_metrics(names: Sequence[str], preds, golds, positive_class=None) -> dict:
    """Metric bundle with stable keys; degenerate cases are listed under ``flags``."""
    bundle: dict = {}
    flags: list[str] = []
    for name in names:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateMetricWarning)
            if name == "accuracy":
                value = accuracy(preds, golds)
            elif name == "f1":
                value = f1(preds, golds, 1 if positive_class is None else positive_class)
            elif name == "matthews":
                value = matthews(preds, golds)
            elif name == "pearson":
                value = pearson(preds, golds)
            elif name == "spearman":
                value = spearman(preds, golds)
            else:
                raise ValueError(f"unknown metric {name!r}")
        if any(issubclass(w.category, DegenerateMetricWarning) for w in caught):
            flags.append(name)
        bundle[name] = float(value)
    if flags:
        bundle["flags"] = flags
    return bundle


def task_score(bundle: Mapping[str, float], metrics: Sequence[str]) -> float:
    missing = [m for m in metrics if m not in bundle]
    if missing:
        raise MissingMetricError(f"missing metric(s) {missing}")
    return float(np.mean([bundle[m] for m in metrics]))


def aggregate(bundles: Mapping[str, Mapping[str, float]],
              declared: Mapping[str, Sequence[str]] | None = None) -> dict:
    """Average metrics within each task first, then average tasks unweighted."""
    per_task = {}
    for task, bundle in bundles.items():
        names = list(declared[task]) if declared is not None else [k for k in bundle if k in METRICS]
        if not names:
            raise MissingMetricError(f"task {task!r} has no metrics")
        per_task[task] = task_score(bundle, names)
    if not per_task:
        raise ValueError("nothing to aggregate")
    return {"per_task": per_task, "average": float(np.mean(list(per_task.values())))}
