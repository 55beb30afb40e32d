"""Task metrics and multi-run reports."""

from __future__ import annotations

import dataclasses

import numpy as np


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true, dtype=float), np.asarray(y_pred, dtype=float)
    return float(np.sqrt(np.mean((y_pred - y_true) ** 2)))


def rul_score(y_true, y_pred) -> float:
    """Asymmetric exponential penalty, averaged over samples.

    Late predictions (pred > true) are penalized with rate 1/10, early
    ones with the gentler 1/13.
    """
    y_true, y_pred = np.asarray(y_true, dtype=float), np.asarray(y_pred, dtype=float)
    diff = y_pred - y_true
    per_sample = np.where(diff < 0, np.exp(-diff / 13.0) - 1.0, np.exp(diff / 10.0) - 1.0)
    return float(np.mean(per_sample))


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)
    return float(np.mean(y_true == y_pred))


def macro_f1(y_true, y_pred, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all configured classes.

    Classes with zero precision+recall contribute an F1 of 0.
    """
    y_true, y_pred = np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.mean(scores))


def compute_metrics(task: str, y_true, y_pred, n_classes: int | None = None) -> dict[str, float]:
    if task == "regression":
        return {"rmse": rmse(y_true, y_pred), "score": rul_score(y_true, y_pred)}
    if task == "classification":
        if n_classes is None:
            raise ValueError("classification metrics need n_classes")
        return {"accuracy": accuracy(y_true, y_pred), "mf1": macro_f1(y_true, y_pred, n_classes)}
    raise ValueError(f"unknown task {task!r}")


REGRESSION_METRICS = ("rmse", "score")
CLASSIFICATION_METRICS = ("accuracy", "mf1")


@dataclasses.dataclass
class MetricsReport:
    """Per-seed metric values for one configuration, with mean/std summaries."""

    task: str
    per_seed: dict[int, dict[str, float]]

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if not self.per_seed:
            raise ValueError("report needs at least one run")

    @property
    def metric_names(self) -> tuple[str, ...]:
        return REGRESSION_METRICS if self.task == "regression" else CLASSIFICATION_METRICS

    def values(self, name: str) -> list[float]:
        return [run[name] for run in self.per_seed.values()]

    def mean(self, name: str) -> float:
        return float(np.mean(self.values(name)))

    def std(self, name: str) -> float:
        return float(np.std(self.values(name)))

    def summary(self) -> str:
        parts = [f"{name} {self.mean(name):.4f}±{self.std(name):.4f}" for name in self.metric_names]
        return ", ".join(parts)

    @staticmethod
    def merge(reports: "list[MetricsReport]") -> "MetricsReport":
        merged: dict[int, dict[str, float]] = {}
        for r in reports:
            merged.update(r.per_seed)
        return MetricsReport(reports[0].task, merged)
