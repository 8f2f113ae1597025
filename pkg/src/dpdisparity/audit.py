"""Per-group accuracy, accuracy parity and DP-vs-baseline disparity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable

import numpy as np
from scipy import stats

from . import model as M

__all__ = [
    "GroupedEval",
    "DisparityReport",
    "GradNormSummary",
    "evaluate",
    "evaluate_predictions",
    "disparity",
    "gradient_norm_summary",
]


@dataclass
class GroupedEval:
    groups: list
    correct: dict
    total: dict
    confusion: np.ndarray  # rows: true class, cols: predicted class

    @property
    def accuracy(self) -> dict:
        return {g: self.correct[g] / self.total[g] for g in self.groups}

    @property
    def overall(self) -> float:
        return sum(self.correct.values()) / sum(self.total.values())

    def gap(self) -> float:
        acc = list(self.accuracy.values())
        return max(acc) - min(acc)


def evaluate_predictions(preds, labels, num_classes: int, group_values=None) -> GroupedEval:
    """Count correct predictions per group.

    ``group_values`` defaults to the labels themselves.  Groups with no
    members never appear in the result.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    groups_of = labels if group_values is None else np.asarray(group_values)
    if len(groups_of) != len(labels):
        raise ValueError("group values differ in length from labels")
    hits = preds == labels
    groups = sorted(set(groups_of.tolist()), key=_sort_key)
    correct, total = {}, {}
    for g in groups:
        mask = groups_of == g
        correct[g] = int(hits[mask].sum())
        total[g] = int(mask.sum())
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    return GroupedEval(groups, correct, total, confusion)


def _sort_key(g: Hashable):
    return (0, g) if isinstance(g, (int, np.integer)) else (1, str(g))


def evaluate(spec: M.ModelSpec, params: np.ndarray, test_ds, grouping: str = "label") -> GroupedEval:
    """Evaluate ``params`` on ``test_ds``, grouped by label or a metadata key."""
    if len(test_ds.labels) == 0:
        raise ValueError("empty test set")
    if grouping == "label":
        groups = None
    elif grouping in test_ds.metadata:
        groups = test_ds.metadata[grouping]
    else:
        raise ValueError(f"unknown grouping key {grouping!r}")
    preds = M.predict(spec, params, test_ds.inputs)
    return evaluate_predictions(preds, test_ds.labels, test_ds.num_classes, groups)


@dataclass
class DisparityReport:
    groups: list
    baseline_accuracy: dict
    dp_accuracy: dict
    drop: dict
    parity_gap: float
    baseline_gap: float
    rank_correlation: float | None
    group_count: int

    @property
    def largest_drop_group(self):
        return max(self.groups, key=lambda g: self.drop[g])

    def rows(self):
        for g in self.groups:
            yield g, self.baseline_accuracy[g], self.dp_accuracy[g], self.drop[g]


def disparity(baseline, dp) -> DisparityReport:
    """Compare a baseline and a DP evaluation over the same groups.

    Accepts :class:`GroupedEval` objects or plain ``{group: accuracy}``
    mappings.  The rank correlation between baseline accuracy and drop is
    ``None`` for fewer than three groups or when either side is constant.
    """
    base_acc = baseline.accuracy if isinstance(baseline, GroupedEval) else dict(baseline)
    dp_acc = dp.accuracy if isinstance(dp, GroupedEval) else dict(dp)
    if set(base_acc) != set(dp_acc):
        raise ValueError(f"group mismatch: {sorted(map(str, base_acc))} vs {sorted(map(str, dp_acc))}")
    groups = sorted(base_acc, key=_sort_key)
    drop = {g: base_acc[g] - dp_acc[g] for g in groups}
    rho = None
    if len(groups) >= 3:
        a = np.array([base_acc[g] for g in groups])
        d = np.array([drop[g] for g in groups])
        if np.ptp(a) > 0 and np.ptp(d) > 0:
            rho = float(stats.spearmanr(a, d).statistic)
    dp_vals = [dp_acc[g] for g in groups]
    base_vals = [base_acc[g] for g in groups]
    return DisparityReport(
        groups=groups,
        baseline_accuracy={g: base_acc[g] for g in groups},
        dp_accuracy={g: dp_acc[g] for g in groups},
        drop=drop,
        parity_gap=max(dp_vals) - min(dp_vals),
        baseline_gap=max(base_vals) - min(base_vals),
        rank_correlation=rho,
        group_count=len(groups),
    )


@dataclass
class GradNormSummary:
    """``epoch_means[e, c]``: mean pre-clip norm of class ``c`` during epoch ``e``."""

    epoch_means: np.ndarray

    def ratio(self, target: int, epoch: int = 0) -> float:
        """Target-class norm over the mean of the other classes' norms."""
        row = self.epoch_means[epoch]
        others = np.delete(row, target)
        return float(row[target] / np.nanmean(others))


def gradient_norm_summary(trace) -> GradNormSummary:
    if not trace.class_norm_sum:
        raise ValueError("trace holds no gradient-norm records")
    sums = np.asarray(trace.class_norm_sum, dtype=np.float64)
    counts = np.asarray(trace.class_count, dtype=np.float64)
    per = trace.steps_per_epoch
    epochs = len(sums) // per
    s = sums[: epochs * per].reshape(epochs, per, -1).sum(axis=1)
    c = counts[: epochs * per].reshape(epochs, per, -1).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(c > 0, s / np.where(c > 0, c, 1), np.nan)
    return GradNormSummary(means)
