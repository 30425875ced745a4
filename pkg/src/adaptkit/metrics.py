"""Ranking metrics (AUROC, AUPR, F1max) and dataset-level evaluation.

The three scalar metrics are implemented directly so their tie handling is
exact and oracle-checkable: AUROC uses the Mann-Whitney statistic with
half credit for ties, AUPR is the step-interpolated area over all distinct
thresholds (average precision with tied scores grouped), and F1max sweeps
the same thresholds. All arithmetic is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DataError, MetricUndefinedError

METRIC_KEYS = ("i_auroc", "i_aupr", "i_f1max", "p_auroc", "p_aupr", "p_f1max")


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ArgumentError(f"scores ({scores.shape}) and labels ({labels.shape}) differ in length")
    if scores.size == 0:
        raise ArgumentError("empty score list")
    if not np.isin(labels, (0, 1)).all():
        raise ArgumentError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC needs both classes present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    changed = np.diff(sorted_scores) != 0
    starts = np.concatenate([[0], np.nonzero(changed)[0] + 1])
    ends = np.concatenate([np.nonzero(changed)[0], [scores.size - 1]])
    group_of = np.cumsum(np.concatenate([[0], changed.astype(np.int64)]))
    avg_rank = (starts + ends) / 2.0 + 1.0  # average 1-based rank per tie group
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = avg_rank[group_of]
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(scores: np.ndarray, labels: np.ndarray):
    """Cumulative TP/FP after each distinct-score group, descending thresholds."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # last index of each distinct-score run
    boundary = np.nonzero(np.diff(s))[0]
    last = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(y, dtype=np.float64)[last]
    fp = np.cumsum(1 - y, dtype=np.float64)[last]
    return tp, fp


def aupr(scores, labels) -> float:
    """Area under precision-recall, step-wise over all distinct thresholds."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("AUPR needs at least one positive")
    tp, fp = _threshold_counts(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def f1max(scores, labels) -> float:
    """Best F1 over classifiers thresholded at each distinct score."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("F1max needs at least one positive")
    tp, fp = _threshold_counts(scores, labels)
    f1 = 2.0 * tp / (tp + fp + n_pos)
    return float(f1.max())


@dataclass
class PixelTruth:
    """Ground truth paired with one prediction: image label plus optional mask."""

    path: str
    category: str
    label: int
    mask: np.ndarray | None = None  # binary [h, w], required for pixel metrics


@dataclass
class EvalReport:
    per_category: dict[str, dict[str, float]]
    means: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(
            {"per_category": self.per_category, "means": self.means, "counts": self.counts},
            indent=indent,
            sort_keys=True,
        )

    def to_table(self) -> str:
        """Aligned-column text table: one category per row, metrics as columns."""
        cols = [k for k in METRIC_KEYS if any(k in v for v in self.per_category.values())]
        rows = [["category"] + cols]
        for cat in sorted(self.per_category):
            vals = self.per_category[cat]
            rows.append([cat] + [f"{vals[c]:.4f}" if c in vals else "-" for c in cols])
        rows.append(["mean"] + [f"{self.means[c]:.4f}" if c in self.means else "-" for c in cols])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        return "\n".join(lines)


def evaluate(
    predictions,
    ground_truth: list[PixelTruth],
    level: str = "both",
    pixel_pooling: str = "pooled",
) -> EvalReport:
    """Score predictions against ground truth, grouped and averaged per category.

    Pixel metrics pool all pixels of a category by default; pass
    ``pixel_pooling="per_image"`` to average per-image metric values
    instead. Predictions and truths must align index by index (checked via
    their paths).
    """
    if level not in ("image", "pixel", "both"):
        raise ArgumentError(f"unknown level {level!r}")
    if pixel_pooling not in ("pooled", "per_image"):
        raise ArgumentError(f"unknown pixel_pooling {pixel_pooling!r}")
    if len(predictions) != len(ground_truth):
        raise DataError(
            f"{len(predictions)} predictions vs {len(ground_truth)} ground-truth records"
        )
    by_category: dict[str, list[tuple]] = {}
    for pred, truth in zip(predictions, ground_truth):
        pred_path = getattr(pred, "path", None)
        if pred_path is not None and pred_path != truth.path:
            raise DataError(f"prediction/GT misalignment: {pred_path!r} vs {truth.path!r}")
        by_category.setdefault(truth.category, []).append((pred, truth))

    per_category: dict[str, dict[str, float]] = {}
    counts = {"images": len(ground_truth), "pixels": 0}
    for cat, pairs in by_category.items():
        row: dict[str, float] = {}
        if level in ("image", "both"):
            scores = [float(p.score) for p, _ in pairs]
            labels = [t.label for _, t in pairs]
            row["i_auroc"] = auroc(scores, labels)
            row["i_aupr"] = aupr(scores, labels)
            row["i_f1max"] = f1max(scores, labels)
        if level in ("pixel", "both"):
            maps, masks = [], []
            for pred, truth in pairs:
                if truth.mask is None:
                    raise DataError(f"pixel metrics requested but no mask for {truth.path}")
                if pred.map.shape != truth.mask.shape:
                    raise DataError(
                        f"map {pred.map.shape} vs mask {truth.mask.shape} for {truth.path}"
                    )
                maps.append(np.asarray(pred.map, dtype=np.float64).ravel())
                masks.append(np.asarray(truth.mask).ravel())
            counts["pixels"] += sum(m.size for m in masks)
            if pixel_pooling == "pooled":
                flat_scores = np.concatenate(maps)
                flat_labels = np.concatenate(masks)
                row["p_auroc"] = auroc(flat_scores, flat_labels)
                row["p_aupr"] = aupr(flat_scores, flat_labels)
                row["p_f1max"] = f1max(flat_scores, flat_labels)
            else:
                vals = {"p_auroc": [], "p_aupr": [], "p_f1max": []}
                for m, g in zip(maps, masks):
                    if g.sum() == 0:
                        continue  # per-image ranking is undefined without anomalous pixels
                    vals["p_auroc"].append(auroc(m, g))
                    vals["p_aupr"].append(aupr(m, g))
                    vals["p_f1max"].append(f1max(m, g))
                if not vals["p_auroc"]:
                    raise MetricUndefinedError(f"category {cat} has no anomalous pixels")
                for key, series in vals.items():
                    row[key] = float(np.mean(series))
        per_category[cat] = row

    means: dict[str, float] = {}
    for key in METRIC_KEYS:
        series = [row[key] for row in per_category.values() if key in row]
        if series:
            means[key] = float(np.mean(series))
    return EvalReport(per_category=per_category, means=means, counts=counts)
