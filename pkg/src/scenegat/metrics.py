"""Confusion matrices, balanced accuracy, recall and per-subset accuracy."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def row_normalized(self) -> np.ndarray:
        rows = self.row_sums().astype(np.float64)
        out = np.zeros(self.counts.shape, dtype=np.float64)
        nz = rows > 0
        out[nz] = self.counts[nz] / rows[nz, None]
        return out


def confusion_matrix(true_labels: Sequence[int], predicted_labels: Sequence[int], num_classes: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise DataError(f"label vectors differ in length: {len(t)} vs {len(p)}")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= num_classes):
        raise DataError(f"label out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def per_class_recall(cm: ConfusionMatrix) -> np.ndarray:
    """Recall per class; NaN for classes with no true samples."""
    rows = cm.row_sums()
    out = np.full(cm.num_classes, np.nan)
    nz = rows > 0
    out[nz] = np.diag(cm.counts)[nz] / rows[nz]
    return out


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Macro-averaged recall over classes present in the evaluation set."""
    rec = per_class_recall(cm)
    present = ~np.isnan(rec)
    if not present.any():
        raise DataError("balanced accuracy undefined: confusion matrix has no samples")
    if not present.all():
        log.warning("classes %s absent from evaluation set; excluded from balanced accuracy",
                    np.flatnonzero(~present).tolist())
    return float(rec[present].mean())


def recall(cm: ConfusionMatrix, positive_class: int) -> float:
    if cm.num_classes < 2:
        raise DataError("recall needs at least 2 classes")
    row = cm.counts[positive_class].sum()
    if row == 0:
        raise DataError(f"recall undefined: no true samples of class {positive_class}")
    return float(cm.counts[positive_class, positive_class] / row)


def per_subset_accuracy(predictions, labels, subset_tags) -> dict[str, tuple[float, int]]:
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    tags = ["untagged" if t is None else str(t) for t in subset_tags]
    if not (len(preds) == len(labs) == len(tags)):
        raise DataError("predictions, labels and subset tags must align")
    correct = preds == labs
    out: dict[str, tuple[float, int]] = {}
    for tag in sorted(set(tags)):
        mask = np.array([t == tag for t in tags])
        out[tag] = (float(correct[mask].mean()), int(mask.sum()))
    if len(preds):
        out["global"] = (float(correct.mean()), len(preds))
    return out


@dataclass
class MetricsReport:
    class_names: list[str]
    confusion: ConfusionMatrix
    balanced_accuracy: float
    per_class_recall: list
    excluded_classes: list[str]
    per_subset: dict
    positive_class: int | None = None
    binary_recall: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "balanced_accuracy": self.balanced_accuracy,
            "per_class_recall": {
                n: (None if np.isnan(r) else float(r)) for n, r in zip(self.class_names, self.per_class_recall)
            },
            "confusion_counts": self.confusion.counts.tolist(),
            "confusion_row_normalized": self.confusion.row_normalized().tolist(),
            "per_subset": {k: {"accuracy": a, "count": c} for k, (a, c) in self.per_subset.items()},
            "counts": {
                "total": self.confusion.total,
                "per_class": dict(zip(self.class_names, self.confusion.row_sums().tolist())),
            },
            "class_names": list(self.class_names),
            "excluded_classes": list(self.excluded_classes),
        }
        if self.binary_recall is not None:
            d["recall"] = {"positive_class": self.class_names[self.positive_class], "value": self.binary_recall}
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render(self) -> str:
        names = self.class_names
        w = max(12, max(len(n) for n in names) + 2)
        lines = [f"balanced accuracy: {self.balanced_accuracy:.4f}"]
        if self.binary_recall is not None:
            lines.append(f"recall ({names[self.positive_class]}): {self.binary_recall:.4f}")
        lines.append("")
        lines.append("true \\ pred".ljust(w) + "".join(f"{i:>7d}" for i in range(len(names))) + "   recall")
        for i, n in enumerate(names):
            r = self.per_class_recall[i]
            rs = "    n/a" if np.isnan(r) else f"{r:8.4f}"
            lines.append(f"{i:d} {n}"[:w].ljust(w) + "".join(f"{c:7d}" for c in self.confusion.counts[i]) + " " + rs)
        if self.excluded_classes:
            lines.append(f"excluded (no samples): {', '.join(self.excluded_classes)}")
        if self.per_subset:
            lines.append("")
            lines.append("subset".ljust(w) + "   acc (%)   count")
            for k, (a, c) in self.per_subset.items():
                lines.append(k[:w].ljust(w) + f"{100 * a:10.2f}{c:8d}")
        return "\n".join(lines)


def build_report(true_labels, predicted_labels, class_names: Sequence[str], subset_tags=None,
                 positive_class: int | None = None) -> MetricsReport:
    names = list(class_names)
    cm = confusion_matrix(true_labels, predicted_labels, len(names))
    rec = per_class_recall(cm)
    excluded = [names[i] for i in np.flatnonzero(np.isnan(rec))]
    if positive_class is None and len(names) == 2:
        positive_class = 0
    binary = None
    if len(names) == 2 and cm.counts[positive_class].sum() > 0:
        binary = recall(cm, positive_class)
    subsets = {}
    if subset_tags is not None and any(t is not None for t in subset_tags):
        subsets = per_subset_accuracy(predicted_labels, true_labels, subset_tags)
    return MetricsReport(
        class_names=names,
        confusion=cm,
        balanced_accuracy=balanced_accuracy(cm),
        per_class_recall=rec.tolist(),
        excluded_classes=excluded,
        per_subset=subsets,
        positive_class=positive_class if len(names) == 2 else None,
        binary_recall=binary,
    )
