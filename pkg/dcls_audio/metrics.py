"""Multi-label evaluation: per-class average precision and mAP."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class MetricError(Exception):
    """Custom exception for undefined or malformed metric inputs."""
    pass


@dataclass
class EvalBuffer:
    """Accumulates (N, C) scores and binary labels batch by batch."""

    scores: List[np.ndarray] = field(default_factory=list)
    labels: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_arrays(cls, scores: np.ndarray, labels: np.ndarray) -> "EvalBuffer":
        buf = cls()
        buf.add(scores, labels)
        return buf

    def add(self, scores: np.ndarray, labels: np.ndarray) -> None:
        """
        Raises:
            MetricError: On shape mismatch, a class-count change, or non-binary labels
        """
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        labels = np.atleast_2d(np.asarray(labels))
        if scores.shape != labels.shape:
            raise MetricError(f"scores shape {scores.shape} does not match labels shape {labels.shape}")
        if self.scores and scores.shape[1] != self.scores[0].shape[1]:
            raise MetricError(f"expected {self.scores[0].shape[1]} classes, got {scores.shape[1]}")
        if not np.isin(labels, (0, 1)).all():
            raise MetricError("labels must be 0 or 1")
        self.scores.append(scores)
        self.labels.append(labels.astype(np.int64))

    def as_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.scores:
            raise MetricError("evaluation buffer is empty")
        return np.concatenate(self.scores), np.concatenate(self.labels)

    def __len__(self) -> int:
        return sum(len(s) for s in self.scores)


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Mean of precision@k over the ranks k of the positive items.

    Items are ranked by descending score; equal scores keep their original
    order (stable sort), so ties are resolved by ascending index.

    Args:
        scores (Sequence[float]): Scores of N items
        labels (Sequence[int]): Binary labels of N items

    Returns:
        float: AP in [0, 1]

    Raises:
        MetricError: If there is no positive item (AP is undefined)
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"expected two 1-D arrays of equal length, got {scores.shape} and {labels.shape}")
    positives = int(labels.sum())
    if positives == 0:
        raise MetricError("average precision is undefined without positive labels")

    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(np.float64)
    precision_at_k = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float((precision_at_k * hits).sum() / positives)


def per_class_ap(buf: EvalBuffer) -> np.ndarray:
    """AP per class; NaN for classes without positives."""
    scores, labels = buf.as_arrays()
    aps = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        try:
            aps[c] = average_precision(scores[:, c], labels[:, c])
        except MetricError:
            continue
    return aps


def mean_average_precision(buf: EvalBuffer) -> float:
    """
    Mean AP over classes with at least one positive; the rest are excluded.

    Raises:
        MetricError: If no class has a positive label
    """
    aps = per_class_ap(buf)
    defined = aps[~np.isnan(aps)]
    if defined.size == 0:
        raise MetricError("mAP is undefined: no class has a positive label")
    skipped = aps.size - defined.size
    if skipped:
        logger.debug("mAP excludes %d classes without positives", skipped)
    return float(defined.mean())


def eval_report(buf: EvalBuffer, class_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Per-class report (class index, class name, positives, AP) with a final mAP row.

    Returns:
        pd.DataFrame: Report ready to be written as CSV
    """
    _, labels = buf.as_arrays()
    aps = per_class_ap(buf)
    names = list(class_names) if class_names is not None else [str(c) for c in range(len(aps))]
    if len(names) != len(aps):
        raise MetricError(f"{len(names)} class names for {len(aps)} classes")

    report = pd.DataFrame({
        "class_index": [str(c) for c in range(len(aps))],
        "class_name": names,
        "positives": labels.sum(axis=0).astype(int),
        "ap": aps,
    })
    summary = pd.DataFrame([{
        "class_index": "mAP",
        "class_name": "",
        "positives": int(labels.sum()),
        "ap": mean_average_precision(buf),
    }])
    return pd.concat([report, summary], ignore_index=True)
