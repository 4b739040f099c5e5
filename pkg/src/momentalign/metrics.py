"""Retrieval metrics: temporal IoU on inclusive frame spans, recall at rank n
for an IoU cutoff, and mean IoU of the top-1 prediction."""

from __future__ import annotations

from dataclasses import dataclass

from .inference import MomentBoundary


class EmptyDatasetError(ValueError):
    """Metrics need at least one sample."""


def temporal_iou(a: MomentBoundary, b: MomentBoundary) -> float:
    """Overlap over union of two inclusive frame spans, in [0, 1]."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = a.length() + b.length() - inter
    return inter / union


def recall_at(predictions: list[list[MomentBoundary]], truths: list[MomentBoundary],
              n: int, m: float) -> float:
    """Fraction of samples where any of the first n predictions has IoU
    strictly greater than m (ties at exactly m count as misses)."""
    if not truths:
        raise EmptyDatasetError("recall_at: empty dataset")
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} prediction lists vs {len(truths)} truths")
    if n < 1:
        raise ValueError("n must be >= 1")
    hits = 0
    for preds, truth in zip(predictions, truths):
        if any(temporal_iou(p, truth) > m for p in preds[:n]):
            hits += 1
    return hits / len(truths)


def mean_iou(top1: list[MomentBoundary | None], truths: list[MomentBoundary]) -> float:
    """Arithmetic mean of the top-1 prediction's IoU; a missing prediction
    contributes zero."""
    if not truths:
        raise EmptyDatasetError("mean_iou: empty dataset")
    if len(top1) != len(truths):
        raise ValueError(f"{len(top1)} predictions vs {len(truths)} truths")
    total = 0.0
    for pred, truth in zip(top1, truths):
        total += temporal_iou(pred, truth) if pred is not None else 0.0
    return total / len(truths)


@dataclass
class MetricsReport:
    """Recall table over (n, IoU cutoff) pairs plus mean IoU."""

    recalls: dict[tuple[int, float], float]
    miou: float
    samples: int

    def as_dict(self) -> dict:
        return {
            "samples": self.samples,
            "mIoU": self.miou,
            "recalls": {f"R@{n},IoU={m:g}": v for (n, m), v in sorted(self.recalls.items())},
        }


def evaluate_predictions(predictions: list[list[MomentBoundary]],
                         truths: list[MomentBoundary],
                         top_n: list[int], iou_cutoffs: list[float]) -> MetricsReport:
    if not truths:
        raise EmptyDatasetError("evaluate_predictions: empty dataset")
    recalls = {}
    for n in top_n:
        for m in iou_cutoffs:
            recalls[(n, m)] = recall_at(predictions, truths, n, m)
    top1 = [preds[0] if preds else None for preds in predictions]
    return MetricsReport(recalls=recalls, miou=mean_iou(top1, truths), samples=len(truths))
