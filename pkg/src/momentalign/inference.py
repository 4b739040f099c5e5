"""Moment localization: frame scoring, peak-seeded threshold expansion, and
top-n candidate generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, frame_scores_value


class ThresholdError(ValueError):
    """Expansion threshold outside (0, 1]."""


@dataclass(frozen=True)
class MomentBoundary:
    """Inclusive frame span of a localized moment."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise ValueError(f"invalid boundary ({self.start}, {self.end})")

    def length(self) -> int:
        return self.end - self.start + 1


def frame_scores(params: ModelParams, raw_video: np.ndarray, token_ids) -> np.ndarray:
    """Cosine between each fused frame feature and the mean-pooled query."""
    return frame_scores_value(params, raw_video, token_ids)


def expand_moment(scores, threshold: float) -> MomentBoundary:
    """Grow a moment outward from the peak-scoring frame.

    A neighbouring outside frame joins the moment while the ratio of its score
    to the nearest boundary frame's score stays at or above the threshold.
    Boundary scores must be positive for the ratio to be evaluated; a
    non-positive boundary halts that side. Peak ties seed at the lowest index.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("expand_moment: empty score sequence")
    if not (0.0 < threshold <= 1.0):
        raise ThresholdError(f"threshold {threshold} outside (0, 1]")
    left = right = int(scores.argmax())
    while True:
        grew = False
        if left > 0 and scores[left] > 0 and scores[left - 1] / scores[left] >= threshold:
            left -= 1
            grew = True
        if (right + 1 < scores.size and scores[right] > 0
                and scores[right + 1] / scores[right] >= threshold):
            right += 1
            grew = True
        if not grew:
            return MomentBoundary(left, right)


def top_n_moments(scores, threshold: float, n: int) -> list[MomentBoundary]:
    """Up to n disjoint moments, ranked by their seed peak score.

    Each round runs the expansion on the remaining scores and masks the chosen
    span out; rounds stop early once every frame is consumed.
    """
    if n < 1:
        raise ValueError(f"top_n_moments: n must be >= 1, got {n}")
    remaining = np.asarray(scores, dtype=np.float64).ravel().copy()
    if remaining.size == 0:
        raise ValueError("top_n_moments: empty score sequence")
    moments = []
    for _ in range(n):
        if not np.any(np.isfinite(remaining)):
            break
        moment = expand_moment(remaining, threshold)
        moments.append(moment)
        remaining[moment.start : moment.end + 1] = -np.inf
    return moments
