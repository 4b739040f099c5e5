"""Cross-modal attention: cosine similarity, bidirectional attention, fusion.

Produces the fused frame-wise feature sequence that inference scores against
the pooled query vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffNode
from .encoders import bi_gru_batch, project_rows_batch


@dataclass
class SimilarityMatrix:
    """Frame-by-word cosine similarities with both softmax normalizations."""

    values: DiffNode          # T x N cosines
    row_normalized: DiffNode  # softmax over words, rows sum to 1
    col_normalized: DiffNode  # softmax over frames, columns sum to 1


def _safe_norms(norms: DiffNode):
    """Replace zero norms by 1 so the division is defined; zero rows are
    masked out of the result, which also zeroes their gradients."""
    vals = norms.value
    zero = vals == 0.0
    if zero.any():
        safe = dc.add(norms, dc.constant(np.where(zero, 1.0, 0.0)))
    else:
        safe = norms
    mask = np.where(zero, 0.0, 1.0)
    return safe, mask, bool(zero.any())


def cosine_matrix(a: DiffNode, b: DiffNode, mode: str = "signed") -> DiffNode:
    """Pairwise cosine similarities between the rows of a and the rows of b.

    Zero rows yield similarity 0 with zero gradient. mode="absolute" takes
    the magnitude of each cosine.
    """
    if a.value.shape[1] != b.value.shape[1]:
        raise dc.ShapeMismatchError(
            f"cosine: feature dims differ, {a.value.shape} vs {b.value.shape}"
        )
    if mode not in ("signed", "absolute"):
        raise ValueError(f"unknown cosine mode {mode!r}")
    na_safe, mask_a, any_a = _safe_norms(dc.row_norms(a))
    nb_safe, mask_b, any_b = _safe_norms(dc.row_norms(b))
    raw = dc.matmul(a, dc.transpose(b))
    denom = dc.matmul(na_safe, dc.transpose(nb_safe))
    cos = dc.divide(raw, denom)
    if any_a or any_b:
        cos = dc.mul(cos, dc.constant(mask_a * mask_b.T))
    if mode == "absolute":
        cos = dc.abs_value(cos)
    return cos


def similarity_matrix(video: DiffNode, query: DiffNode, mode: str = "signed") -> SimilarityMatrix:
    """T x N cosine matrix between frames and words, plus softmax normalizations."""
    cos = cosine_matrix(video, query, mode)
    row_norm = dc.row_softmax(cos)
    col_norm = dc.transpose(dc.row_softmax(dc.transpose(cos)))
    return SimilarityMatrix(values=cos, row_normalized=row_norm, col_normalized=col_norm)


def bidirectional_attention(video: DiffNode, query: DiffNode, sim: SimilarityMatrix):
    """Video-to-query and query-to-video attention readouts, both T x d."""
    t, n = sim.values.value.shape
    if video.value.shape[0] != t or query.value.shape[0] != n:
        raise dc.ShapeMismatchError(
            f"bidirectional attention: C is {sim.values.value.shape}, "
            f"video {video.value.shape}, query {query.value.shape}"
        )
    to_query = dc.matmul(sim.row_normalized, query)
    to_video = dc.matmul(dc.matmul(sim.row_normalized, dc.transpose(sim.col_normalized)), video)
    return to_query, to_video


def fuse_features_batch(videos: list[DiffNode], to_queries: list[DiffNode],
                        to_videos: list[DiffNode],
                        params: dict[str, DiffNode]) -> list[DiffNode]:
    """Fused frame sequences: Bi-GRU over [V; X; V*X; V*Y], projected to d."""
    stacked = []
    for video, to_query, to_video in zip(videos, to_queries, to_videos):
        if not (video.value.shape == to_query.value.shape == to_video.value.shape):
            raise dc.ShapeMismatchError(
                f"fuse: blocks differ, {video.value.shape} / "
                f"{to_query.value.shape} / {to_video.value.shape}"
            )
        stacked.append(dc.concat_cols(
            [video, to_query, dc.mul(video, to_query), dc.mul(video, to_video)]
        ))
    return project_rows_batch(bi_gru_batch(stacked, params), params["proj.w"])


def fuse_features(video: DiffNode, to_query: DiffNode, to_video: DiffNode,
                  params: dict[str, DiffNode]) -> DiffNode:
    return fuse_features_batch([video], [to_query], [to_video], params)[0]


def fuse_pairs_batch(videos: list[DiffNode], queries: list[DiffNode],
                     params: dict[str, DiffNode], mode: str = "signed") -> list[DiffNode]:
    """Cross-modal path for paired batches: similarity, attention, fusion."""
    to_queries, to_videos = [], []
    for video, query in zip(videos, queries):
        sim = similarity_matrix(video, query, mode)
        to_query, to_video = bidirectional_attention(video, query, sim)
        to_queries.append(to_query)
        to_videos.append(to_video)
    return fuse_features_batch(videos, to_queries, to_videos, params)


def fuse_pair(video: DiffNode, query: DiffNode, params: dict[str, DiffNode],
              mode: str = "signed") -> DiffNode:
    """Full cross-modal path for one video/query pair."""
    return fuse_pairs_batch([video], [query], params, mode)[0]
