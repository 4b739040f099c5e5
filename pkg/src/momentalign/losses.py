"""Alignment losses: domain (MMD over sequence statistics), cross-modal
(triplet ranking plus distribution matching), specific (frame-to-query
softmax), and the supervised pre-training ranking loss.

All losses are graph nodes built on the diffcore substrate, so gradients
reach the encoders that produced the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .attention import cosine_matrix
from .diffcore import DiffNode


class EmptyBatchError(ValueError):
    """A loss received an empty sample collection."""


class BatchSizeError(ValueError):
    """Ranking losses need at least two samples to mine negatives."""


@dataclass
class LossWeights:
    """Loss-term weights, margins, and kernel policy for the final objective."""

    gamma1: float = 1.0   # domain alignment
    gamma2: float = 0.5   # cross-modal alignment
    gamma3: float = 0.2   # specific alignment
    margin_source: float = 0.2
    margin_target: float = 0.2
    mmd_variant: str = "standard"   # or "paper": literal positive cross term
    bandwidth: float | None = None  # None -> median heuristic per call
    cosine_mode: str = "signed"     # or "absolute"

    def validate(self):
        for name in ("gamma1", "gamma2", "gamma3", "margin_source", "margin_target"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.mmd_variant not in ("standard", "paper"):
            raise ValueError(f"unknown mmd variant {self.mmd_variant!r}")
        if self.cosine_mode not in ("signed", "absolute"):
            raise ValueError(f"unknown cosine mode {self.cosine_mode!r}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        return self


# ---------------------------------------------------------------------------
# sequence statistics

def intra_sample_mean(seq: DiffNode) -> DiffNode:
    """Mean over positions of one sequence; 1 x d."""
    if seq.value.shape[0] == 0:
        raise EmptyBatchError("intra_sample_mean: empty sequence")
    return dc.mean_over_rows(seq)


def inter_sample_std(means: list[DiffNode]) -> DiffNode:
    """Elementwise population std over a collection of sample means; 1 x d."""
    if not means:
        raise EmptyBatchError("inter_sample_std: empty collection")
    return dc.std_over_rows(dc.concat_rows(means))


# ---------------------------------------------------------------------------
# maximum mean discrepancy

def gaussian_kernel(u: DiffNode, w: DiffNode, bandwidth: float) -> DiffNode:
    """exp(-|u - w|^2 / (2 bandwidth^2)) for two row vectors."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    diff = dc.sub(u, w)
    sq = dc.matmul(diff, dc.transpose(diff))
    return dc.exp(dc.scale(sq, -1.0 / (2.0 * bandwidth * bandwidth)))


def median_bandwidth(stacked: DiffNode) -> DiffNode | None:
    """Median pairwise distance among the rows of `stacked`, as a graph node
    so the kernel bandwidth stays differentiable. Returns None when every
    pairwise distance is below the 1e-6 floor (caller uses the floor)."""
    vals = stacked.value
    n = vals.shape[0]
    dists = []
    for i in range(n):
        for j in range(i + 1, n):
            dists.append((float(np.sqrt(((vals[i] - vals[j]) ** 2).sum())), i, j))
    if not dists:
        return None
    dists.sort(key=lambda t: (t[0], t[1], t[2]))
    mid = len(dists) // 2

    def dist_node(i, j):
        diff = dc.sub(dc.slice_rows(stacked, i, i + 1), dc.slice_rows(stacked, j, j + 1))
        return dc.l2_norm(diff)

    if len(dists) % 2 == 1:
        med_val, i, j = dists[mid]
        node = dist_node(i, j)
    else:
        (v1, i1, j1), (v2, i2, j2) = dists[mid - 1], dists[mid]
        med_val = 0.5 * (v1 + v2)
        node = dc.scale(dc.add(dist_node(i1, j1), dist_node(i2, j2)), 0.5)
    if med_val < 1e-6:
        return None
    return node


def _pairwise_sq_dists(a: DiffNode, b: DiffNode) -> DiffNode:
    """|a_i - b_j|^2 for all row pairs, as an len(a) x len(b) node."""
    d = a.value.shape[1]
    ra = dc.matmul(dc.mul(a, a), dc.constant(np.ones((d, 1))))
    rb = dc.matmul(dc.mul(b, b), dc.constant(np.ones((d, 1))))
    left = dc.matmul(ra, dc.constant(np.ones((1, b.value.shape[0]))))
    right = dc.transpose(dc.matmul(rb, dc.constant(np.ones((1, a.value.shape[0])))))
    return dc.add(dc.add(left, right), dc.scale(dc.matmul(a, dc.transpose(b)), -2.0))


def mmd(u_set: list[DiffNode], w_set: list[DiffNode], variant: str = "standard",
        bandwidth: float | None = None) -> DiffNode:
    """Gaussian-kernel MMD between two sets of row vectors.

    standard: k_uu/Nu^2 + k_ww/Nw^2 - 2 k_uw/(Nu Nw)  (biased MMD^2 estimator)
    paper:    same self terms with a positive cross term +k_uw/(Nu Nw)
    """
    if not u_set or not w_set:
        raise EmptyBatchError("mmd: empty sample set")
    if variant not in ("standard", "paper"):
        raise ValueError(f"unknown mmd variant {variant!r}")
    u = dc.concat_rows(u_set) if len(u_set) > 1 else u_set[0]
    w = dc.concat_rows(w_set) if len(w_set) > 1 else w_set[0]
    nu, nw = u.value.shape[0], w.value.shape[0]

    if bandwidth is None:
        bw_node = median_bandwidth(dc.concat_rows([u, w]))
        if bw_node is None:
            bw_node = dc.constant([[1e-6]])
    else:
        if bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
        bw_node = dc.constant([[float(bandwidth)]])
    denom = dc.scale(dc.mul(bw_node, bw_node), 2.0)

    def kernel_sum(a, b):
        k = dc.exp(dc.divide(dc.scale(_pairwise_sq_dists(a, b), -1.0), denom))
        return dc.sum_all(k)

    term_uu = dc.scale(kernel_sum(u, u), 1.0 / (nu * nu))
    term_ww = dc.scale(kernel_sum(w, w), 1.0 / (nw * nw))
    cross_coeff = 1.0 / (nu * nw) if variant == "paper" else -2.0 / (nu * nw)
    term_uw = dc.scale(kernel_sum(u, w), cross_coeff)
    return dc.add(dc.add(term_uu, term_ww), term_uw)


def modality_alignment_loss(src_seqs: list[DiffNode], tgt_seqs: list[DiffNode],
                            weights: LossWeights) -> DiffNode:
    """One modality's domain gap: MMD between the sets of intra-sample means
    plus MMD between the two per-domain std vectors (singleton sets)."""
    if not src_seqs or not tgt_seqs:
        raise EmptyBatchError("modality alignment: empty batch")
    src_means = [intra_sample_mean(s) for s in src_seqs]
    tgt_means = [intra_sample_mean(s) for s in tgt_seqs]
    mean_term = mmd(src_means, tgt_means, weights.mmd_variant, weights.bandwidth)
    std_term = mmd([inter_sample_std(src_means)], [inter_sample_std(tgt_means)],
                   weights.mmd_variant, weights.bandwidth)
    return dc.add(mean_term, std_term)


def domain_alignment_loss(source_videos: list[DiffNode], source_queries: list[DiffNode],
                          target_videos: list[DiffNode], target_queries: list[DiffNode],
                          weights: LossWeights) -> DiffNode:
    """Video-based plus query-based domain alignment."""
    for name, batch in (("source videos", source_videos), ("source queries", source_queries),
                        ("target videos", target_videos), ("target queries", target_queries)):
        if not batch:
            raise EmptyBatchError(f"domain alignment: empty batch of {name}")
    video_term = modality_alignment_loss(source_videos, target_videos, weights)
    query_term = modality_alignment_loss(source_queries, target_queries, weights)
    return dc.add(video_term, query_term)


# ---------------------------------------------------------------------------
# ranking losses

def triplet_loss(sim_pos: float, sim_negs: list[float], margin: float) -> float:
    """Scalar hinge ranking: sum over negatives of max(0, m - s_pos + s_neg)."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if not sim_negs:
        raise EmptyBatchError("triplet_loss: no negatives")
    return float(sum(max(0.0, margin - sim_pos + s) for s in sim_negs))


def hardest_negative_mining(similarities: np.ndarray) -> np.ndarray:
    """Per-row index of the most similar non-matching column (diagonal is the
    matching pair). Ties break toward the lowest index."""
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ValueError(f"expected a square similarity matrix, got {sims.shape}")
    if sims.shape[0] < 2:
        raise BatchSizeError("hardest negative mining needs a batch of at least 2")
    masked = sims.copy()
    np.fill_diagonal(masked, -np.inf)
    return masked.argmax(axis=1)


def _ranking_direction(cos: DiffNode, margin: float) -> DiffNode:
    """Mean over anchors (rows) of hinge(margin - sim(i,i) + sim(i, hardest))."""
    b = cos.value.shape[0]
    neg_idx = hardest_negative_mining(cos.value)
    diag_mask = np.eye(b)
    neg_mask = np.zeros((b, b))
    neg_mask[np.arange(b), neg_idx] = 1.0
    ones_col = dc.constant(np.ones((b, 1)))
    pos = dc.matmul(dc.mul(cos, dc.constant(diag_mask)), ones_col)
    neg = dc.matmul(dc.mul(cos, dc.constant(neg_mask)), ones_col)
    margins = dc.constant(np.full((b, 1), margin))
    hinge = dc.hinge(dc.add(dc.add(margins, dc.scale(pos, -1.0)), neg))
    return dc.scale(dc.sum_all(hinge), 1.0 / b)


def bidirectional_ranking_loss(video_reps: DiffNode, query_reps: DiffNode,
                               margin: float, mode: str = "signed") -> DiffNode:
    """Triplet ranking in both directions with hardest in-batch negatives.

    Inputs are pooled, projected batch representations (B x d); row i of each
    side is the matching pair.
    """
    if video_reps.value.shape[0] != query_reps.value.shape[0]:
        raise dc.ShapeMismatchError(
            f"ranking: batch sizes differ, {video_reps.value.shape} vs {query_reps.value.shape}"
        )
    if video_reps.value.shape[0] < 2:
        raise BatchSizeError("ranking loss needs a batch of at least 2")
    cos_qv = cosine_matrix(query_reps, video_reps, mode)
    query_to_video = _ranking_direction(cos_qv, margin)
    video_to_query = _ranking_direction(dc.transpose(cos_qv), margin)
    return dc.add(query_to_video, video_to_query)


def supervised_loss(video_reps: DiffNode, query_reps: DiffNode, margin: float,
                    mode: str = "signed") -> DiffNode:
    """Source-domain pairwise ranking loss over projected pooled features."""
    return bidirectional_ranking_loss(video_reps, query_reps, margin, mode)


def cross_modal_consistent_loss(video_reps: DiffNode, query_reps: DiffNode, margin: float,
                                mode: str = "signed") -> DiffNode:
    """Target-domain joint-embedding ranking loss (both directions)."""
    return bidirectional_ranking_loss(video_reps, query_reps, margin, mode)


def cross_modal_distribution_loss(video_seqs: list[DiffNode],
                                  query_seqs: list[DiffNode]) -> DiffNode:
    """Sum of squared mean gaps per pair plus the squared std gap per batch."""
    if not video_seqs or not query_seqs:
        raise EmptyBatchError("distribution loss: empty batch")
    if len(video_seqs) != len(query_seqs):
        raise ValueError("distribution loss: videos and queries must pair up")
    v_means = [intra_sample_mean(v) for v in video_seqs]
    q_means = [intra_sample_mean(q) for q in query_seqs]

    def sq_norm(node):
        return dc.matmul(node, dc.transpose(node))

    total = None
    for vm, qm in zip(v_means, q_means):
        term = sq_norm(dc.sub(vm, qm))
        total = term if total is None else dc.add(total, term)
    std_gap = sq_norm(dc.sub(inter_sample_std(v_means), inter_sample_std(q_means)))
    return dc.add(total, std_gap)


# ---------------------------------------------------------------------------
# specific alignment

def frame_query_similarity(frames: DiffNode, queries: list[DiffNode]) -> DiffNode:
    """T x L similarities between each frame and each whole query matrix:
    |v_c Q_l^T| / (|v_c| |Q_l|_F). Zero frames or queries yield 0."""
    if not queries:
        raise EmptyBatchError("frame-query similarity: no queries")
    frame_norms = dc.row_norms(frames)
    fvals = frame_norms.value
    fzero = fvals == 0.0
    frames_safe = dc.add(frame_norms, dc.constant(np.where(fzero, 1.0, 0.0))) \
        if fzero.any() else frame_norms
    cols = []
    for q in queries:
        if q.value.shape[1] != frames.value.shape[1]:
            raise dc.ShapeMismatchError(
                f"frame-query similarity: dims differ, {frames.value.shape} vs {q.value.shape}"
            )
        raw = dc.row_norms(dc.matmul(frames, dc.transpose(q)))
        qn = dc.l2_norm(q)
        qzero = qn.value[0, 0] == 0.0
        qn_safe = dc.add(qn, dc.constant([[1.0]])) if qzero else qn
        col = dc.divide(raw, dc.mul(frames_safe, qn_safe))
        if fzero.any() or qzero:
            mask = np.where(fzero, 0.0, 1.0) * (0.0 if qzero else 1.0)
            col = dc.mul(col, dc.constant(mask))
        cols.append(col)
    return dc.concat_cols(cols)


def specific_alignment_loss(frames: DiffNode, queries: list[DiffNode]) -> DiffNode:
    """Negative log of each frame's best softmax query probability, summed."""
    sims = frame_query_similarity(frames, queries)
    probs = dc.row_softmax(sims)
    best = dc.max_over_axis(probs, axis=1)
    return dc.scale(dc.sum_all(dc.log(best)), -1.0)


def specific_alignment_batch(frames_list: list[DiffNode], queries: list[DiffNode]) -> DiffNode:
    """Specific alignment summed over a batch of videos.

    The pipeline is row-wise over frames, so concatenating every video's
    frames gives the per-video sum in one pass.
    """
    if not frames_list:
        raise EmptyBatchError("specific alignment: empty video batch")
    frames = dc.concat_rows(frames_list) if len(frames_list) > 1 else frames_list[0]
    return specific_alignment_loss(frames, queries)


# ---------------------------------------------------------------------------
# final objective

@dataclass
class BatchFeatures:
    """Encoded and fused sequences for one domain's minibatch."""

    videos_encoded: list[DiffNode] = field(default_factory=list)
    queries_encoded: list[DiffNode] = field(default_factory=list)
    videos_fused: list[DiffNode] = field(default_factory=list)

    def size(self) -> int:
        return len(self.videos_encoded)


def pooled_projection(seqs: list[DiffNode], projection: DiffNode) -> DiffNode:
    """Mean-pool each sequence, stack to B x d, then apply a d x d projection."""
    pooled = dc.concat_rows([intra_sample_mean(s) for s in seqs])
    return dc.matmul(pooled, projection)


def final_loss(source: BatchFeatures, target: BatchFeatures,
               projections: dict[str, DiffNode], weights: LossWeights):
    """Weighted multi-task objective; returns (total node, component nodes).

    Component keys match the training-log columns: L_SL, L_DA, L_M1, L_M2,
    L_SA. Terms whose weight is zero are skipped entirely and reported as
    None, which keeps zero-weight runs bit-identical to pretraining dynamics.
    """
    if source.size() == 0 or target.size() == 0:
        raise EmptyBatchError("final loss: empty source or target batch")
    # The supervised ranking pools the encoded (pre-fusion) video sequence.
    # Fused features see the query through the attention readout, which lets
    # the ranking be solved by copying query information instead of by
    # cross-modal pairing; the encoded sequence closes that leak.
    sl = supervised_loss(
        pooled_projection(source.videos_encoded, projections["project.source_video"]),
        pooled_projection(source.queries_encoded, projections["project.source_query"]),
        weights.margin_source, weights.cosine_mode,
    )
    components: dict[str, DiffNode | None] = {
        "L_SL": sl, "L_DA": None, "L_M1": None, "L_M2": None, "L_SA": None,
    }
    total = sl
    if weights.gamma1 > 0:
        da = domain_alignment_loss(source.videos_encoded, source.queries_encoded,
                                   target.videos_encoded, target.queries_encoded, weights)
        components["L_DA"] = da
        total = dc.add(total, dc.scale(da, weights.gamma1))
    if weights.gamma2 > 0:
        m1 = cross_modal_consistent_loss(
            pooled_projection(target.videos_fused, projections["project.target_video"]),
            pooled_projection(target.queries_encoded, projections["project.target_query"]),
            weights.margin_target, weights.cosine_mode,
        )
        m2 = cross_modal_distribution_loss(target.videos_encoded, target.queries_encoded)
        components["L_M1"] = m1
        components["L_M2"] = m2
        total = dc.add(total, dc.scale(dc.add(m1, m2), weights.gamma2))
    if weights.gamma3 > 0:
        sa = specific_alignment_batch(target.videos_encoded, target.queries_encoded)
        components["L_SA"] = sa
        total = dc.add(total, dc.scale(sa, weights.gamma3))
    return total, components
