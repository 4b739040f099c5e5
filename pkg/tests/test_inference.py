"""Localization tests: scoring, threshold expansion, top-n candidates."""

import numpy as np
import pytest

from momentalign.inference import (
    MomentBoundary,
    ThresholdError,
    expand_moment,
    frame_scores,
    top_n_moments,
)
from momentalign.model import ModelConfig, ModelParams
from momentalign.synthdata import GenConfig, generate


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b) / (na * nb)


class TestFrameScores:
    def setup_method(self):
        self.cfg = ModelConfig(feature_dim=4, hidden=3, fusion_hidden=3, heads=2,
                               raw_video_dim=6, embed_dim=4, vocab_size=12)
        self.params = ModelParams.init(self.cfg, seed=0)

    def test_matches_per_frame_cosine_oracle(self):
        from momentalign import diffcore as dc
        from momentalign.model import forward_sample

        rng = np.random.default_rng(1)
        video = rng.normal(size=(5, 6))
        tokens = [1, 4, 7]
        scores = frame_scores(self.params, video, tokens)
        _, q_enc, fused = forward_sample(self.params.nodes(), self.cfg, video, tokens)
        pooled = q_enc.value.mean(axis=0)
        for t in range(5):
            assert abs(scores[t] - cosine(fused.value[t], pooled)) <= 1e-12

    def test_self_similarity_scores_one(self):
        # scoring step alone: a frame equal to the query vector scores 1
        fused = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]])
        query = fused[0]
        sims = [cosine(f, query) for f in fused]
        assert abs(sims[0] - 1.0) <= 1e-12

    def test_orthogonal_scores_zero(self):
        fused = np.array([[1.0, 0.0], [0.0, 2.0]])
        query = np.array([0.0, 3.0])
        assert cosine(fused[0], query) == 0.0


class TestExpandMoment:
    def test_hand_trace(self):
        got = expand_moment([0.2, 0.85, 1.0, 0.95, 0.3], 0.9)
        assert (got.start, got.end) == (2, 3)

    def test_constant_scores_whole_video(self):
        got = expand_moment([0.4] * 7, 1.0)
        assert (got.start, got.end) == (0, 6)

    def test_single_frame(self):
        got = expand_moment([0.9], 0.5)
        assert (got.start, got.end) == (0, 0)

    def test_contains_argmax(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            scores = rng.uniform(0.01, 1.0, size=rng.integers(1, 20))
            peak = int(np.argmax(scores))
            got = expand_moment(scores, 0.7)
            assert got.start <= peak <= got.end

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            scores = rng.uniform(0.0, 1.0, size=rng.integers(1, 25))
            t1, t2 = sorted(rng.uniform(0.05, 1.0, size=2))
            wide = expand_moment(scores, t1)
            narrow = expand_moment(scores, t2)
            assert wide.start <= narrow.start and narrow.end <= wide.end

    def test_peak_tie_lowest_index(self):
        got = expand_moment([0.2, 0.9, 0.1, 0.9, 0.1], 0.99)
        assert got.start == 1 or (got.start <= 1 <= got.end)
        assert np.argmax([0.2, 0.9, 0.1, 0.9, 0.1]) == 1

    def test_nonpositive_boundary_halts_side(self):
        got = expand_moment([-0.5, 0.0, 1.0, 0.9, 0.8], 0.5)
        # left neighbour of the peak scores 0: admitted only if ratio passes,
        # 0/1 < 0.5, so the left side stops; right side expands on ratios
        assert got.start == 2
        assert got.end == 4

    def test_threshold_validation(self):
        with pytest.raises(ThresholdError):
            expand_moment([1.0], 0.0)
        with pytest.raises(ThresholdError):
            expand_moment([1.0], 1.5)

    def test_empty_scores(self):
        with pytest.raises(ValueError):
            expand_moment([], 0.5)


class TestTopN:
    def test_n1_reduces_to_expand(self):
        scores = [0.2, 0.85, 1.0, 0.95, 0.3]
        single = expand_moment(scores, 0.9)
        got = top_n_moments(scores, 0.9, 1)
        assert got == [single]

    def test_two_separated_peaks(self):
        scores = [0.1, 0.9, 1.0, 0.2, 0.1, 0.15, 0.7, 0.75, 0.1, 0.05]
        got = top_n_moments(scores, 0.85, 2)
        assert len(got) == 2
        first, second = got
        # peaks at index 2 (1.0) and 7 (0.75); ranked by peak height
        assert first.start <= 2 <= first.end
        assert second.start <= 7 <= second.end

    def test_exhaustion_returns_short_list(self):
        got = top_n_moments([0.5, 0.5], 1.0, 4)
        assert len(got) == 1  # the first expansion swallows the whole video

    def test_disjoint(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            scores = rng.uniform(0.0, 1.0, size=rng.integers(2, 30))
            moments = top_n_moments(scores, 0.8, 5)
            covered = set()
            for m in moments:
                span = set(range(m.start, m.end + 1))
                assert not span & covered
                covered |= span

    def test_ranked_by_peak(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            scores = rng.uniform(0.0, 1.0, size=20)
            moments = top_n_moments(scores, 0.9, 4)
            peaks = [max(scores[m.start : m.end + 1]) for m in moments]
            assert peaks == sorted(peaks, reverse=True)

    def test_n_validation(self):
        with pytest.raises(ValueError):
            top_n_moments([1.0], 0.5, 0)


class TestMomentBoundary:
    def test_validation(self):
        with pytest.raises(ValueError):
            MomentBoundary(3, 2)
        assert MomentBoundary(2, 5).length() == 4
