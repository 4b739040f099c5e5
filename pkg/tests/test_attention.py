"""Cross-modal attention tests: cosine matrices, bidirectional attention, fusion."""

import numpy as np
import pytest

from momentalign import diffcore as dc
from momentalign.attention import (
    bidirectional_attention,
    cosine_matrix,
    fuse_features,
    similarity_matrix,
)
from momentalign.encoders import bigru_param_shapes


class TestCosine:
    def test_orthogonal(self):
        out = cosine_matrix(dc.leaf([[1.0, 0.0]]), dc.leaf([[0.0, 1.0]]))
        assert out.value[0, 0] == 0.0

    def test_identical_direction(self):
        out = cosine_matrix(dc.leaf([[1.0, 1.0]]), dc.leaf([[1.0, 1.0]]))
        assert abs(out.value[0, 0] - 1.0) <= 1e-12

    def test_three_four_case(self):
        # dot = 24, norms 5 and 5 -> 24/25
        out = cosine_matrix(dc.leaf([[3.0, 4.0]]), dc.leaf([[4.0, 3.0]]))
        assert abs(out.value[0, 0] - 0.96) <= 1e-12

    def test_zero_vector_yields_zero_with_zero_grad(self):
        v = dc.leaf([[0.0, 0.0], [1.0, 2.0]])
        q = dc.leaf([[3.0, 1.0]])
        out = cosine_matrix(v, q)
        assert out.value[0, 0] == 0.0
        dc.backward(dc.sum_all(out))
        assert np.array_equal(v.grad[0], np.zeros(2))

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        v, q = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        base = cosine_matrix(dc.leaf(v), dc.leaf(q)).value
        scaled = cosine_matrix(dc.leaf(2.5 * v), dc.leaf(0.3 * q)).value
        assert np.all(np.abs(base - scaled) <= 1e-12)

    def test_absolute_mode(self):
        out = cosine_matrix(dc.leaf([[1.0, 0.0]]), dc.leaf([[-1.0, 0.0]]), mode="absolute")
        assert abs(out.value[0, 0] - 1.0) <= 1e-12

    def test_values_within_unit_interval(self):
        rng = np.random.default_rng(1)
        sim = cosine_matrix(dc.leaf(rng.normal(size=(5, 3))), dc.leaf(rng.normal(size=(4, 3))))
        assert np.all(np.abs(sim.value) <= 1.0 + 1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(dc.ShapeMismatchError):
            cosine_matrix(dc.leaf(np.zeros((2, 3))), dc.leaf(np.zeros((2, 4))))


class TestSimilarityMatrix:
    def test_row_and_column_stochastic(self):
        rng = np.random.default_rng(2)
        sim = similarity_matrix(dc.leaf(rng.normal(size=(5, 3))),
                                dc.leaf(rng.normal(size=(4, 3))))
        rows = sim.row_normalized.value.sum(axis=1)
        cols = sim.col_normalized.value.sum(axis=0)
        assert np.all(np.abs(rows - 1.0) <= 1e-12)
        assert np.all(np.abs(cols - 1.0) <= 1e-12)


class TestBidirectionalAttention:
    def test_single_query_repeats(self):
        rng = np.random.default_rng(3)
        video = dc.leaf(rng.normal(size=(4, 3)))
        query = dc.leaf(rng.normal(size=(1, 3)))
        sim = similarity_matrix(video, query)
        to_query, _ = bidirectional_attention(video, query, sim)
        # every row of the row-normalized matrix is [1]
        for t in range(4):
            assert np.allclose(to_query.value[t], query.value[0], atol=1e-12)

    def test_one_by_one_returns_video(self):
        video = dc.leaf([[2.0, -1.0]])
        query = dc.leaf([[0.5, 0.5]])
        sim = similarity_matrix(video, query)
        _, to_video = bidirectional_attention(video, query, sim)
        assert np.allclose(to_video.value, video.value, atol=1e-12)

    def test_two_by_two_hand_case(self):
        video = np.array([[1.0, 0.0], [0.0, 1.0]])
        query = np.array([[2.0, 0.0], [0.0, 1.0]])
        v, q = dc.leaf(video), dc.leaf(query)
        sim = similarity_matrix(v, q)
        to_query, to_video = bidirectional_attention(v, q, sim)

        cos = np.array([[1.0, 0.0], [0.0, 1.0]])  # unit rows, orthogonal pairs

        def softmax(rows):
            e = np.exp(rows - rows.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        c_r = softmax(cos)
        c_c = softmax(cos.T).T
        assert np.allclose(sim.values.value, cos, atol=1e-12)
        assert np.allclose(to_query.value, c_r @ query, atol=1e-12)
        assert np.allclose(to_video.value, c_r @ c_c.T @ video, atol=1e-12)

    def test_output_rows_are_convex_combinations(self):
        rng = np.random.default_rng(4)
        video = dc.leaf(rng.normal(size=(6, 3)))
        query_vals = rng.normal(size=(4, 3))
        query = dc.leaf(query_vals)
        sim = similarity_matrix(video, query)
        to_query, _ = bidirectional_attention(video, query, sim)
        lo, hi = query_vals.min(axis=0), query_vals.max(axis=0)
        assert np.all(to_query.value >= lo - 1e-12)
        assert np.all(to_query.value <= hi + 1e-12)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(5)
        video = dc.leaf(rng.normal(size=(4, 3)))
        query = dc.leaf(rng.normal(size=(2, 3)))
        sim = similarity_matrix(video, query)
        other = dc.leaf(rng.normal(size=(5, 3)))
        with pytest.raises(dc.ShapeMismatchError):
            bidirectional_attention(other, query, sim)


def hand_gru_step(x, h, wz, uz, bz, wr, ur, br, wc, uc, bc):
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    z = sig(x @ wz + h @ uz + bz)
    r = sig(x @ wr + h @ ur + br)
    c = np.tanh(x @ wc + (r * h) @ uc + bc)
    return (1.0 - z) * h + z * c


class TestFusion:
    def _tiny_params(self):
        # hidden size 1, input width 4 (four d=1 blocks)
        vals = {}
        for direction in ("fw", "bw"):
            for gate, w in (("z", 0.3), ("r", -0.2), ("c", 0.5)):
                vals[f"gru.{direction}.w{gate}"] = np.full((4, 1), w)
                vals[f"gru.{direction}.u{gate}"] = np.array([[0.4]])
                vals[f"gru.{direction}.b{gate}"] = np.array([[0.1]])
        vals["proj.w"] = np.array([[1.0], [0.5]])
        assert set(vals) == set(bigru_param_shapes(4, 1)) | {"proj.w"}
        return {k: dc.leaf(v) for k, v in vals.items()}

    def test_output_shape(self):
        rng = np.random.default_rng(6)
        params = self._tiny_params()
        v = dc.leaf(rng.normal(size=(3, 1)))
        out = fuse_features(v, v, v, params)
        assert out.value.shape == (3, 1)

    def test_hand_traced_two_step_recurrence(self):
        params = self._tiny_params()
        ones = np.ones((2, 1))
        out = fuse_features(dc.leaf(ones), dc.leaf(ones), dc.leaf(ones), params).value

        x = np.ones((1, 4))  # [V; X; V*X; V*Y] with everything one
        args = lambda d: tuple(params[f"gru.{d}.{k}{g}"].value
                               for g in "zrc" for k in ("w", "u", "b"))

        def run(direction, order):
            h = np.zeros((1, 1))
            states = {}
            wz, uz, bz, wr, ur, br, wc, uc, bc = args(direction)
            for t in order:
                h = hand_gru_step(x, h, wz, uz, bz, wr, ur, br, wc, uc, bc)
                states[t] = h
            return states

        fw = run("fw", [0, 1])
        bw = run("bw", [1, 0])
        expected = np.array([
            (np.concatenate([fw[0], bw[0]], axis=1) @ params["proj.w"].value)[0],
            (np.concatenate([fw[1], bw[1]], axis=1) @ params["proj.w"].value)[0],
        ])
        assert np.allclose(out, expected, atol=1e-12)

    def test_gradient_through_fuse_path(self):
        shapes = dict(bigru_param_shapes(4, 1))
        shapes["proj.w"] = (2, 1)

        def build(rng):
            leaves = {name: dc.leaf(rng.normal(size=shape) * 0.5, op=name)
                      for name, shape in shapes.items()}
            v = dc.leaf(rng.normal(size=(3, 1)), op="v")
            x = dc.leaf(rng.normal(size=(3, 1)), op="x")
            y = dc.leaf(rng.normal(size=(3, 1)), op="y")
            out = fuse_features(v, x, y, leaves)
            return dc.sum_all(dc.mean_over_rows(out)), [v, x, y] + list(leaves.values())

        assert dc.grad_check(build, h=1e-5, seed=1) <= 1e-4

    def test_block_shape_mismatch(self):
        params = self._tiny_params()
        with pytest.raises(dc.ShapeMismatchError):
            fuse_features(dc.leaf(np.ones((2, 1))), dc.leaf(np.ones((3, 1))),
                          dc.leaf(np.ones((2, 1))), params)
