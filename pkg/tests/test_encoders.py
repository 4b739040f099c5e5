"""Encoder tests: attention, Bi-GRU, the two encoders, and batching lockstep."""

import math

import numpy as np
import pytest

from momentalign import diffcore as dc
from momentalign.encoders import (
    OutOfVocabularyError,
    attention_param_shapes,
    attention_weights,
    bi_gru,
    bi_gru_batch,
    bigru_param_shapes,
    embed_tokens,
    encode_query,
    encode_query_batch,
    encode_video,
    encode_video_batch,
    multi_head_self_attention,
)
from momentalign.model import ModelConfig, ModelParams, param_shapes, scoped


def make_params(cfg: ModelConfig, seed=0) -> ModelParams:
    return ModelParams.init(cfg, seed)


def small_cfg(**kw) -> ModelConfig:
    base = dict(feature_dim=4, hidden=3, fusion_hidden=3, heads=2,
                raw_video_dim=4, embed_dim=4, vocab_size=11)
    base.update(kw)
    return ModelConfig(**base).validate()


class TestVideoEncoder:
    def test_shape_preserved(self):
        cfg = small_cfg()
        params = make_params(cfg)
        raw = dc.leaf(np.random.default_rng(0).normal(size=(3, 4)))
        out = encode_video(raw, scoped(params.nodes(), "video."), cfg.heads)
        assert out.value.shape == (3, 4)

    def test_deterministic(self):
        cfg = small_cfg()
        params = make_params(cfg)
        raw = np.random.default_rng(1).normal(size=(5, 4))
        a = encode_video(dc.leaf(raw), scoped(params.nodes(), "video."), cfg.heads).value
        b = encode_video(dc.leaf(raw), scoped(params.nodes(), "video."), cfg.heads).value
        assert np.array_equal(a, b)

    def test_length_equivariance(self):
        cfg = small_cfg()
        params = make_params(cfg)
        rng = np.random.default_rng(2)
        for t in (1, 2, 7):
            out = encode_video(dc.leaf(rng.normal(size=(t, 4))),
                               scoped(params.nodes(), "video."), cfg.heads)
            assert out.value.shape[0] == t

    def test_outputs_finite_on_bounded_inputs(self):
        cfg = small_cfg()
        params = make_params(cfg, seed=5)
        rng = np.random.default_rng(3)
        raw = rng.uniform(-10, 10, size=(6, 4))
        out = encode_video(dc.leaf(raw), scoped(params.nodes(), "video."), cfg.heads)
        assert np.all(np.isfinite(out.value))

    def test_gradient_of_mean_output_wrt_params(self):
        cfg = small_cfg()
        shapes = {f"video.{k}": v for k, v in
                  list(attention_param_shapes(4, 2).items()) + list(bigru_param_shapes(4, 3).items())}
        shapes["video.proj.w"] = (6, 4)

        def build(rng):
            leaves = {name: dc.leaf(rng.normal(size=shape) * 0.4, op=name)
                      for name, shape in shapes.items()}
            raw = dc.leaf(rng.normal(size=(3, 4)), op="raw")
            out = encode_video(raw, scoped(leaves, "video."), cfg.heads)
            return dc.sum_all(dc.mean_over_rows(out)), list(leaves.values()) + [raw]

        assert dc.grad_check(build, h=1e-5, seed=0) <= 1e-4

    def test_dimension_mismatch(self):
        cfg = small_cfg()
        params = make_params(cfg)
        with pytest.raises(dc.ShapeMismatchError):
            encode_video(dc.leaf(np.zeros((3, 5))), scoped(params.nodes(), "video."), cfg.heads)


class TestQueryEncoder:
    def test_single_token_shape(self):
        cfg = small_cfg()
        params = make_params(cfg)
        out = encode_query([3], scoped(params.nodes(), "query."), cfg.heads)
        assert out.value.shape == (1, 4)

    def test_order_sensitivity(self):
        cfg = small_cfg()
        params = make_params(cfg)
        fwd = encode_query([1, 2, 3], scoped(params.nodes(), "query."), cfg.heads).value
        rev = encode_query([3, 2, 1], scoped(params.nodes(), "query."), cfg.heads).value
        assert not np.allclose(fwd, rev)

    def test_zero_table_and_biases_bounded(self):
        cfg = small_cfg()
        params = make_params(cfg)
        for name in params.arrays:
            if name == "query.embed.table" or (name.startswith("query.gru.") and ".b" in name):
                params.arrays[name] = np.zeros_like(params.arrays[name])
        out = encode_query([0, 5, 9], scoped(params.nodes(), "query."), cfg.heads)
        # zero embeddings and biases pin the recurrence at its fixed point
        assert np.all(np.abs(out.value) <= 1.0 + 1e-12)

    def test_out_of_vocabulary(self):
        cfg = small_cfg()
        params = make_params(cfg)
        with pytest.raises(OutOfVocabularyError, match="11"):
            encode_query([10, 11], scoped(params.nodes(), "query."), cfg.heads)

    def test_embedding_gradient_reaches_table(self):
        table = dc.leaf(np.random.default_rng(0).normal(size=(5, 3)))
        emb = embed_tokens([2, 2, 4], table)
        dc.backward(dc.sum_all(emb))
        assert table.grad[2].sum() != 0 and table.grad[4].sum() != 0
        assert np.all(table.grad[0] == 0)


class TestSelfAttention:
    def test_single_position_equals_projected_value(self):
        cfg = small_cfg()
        params = make_params(cfg)
        nodes = scoped(params.nodes(), "video.")
        x = np.random.default_rng(4).normal(size=(1, 4))
        out = multi_head_self_attention(dc.leaf(x), nodes, cfg.heads).value
        # softmax over a single key is 1, so each head passes x @ Wv through
        heads_out = np.concatenate(
            [x @ nodes[f"attn.h{i}.wv"].value for i in range(cfg.heads)], axis=1)
        expected = heads_out @ nodes["attn.wo"].value
        assert np.allclose(out, expected, atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        cfg = small_cfg()
        params = make_params(cfg)
        nodes = scoped(params.nodes(), "video.")
        x = np.random.default_rng(5).normal(size=(4, 4))
        for head in range(cfg.heads):
            table = attention_weights(x, nodes, cfg.heads, head)
            assert np.all(np.abs(table.sum(axis=1) - 1.0) <= 1e-12)

    def test_two_position_hand_case(self):
        # one head, dim 2, hand-set weights, hand-computed softmax table
        shapes = attention_param_shapes(2, 1)
        nodes = {
            "attn.h0.wq": dc.leaf([[1.0, 0.0], [0.0, 1.0]]),
            "attn.h0.wk": dc.leaf([[1.0, 0.0], [0.0, 1.0]]),
            "attn.h0.wv": dc.leaf([[2.0, 0.0], [0.0, 2.0]]),
            "attn.wo": dc.leaf([[1.0, 0.0], [0.0, 1.0]]),
        }
        assert set(shapes) == set(nodes)
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = multi_head_self_attention(dc.leaf(x), nodes, 1).value
        scale = 1.0 / math.sqrt(2.0)
        logits = x @ x.T * scale
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        soft = e / e.sum(axis=1, keepdims=True)
        expected = soft @ (x * 2.0)
        assert np.allclose(out, expected, atol=1e-12)


class TestBiGru:
    def test_output_dim_doubles_hidden(self):
        cfg = small_cfg()
        params = make_params(cfg)
        nodes = scoped(params.nodes(), "video.")
        out = bi_gru(dc.leaf(np.random.default_rng(6).normal(size=(4, 4))), nodes)
        assert out.value.shape == (4, 6)

    def test_reversal_swaps_channels(self):
        cfg = small_cfg()
        params = make_params(cfg)
        nodes = params.nodes()
        # make forward and backward cells identical so the swap is exact
        for gate in ("z", "r", "c"):
            for kind in ("w", "u", "b"):
                nodes[f"video.gru.bw.{kind}{gate}"] = nodes[f"video.gru.fw.{kind}{gate}"]
        sub = scoped(nodes, "video.")
        x = np.random.default_rng(7).normal(size=(3, 4))
        h = 3
        out = bi_gru(dc.leaf(x), sub).value
        out_rev = bi_gru(dc.leaf(x[::-1].copy()), sub).value
        swapped = np.concatenate([out_rev[::-1, h:], out_rev[::-1, :h]], axis=1)
        assert np.allclose(out, swapped, atol=1e-12)

    def test_gradient_check_on_gru_weights(self):
        shapes = bigru_param_shapes(3, 2)

        def build(rng):
            leaves = {name: dc.leaf(rng.normal(size=shape) * 0.5, op=name)
                      for name, shape in shapes.items()}
            x = dc.leaf(rng.normal(size=(3, 3)), op="x")
            out = bi_gru(x, leaves)
            return dc.sum_all(dc.mean_over_rows(out)), list(leaves.values()) + [x]

        assert dc.grad_check(build, h=1e-5, seed=3) <= 1e-4


class TestBatchingLockstep:
    def test_batched_equals_single(self):
        cfg = small_cfg()
        params = make_params(cfg, seed=9)
        rng = np.random.default_rng(8)
        raws = [rng.normal(size=(t, 4)) for t in (5, 2, 7)]
        nodes = params.nodes()
        sub = scoped(nodes, "video.")
        batched = encode_video_batch([dc.leaf(r) for r in raws], sub, cfg.heads)
        for raw, out in zip(raws, batched):
            single = encode_video(dc.leaf(raw), sub, cfg.heads)
            assert np.allclose(out.value, single.value, atol=1e-12)

    def test_batched_queries_equal_single(self):
        cfg = small_cfg()
        params = make_params(cfg, seed=10)
        sub = scoped(params.nodes(), "query.")
        seqs = [[1, 2], [3], [4, 5, 6, 7]]
        batched = encode_query_batch(seqs, sub, cfg.heads)
        for ids, out in zip(seqs, batched):
            single = encode_query(ids, sub, cfg.heads)
            assert np.allclose(out.value, single.value, atol=1e-12)

    def test_batch_gradients_flow(self):
        cfg = small_cfg()
        params = make_params(cfg, seed=11)
        nodes = params.nodes()
        outs = encode_video_batch(
            [dc.leaf(np.random.default_rng(12).normal(size=(t, 4))) for t in (3, 5)],
            scoped(nodes, "video."), cfg.heads)
        total = dc.add(dc.sum_all(outs[0]), dc.sum_all(outs[1]))
        dc.backward(total)
        assert nodes["video.gru.fw.wz"].grad is not None
        assert np.any(nodes["video.gru.fw.wz"].grad != 0)


class TestSharedAcrossDomains:
    def test_single_parameter_namespace(self):
        cfg = small_cfg()
        names = list(param_shapes(cfg))
        encoder_names = [n for n in names if n.startswith(("video.", "query.", "fusion."))]
        # no per-domain copies: domain tags only appear on the projection heads
        assert not any("source" in n or "target" in n for n in encoder_names)

    def test_same_params_encode_both_domains(self):
        cfg = small_cfg()
        params = make_params(cfg)
        sub = scoped(params.nodes(), "video.")
        rng = np.random.default_rng(13)
        src, tgt = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
        out_src = encode_video(dc.leaf(src), sub, cfg.heads)
        out_tgt = encode_video(dc.leaf(tgt), sub, cfg.heads)
        assert out_src.value.shape == (3, 4) and out_tgt.value.shape == (4, 4)
