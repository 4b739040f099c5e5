"""Sequence encoders: multi-head self-attention and bidirectional GRU stacks.

Video inputs are raw feature matrices; query inputs are token-id sequences
looked up in a learned embedding table. Both encoders are shared across
domains: the same parameter set encodes source and target samples.

The batch entry points run every sample's recurrence in lockstep (one matmul
per gate per step for the whole batch). Shorter sequences freeze their hidden
row once finished via 0/1 masks, so each sample's output is exactly what the
single-sample path computes.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import DiffNode


class OutOfVocabularyError(ValueError):
    """A query token id falls outside the embedding table."""


def attention_param_shapes(dim: int, heads: int) -> dict[str, tuple[int, int]]:
    if dim % heads != 0:
        raise ValueError(f"head count {heads} must divide attention dim {dim}")
    head_dim = dim // heads
    shapes = {}
    for i in range(heads):
        shapes[f"attn.h{i}.wq"] = (dim, head_dim)
        shapes[f"attn.h{i}.wk"] = (dim, head_dim)
        shapes[f"attn.h{i}.wv"] = (dim, head_dim)
    shapes["attn.wo"] = (heads * head_dim, dim)
    return shapes


def bigru_param_shapes(input_dim: int, hidden: int) -> dict[str, tuple[int, int]]:
    shapes = {}
    for direction in ("fw", "bw"):
        for gate in ("z", "r", "c"):
            shapes[f"gru.{direction}.w{gate}"] = (input_dim, hidden)
            shapes[f"gru.{direction}.u{gate}"] = (hidden, hidden)
            shapes[f"gru.{direction}.b{gate}"] = (1, hidden)
    return shapes


# ---------------------------------------------------------------------------
# batched helpers

def _concat_with_offsets(xs: list[DiffNode]):
    if len(xs) == 1:
        return xs[0], [0]
    offsets = []
    total = 0
    for x in xs:
        offsets.append(total)
        total += x.value.shape[0]
    return dc.concat_rows(xs), offsets


def _split_rows(cat: DiffNode, offsets, lengths) -> list[DiffNode]:
    if len(lengths) == 1:
        return [cat]
    return [dc.slice_rows(cat, off, off + n) for off, n in zip(offsets, lengths)]


def project_rows_batch(xs: list[DiffNode], weight: DiffNode,
                       bias: DiffNode | None = None) -> list[DiffNode]:
    """Apply one linear map to every sequence with a single matmul."""
    cat, offsets = _concat_with_offsets(xs)
    out = dc.matmul(cat, weight)
    if bias is not None:
        out = dc.add(out, bias)
    return _split_rows(out, offsets, [x.value.shape[0] for x in xs])


def multi_head_self_attention_batch(xs: list[DiffNode], params: dict[str, DiffNode],
                                    heads: int) -> list[DiffNode]:
    dim = xs[0].value.shape[1]
    if params["attn.h0.wq"].value.shape[0] != dim:
        raise dc.ShapeMismatchError(
            f"attention: input dim {dim} != weight dim {params['attn.h0.wq'].value.shape[0]}"
        )
    head_dim = params["attn.h0.wq"].value.shape[1]
    per_sample_heads: list[list[DiffNode]] = [[] for _ in xs]
    for i in range(heads):
        qs = project_rows_batch(xs, params[f"attn.h{i}.wq"])
        ks = project_rows_batch(xs, params[f"attn.h{i}.wk"])
        vs = project_rows_batch(xs, params[f"attn.h{i}.wv"])
        for j, (q, k, v) in enumerate(zip(qs, ks, vs)):
            scores = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / math.sqrt(head_dim))
            per_sample_heads[j].append(dc.matmul(dc.row_softmax(scores), v))
    merged = [dc.concat_cols(hs) for hs in per_sample_heads]
    return project_rows_batch(merged, params["attn.wo"])


def multi_head_self_attention(x: DiffNode, params: dict[str, DiffNode], heads: int) -> DiffNode:
    """Scaled dot-product self-attention per head, concatenated and projected."""
    return multi_head_self_attention_batch([x], params, heads)[0]


def attention_weights(x_value: np.ndarray, params: dict[str, DiffNode], heads: int,
                      head: int) -> np.ndarray:
    """Softmax attention table of one head, for inspection and tests."""
    x = dc.leaf(x_value)
    q = dc.matmul(x, params[f"attn.h{head}.wq"])
    k = dc.matmul(x, params[f"attn.h{head}.wk"])
    head_dim = params[f"attn.h{head}.wq"].value.shape[1]
    scores = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / math.sqrt(head_dim))
    return dc.row_softmax(scores).value


def gru_sequence_batch(xs: list[DiffNode], params: dict[str, DiffNode], prefix: str,
                       reverse: bool = False) -> list[DiffNode]:
    """One GRU direction over every sequence in lockstep; list of T_i x hidden."""
    hidden = params[f"{prefix}.uz"].value.shape[0]
    for x in xs:
        if x.value.shape[1] != params[f"{prefix}.wz"].value.shape[0]:
            raise dc.ShapeMismatchError(
                f"gru: input dim {x.value.shape} vs weight {params[f'{prefix}.wz'].value.shape}"
            )
    lengths = [x.value.shape[0] for x in xs]
    batch = len(xs)
    t_max = max(lengths)
    t_min = min(lengths)
    cat, offsets = _concat_with_offsets(xs)
    xz = dc.add(dc.matmul(cat, params[f"{prefix}.wz"]), params[f"{prefix}.bz"])
    xr = dc.add(dc.matmul(cat, params[f"{prefix}.wr"]), params[f"{prefix}.br"])
    xc = dc.add(dc.matmul(cat, params[f"{prefix}.wc"]), params[f"{prefix}.bc"])

    ones = dc.constant(np.ones((batch, hidden)))
    h = dc.constant(np.zeros((batch, hidden)))
    steps: list[DiffNode] = []
    for t in range(t_max):
        idx = np.empty(batch, dtype=np.intp)
        for i, (off, n) in enumerate(zip(offsets, lengths)):
            pos = min(t, n - 1)  # finished rows read a dummy; the mask discards them
            idx[i] = off + ((n - 1 - pos) if reverse else pos)
        xz_t = dc.gather_rows(xz, idx)
        xr_t = dc.gather_rows(xr, idx)
        xc_t = dc.gather_rows(xc, idx)
        z = dc.sigmoid(dc.add(xz_t, dc.matmul(h, params[f"{prefix}.uz"])))
        r = dc.sigmoid(dc.add(xr_t, dc.matmul(h, params[f"{prefix}.ur"])))
        cand = dc.tanh(dc.add(xc_t, dc.matmul(dc.mul(r, h), params[f"{prefix}.uc"])))
        keep = dc.add(ones, dc.scale(z, -1.0))
        h_new = dc.add(dc.mul(keep, h), dc.mul(z, cand))
        if t < t_min:
            h = h_new
        else:
            active = np.array([[1.0] if t < n else [0.0] for n in lengths])
            h = dc.add(dc.mul(h_new, dc.constant(active)),
                       dc.mul(h, dc.constant(1.0 - active)))
        steps.append(h)

    stacked = dc.concat_rows(steps) if t_max > 1 else steps[0]
    outs = []
    for i, n in enumerate(lengths):
        if reverse:
            rows = [(n - 1 - pos) * batch + i for pos in range(n)]
        else:
            rows = [t * batch + i for t in range(n)]
        outs.append(dc.gather_rows(stacked, rows))
    return outs


def bi_gru_batch(xs: list[DiffNode], params: dict[str, DiffNode]) -> list[DiffNode]:
    fw = gru_sequence_batch(xs, params, "gru.fw", reverse=False)
    bw = gru_sequence_batch(xs, params, "gru.bw", reverse=True)
    return [dc.concat_cols([f, b]) for f, b in zip(fw, bw)]


def gru_sequence(x: DiffNode, params: dict[str, DiffNode], prefix: str,
                 reverse: bool = False) -> DiffNode:
    return gru_sequence_batch([x], params, prefix, reverse)[0]


def bi_gru(x: DiffNode, params: dict[str, DiffNode]) -> DiffNode:
    """Forward and backward GRU passes concatenated per position (T x 2h)."""
    return bi_gru_batch([x], params)[0]


# ---------------------------------------------------------------------------
# encoders

def embed_tokens(token_ids, table: DiffNode) -> DiffNode:
    """Embedding lookup; gradients scatter back into the table."""
    vocab = table.value.shape[0]
    ids = [int(t) for t in token_ids]
    if not ids:
        raise OutOfVocabularyError("empty token sequence")
    for t in ids:
        if not (0 <= t < vocab):
            raise OutOfVocabularyError(f"token id {t} outside vocabulary of size {vocab}")
    return dc.gather_rows(table, ids)


def encode_video_batch(raws: list[DiffNode], params: dict[str, DiffNode], heads: int,
                       attention_first: bool = True) -> list[DiffNode]:
    if attention_first:
        hs = multi_head_self_attention_batch(raws, params, heads)
        hs = bi_gru_batch(hs, params)
        return project_rows_batch(hs, params["proj.w"])
    hs = bi_gru_batch(raws, params)
    hs = project_rows_batch(hs, params["proj.w"])
    return multi_head_self_attention_batch(hs, params, heads)


def encode_video(raw: DiffNode, params: dict[str, DiffNode], heads: int,
                 attention_first: bool = True) -> DiffNode:
    """Encode a raw T x raw_dim video into a T x d feature sequence."""
    return encode_video_batch([raw], params, heads, attention_first)[0]


def encode_query_batch(token_seqs: list, params: dict[str, DiffNode], heads: int,
                       attention_first: bool = False) -> list[DiffNode]:
    embs = [embed_tokens(ids, params["embed.table"]) for ids in token_seqs]
    if attention_first:
        embs = multi_head_self_attention_batch(embs, params, heads)
        hs = bi_gru_batch(embs, params)
        return project_rows_batch(hs, params["proj.w"])
    hs = bi_gru_batch(embs, params)
    hs = project_rows_batch(hs, params["proj.w"])
    return multi_head_self_attention_batch(hs, params, heads)


def encode_query(token_ids, params: dict[str, DiffNode], heads: int,
                 attention_first: bool = False) -> DiffNode:
    """Encode a token-id sequence into an N x d feature sequence."""
    return encode_query_batch([token_ids], params, heads, attention_first)[0]
