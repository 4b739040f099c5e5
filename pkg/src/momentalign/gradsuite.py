"""Named gradient checks for every differentiable op and composite loss.

Each check builds a small scalar-output graph on seeded random inputs and
compares analytic gradients against central finite differences. Inputs keep a
safe distance from kinks (hinge corners, max ties, domain edges) so the checks
measure backward-pass correctness, not subgradient selection.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .losses import (
    BatchFeatures,
    LossWeights,
    cross_modal_consistent_loss,
    cross_modal_distribution_loss,
    final_loss,
    modality_alignment_loss,
    pooled_projection,
    specific_alignment_loss,
    supervised_loss,
)

TOLERANCE = 1e-4


def _probe(node, rng):
    """Reduce an arbitrary node to a scalar through a fixed random weighting."""
    w = dc.leaf(rng.normal(size=node.value.shape), op="probe")
    return dc.sum_all(dc.mul(node, w)), w


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, x + np.sign(x + 1e-12) * gap, x)


def _distinct_rows(rng, shape, gap=0.05):
    """Random matrix whose per-row and per-column top-2 gaps exceed `gap`."""
    x = rng.normal(size=shape)
    x += np.arange(x.size).reshape(shape) * gap * 3
    return x


def op_checks() -> dict:
    """name -> builder(rng) -> (scalar output node, leaf list)."""

    def simple(op, n_inputs=1, make=lambda rng: rng.normal(size=(3, 4))):
        def build(rng):
            leaves = [dc.leaf(make(rng), op=f"input{i}") for i in range(n_inputs)]
            out, w = _probe(op(*leaves), rng)
            return out, leaves + [w]
        return build

    checks = {
        "add": simple(dc.add, 2),
        "add_row_broadcast": lambda rng: _binary_broadcast(dc.add, rng, (1, 4)),
        "add_scalar_broadcast": lambda rng: _binary_broadcast(dc.add, rng, (1, 1)),
        "mul": simple(dc.mul, 2),
        "mul_scalar_broadcast": lambda rng: _binary_broadcast(dc.mul, rng, (1, 1)),
        "divide": _divide_check,
        "scale": simple(lambda a: dc.scale(a, -2.5)),
        "matmul": _matmul_check,
        "transpose": simple(dc.transpose),
        "concat_cols": _concat_check(dc.concat_cols, axis=1),
        "concat_rows": _concat_check(dc.concat_rows, axis=0),
        "slice_rows": simple(lambda a: dc.slice_rows(a, 1, 3)),
        "row_softmax": simple(dc.row_softmax),
        "mean_over_rows": simple(dc.mean_over_rows),
        "std_over_rows": simple(dc.std_over_rows),
        "l2_norm": simple(dc.l2_norm),
        "row_norms": simple(dc.row_norms),
        "sqrt": simple(dc.sqrt, make=lambda rng: rng.uniform(0.1, 3.0, size=(3, 4))),
        "exp": simple(dc.exp),
        "log": simple(dc.log, make=lambda rng: rng.uniform(0.1, 3.0, size=(3, 4))),
        "tanh": simple(dc.tanh),
        "sigmoid": simple(dc.sigmoid),
        "max_over_axis0": simple(lambda a: dc.max_over_axis(a, 0),
                                 make=lambda rng: _distinct_rows(rng, (3, 4))),
        "max_over_axis1": simple(lambda a: dc.max_over_axis(a, 1),
                                 make=lambda rng: _distinct_rows(rng, (3, 4))),
        "hinge": simple(dc.hinge, make=lambda rng: _away_from_zero(rng, (3, 4))),
        "abs": simple(dc.abs_value, make=lambda rng: _away_from_zero(rng, (3, 4))),
        "sum_all": simple(dc.sum_all),
    }
    return checks


def _binary_broadcast(op, rng, b_shape):
    a = dc.leaf(rng.normal(size=(3, 4)), op="input0")
    b = dc.leaf(rng.normal(size=b_shape), op="input1")
    out, w = _probe(op(a, b), rng)
    return out, [a, b, w]


def _divide_check(rng):
    a = dc.leaf(rng.normal(size=(3, 4)), op="num")
    b = dc.leaf(_away_from_zero(rng, (3, 4), gap=0.2), op="den")
    out, w = _probe(dc.divide(a, b), rng)
    return out, [a, b, w]


def _matmul_check(rng):
    a = dc.leaf(rng.normal(size=(3, 4)), op="a")
    b = dc.leaf(rng.normal(size=(4, 2)), op="b")
    out, w = _probe(dc.matmul(a, b), rng)
    return out, [a, b, w]


def _concat_check(op, axis):
    def build(rng):
        shapes = [(3, 2), (3, 3)] if axis == 1 else [(2, 3), (3, 3)]
        leaves = [dc.leaf(rng.normal(size=s), op=f"part{i}") for i, s in enumerate(shapes)]
        out, w = _probe(op(leaves), rng)
        return out, leaves + [w]
    return build


# ---------------------------------------------------------------------------
# composite losses on tiny feature batches

_D = 2  # feature dim for loss checks; small keeps finite differencing fast


def _feature_batch(rng, count=2, rows=2, dim=_D, tag="seq"):
    return [dc.leaf(rng.normal(size=(rows, dim)), op=f"{tag}{i}") for i in range(count)]


def _projection(rng, tag):
    return dc.leaf(rng.normal(size=(_D, _D)), op=tag)


def _weights():
    return LossWeights()


def _supervised_check(rng):
    videos = _feature_batch(rng, tag="video")
    queries = _feature_batch(rng, tag="query")
    pv, pq = _projection(rng, "pv"), _projection(rng, "pq")
    loss = supervised_loss(pooled_projection(videos, pv), pooled_projection(queries, pq), 0.2)
    return loss, videos + queries + [pv, pq]


def _domain_video_check(rng):
    src = _feature_batch(rng, count=3, rows=3, tag="src")
    tgt = _feature_batch(rng, count=2, rows=2, tag="tgt")
    loss = modality_alignment_loss(src, tgt, _weights())
    return loss, src + tgt


def _domain_query_check(rng):
    src = _feature_batch(rng, count=2, rows=2, tag="src")
    tgt = _feature_batch(rng, count=3, rows=2, tag="tgt")
    loss = modality_alignment_loss(src, tgt, _weights())
    return loss, src + tgt


def _consistency_check(rng):
    videos = _feature_batch(rng, count=3, tag="video")
    queries = _feature_batch(rng, count=3, tag="query")
    pv, pq = _projection(rng, "PV"), _projection(rng, "PQ")
    loss = cross_modal_consistent_loss(
        pooled_projection(videos, pv), pooled_projection(queries, pq), 0.2)
    return loss, videos + queries + [pv, pq]


def _distribution_check(rng):
    videos = _feature_batch(rng, count=3, rows=3, tag="video")
    queries = _feature_batch(rng, count=3, rows=2, tag="query")
    loss = cross_modal_distribution_loss(videos, queries)
    return loss, videos + queries


def _specific_check(rng):
    frames = dc.leaf(rng.normal(size=(3, _D)), op="frames")
    queries = _feature_batch(rng, count=2, rows=2, tag="query")
    loss = specific_alignment_loss(frames, queries)
    return loss, [frames] + queries


def _final_check(rng):
    src = BatchFeatures(
        videos_encoded=_feature_batch(rng, tag="sv"),
        queries_encoded=_feature_batch(rng, tag="sq"),
        videos_fused=_feature_batch(rng, tag="sf"),
    )
    tgt = BatchFeatures(
        videos_encoded=_feature_batch(rng, tag="tv"),
        queries_encoded=_feature_batch(rng, tag="tq"),
        videos_fused=_feature_batch(rng, tag="tf"),
    )
    projections = {
        "project.source_video": _projection(rng, "psv"),
        "project.source_query": _projection(rng, "psq"),
        "project.target_video": _projection(rng, "ptv"),
        "project.target_query": _projection(rng, "ptq"),
    }
    loss, _ = final_loss(src, tgt, projections, _weights())
    leaves = (src.videos_encoded + src.queries_encoded + src.videos_fused
              + tgt.videos_encoded + tgt.queries_encoded + tgt.videos_fused
              + list(projections.values()))
    return loss, leaves


def loss_checks() -> dict:
    return {
        "L_SL": _supervised_check,
        "L_DV": _domain_video_check,
        "L_DQ": _domain_query_check,
        "L_M1": _consistency_check,
        "L_M2": _distribution_check,
        "L_SA": _specific_check,
        "L_final": _final_check,
    }


def all_checks() -> dict:
    checks = op_checks()
    checks.update(loss_checks())
    return checks


class _CorruptOp:
    """Test hook: wraps one diffcore op so its backward pass is slightly wrong."""

    def __init__(self, op_name: str):
        if not hasattr(dc, op_name):
            raise ValueError(f"no diffcore op named {op_name!r}")
        self.op_name = op_name
        self.original = getattr(dc, op_name)

    def __enter__(self):
        original = self.original

        def wrapped(*args, **kwargs):
            node = original(*args, **kwargs)
            vjp = node._vjp
            if vjp is not None:
                node._vjp = lambda g: vjp(g * 1.01)
            return node

        setattr(dc, self.op_name, wrapped)
        return self

    def __exit__(self, *exc):
        setattr(dc, self.op_name, self.original)


def run_suite(seed: int = 0, instances: int = 100, h: float = 1e-5,
              corrupt_op: str | None = None):
    """Run every check `instances` times; returns (results, worst_name, worst_err).

    results maps check name to its max relative error. corrupt_op temporarily
    breaks one op's backward pass, for verifying that the suite catches it.
    """
    results = {}

    def execute():
        # checks must be collected inside any corruption context so the op
        # table sees the patched function
        for name, builder in all_checks().items():
            worst = 0.0
            for k in range(instances):
                err = dc.grad_check(builder, h=h, seed=seed + 1000003 * k)
                worst = max(worst, err)
            results[name] = worst

    if corrupt_op is not None:
        with _CorruptOp(corrupt_op):
            execute()
    else:
        execute()
    worst_name = max(results, key=lambda k: results[k])
    return results, worst_name, results[worst_name]
