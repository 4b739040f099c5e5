"""Model assembly: parameter container, checkpoint format, forward passes.

One parameter set serves both domains; there is no per-domain weight storage.
Checkpoints are a JSON manifest (dims, seed, array shapes) plus a sidecar
binary of raw little-endian float32 arrays in manifest order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .attention import cosine_matrix, fuse_pairs_batch
from .diffcore import DiffNode
from .encoders import (
    attention_param_shapes,
    bigru_param_shapes,
    encode_query_batch,
    encode_video_batch,
)
from .losses import BatchFeatures, intra_sample_mean

MODEL_FORMAT = "momentalign-model"


@dataclass
class ModelConfig:
    """Dimensions and structural flags shared by training and inference."""

    feature_dim: int = 16
    hidden: int = 8
    fusion_hidden: int = 8
    heads: int = 2
    raw_video_dim: int = 16
    embed_dim: int = 16
    vocab_size: int = 64
    video_attention_first: bool = True
    query_attention_first: bool = False
    cosine_mode: str = "signed"

    def validate(self) -> "ModelConfig":
        for name in ("feature_dim", "hidden", "fusion_hidden", "heads",
                     "raw_video_dim", "embed_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.video_attn_dim % self.heads or self.query_attn_dim % self.heads:
            raise ValueError(
                f"head count {self.heads} must divide attention dims "
                f"{self.video_attn_dim} and {self.query_attn_dim}"
            )
        if self.cosine_mode not in ("signed", "absolute"):
            raise ValueError(f"unknown cosine mode {self.cosine_mode!r}")
        return self

    @property
    def video_attn_dim(self) -> int:
        return self.raw_video_dim if self.video_attention_first else self.feature_dim

    @property
    def query_attn_dim(self) -> int:
        return self.embed_dim if self.query_attention_first else self.feature_dim

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data).validate()


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Ordered name -> shape map; the order defines the flat-vector layout."""
    shapes: dict[str, tuple[int, int]] = {}
    for name, shape in attention_param_shapes(cfg.video_attn_dim, cfg.heads).items():
        shapes[f"video.{name}"] = shape
    for name, shape in bigru_param_shapes(cfg.raw_video_dim, cfg.hidden).items():
        shapes[f"video.{name}"] = shape
    shapes["video.proj.w"] = (2 * cfg.hidden, cfg.feature_dim)

    shapes["query.embed.table"] = (cfg.vocab_size, cfg.embed_dim)
    for name, shape in attention_param_shapes(cfg.query_attn_dim, cfg.heads).items():
        shapes[f"query.{name}"] = shape
    for name, shape in bigru_param_shapes(cfg.embed_dim, cfg.hidden).items():
        shapes[f"query.{name}"] = shape
    shapes["query.proj.w"] = (2 * cfg.hidden, cfg.feature_dim)

    for name, shape in bigru_param_shapes(4 * cfg.feature_dim, cfg.fusion_hidden).items():
        shapes[f"fusion.{name}"] = shape
    shapes["fusion.proj.w"] = (2 * cfg.fusion_hidden, cfg.feature_dim)

    for name in ("source_video", "source_query", "target_video", "target_query"):
        shapes[f"project.{name}"] = (cfg.feature_dim, cfg.feature_dim)
    return shapes


def _fan_in(name: str, shape: tuple[int, int]) -> int:
    # biases and the embedding table scale by their width, weights by rows
    if shape[0] == 1 or name.endswith("embed.table"):
        return shape[1]
    return shape[0]


class ModelParams:
    """All learnable arrays, addressable by name or as one flat vector."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray], seed: int | None = None):
        self.config = config
        self.arrays = arrays
        self.seed = seed

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        config.validate()
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in param_shapes(config).items():
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, arrays, seed=seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        total = sum(a.size for a in self.arrays.values())
        if vec.shape != (total,):
            raise ValueError(f"flat vector length {vec.shape} != parameter count ({total},)")
        offset = 0
        new = {}
        for name, a in self.arrays.items():
            new[name] = vec[offset : offset + a.size].reshape(a.shape).copy()
            offset += a.size
        self.arrays = new

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.seed)

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    # -- graph construction -------------------------------------------------

    def nodes(self) -> dict[str, DiffNode]:
        """Fresh leaf nodes over the current arrays (arrays are not copied and
        must be treated as immutable while a graph is alive)."""
        return {name: dc.leaf(a, op=name) for name, a in self.arrays.items()}

    def grad_flat(self, nodes: dict[str, DiffNode]) -> np.ndarray:
        # parameters the loss never touched get an exactly-zero gradient
        parts = []
        for name, a in self.arrays.items():
            grad = nodes[name].grad
            parts.append(grad.ravel() if grad is not None else np.zeros(a.size))
        return np.concatenate(parts)

    # -- checkpoint format ---------------------------------------------------

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        manifest = {
            "format": MODEL_FORMAT,
            "version": 1,
            "config": asdict(self.config),
            "seed": self.seed,
            "arrays": [
                {"name": name, "rows": a.shape[0], "cols": a.shape[1]}
                for name, a in self.arrays.items()
            ],
        }
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        with open(prefix.with_suffix(".bin"), "wb") as fh:
            for a in self.arrays.values():
                fh.write(a.astype("<f4").tobytes())

    @classmethod
    def load(cls, prefix) -> "ModelParams":
        prefix = Path(prefix)
        manifest_path = prefix.with_suffix(".json")
        if not manifest_path.exists():
            raise FileNotFoundError(f"model manifest not found: {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a model manifest: {manifest_path}")
        config = ModelConfig.from_dict(manifest["config"])
        raw = prefix.with_suffix(".bin").read_bytes()
        arrays = {}
        offset = 0
        for entry in manifest["arrays"]:
            n = entry["rows"] * entry["cols"]
            chunk = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
            if chunk.size != n:
                raise ValueError(f"model binary truncated at array {entry['name']!r}")
            arrays[entry["name"]] = chunk.astype(np.float64).reshape(entry["rows"], entry["cols"])
            offset += 4 * n
        if offset != len(raw):
            raise ValueError(f"model binary has {len(raw) - offset} trailing bytes")
        return cls(config, arrays, seed=manifest.get("seed"))


def scoped(nodes: dict[str, DiffNode], prefix: str) -> dict[str, DiffNode]:
    cut = len(prefix)
    return {k[cut:]: v for k, v in nodes.items() if k.startswith(prefix)}


def batch_features(nodes: dict[str, DiffNode], cfg: ModelConfig, samples) -> BatchFeatures:
    """Forward a list of samples into the per-batch feature collection."""
    for sample in samples:
        if sample.video.shape[1] != cfg.raw_video_dim:
            raise dc.ShapeMismatchError(
                f"raw video dim {sample.video.shape[1]} != configured {cfg.raw_video_dim}"
            )
    raw_leaves = [dc.leaf(s.video) for s in samples]
    v_enc = encode_video_batch(raw_leaves, scoped(nodes, "video."), cfg.heads,
                               cfg.video_attention_first)
    q_enc = encode_query_batch([s.query_tokens for s in samples], scoped(nodes, "query."),
                               cfg.heads, cfg.query_attention_first)
    fused = fuse_pairs_batch(v_enc, q_enc, scoped(nodes, "fusion."), cfg.cosine_mode)
    return BatchFeatures(videos_encoded=v_enc, queries_encoded=q_enc, videos_fused=fused)


def forward_sample(nodes: dict[str, DiffNode], cfg: ModelConfig,
                   raw_video: np.ndarray, token_ids) -> tuple[DiffNode, DiffNode, DiffNode]:
    """Encode one video/query pair and fuse: (video_encoded, query_encoded, fused)."""

    class _Pair:
        video = raw_video
        query_tokens = token_ids

    feats = batch_features(nodes, cfg, [_Pair()])
    return feats.videos_encoded[0], feats.queries_encoded[0], feats.videos_fused[0]


def frame_scores_value(params: ModelParams, raw_video: np.ndarray, token_ids) -> np.ndarray:
    """Per-frame cosine between fused frame features and the pooled query."""
    nodes = params.nodes()
    _, q_enc, fused = forward_sample(nodes, params.config, raw_video, token_ids)
    pooled = intra_sample_mean(q_enc)
    scores = cosine_matrix(fused, pooled, params.config.cosine_mode)
    return scores.value[:, 0].copy()
