"""Seeded synthetic cross-domain benchmark with planted moments.

Each sample pairs a video feature sequence with a token-id query. Frames
inside the planted boundary are a linear image of the query's latent event
vector plus Gaussian noise; frames outside follow distractor events. Target
videos additionally pass through a configurable affine shift, which is the
controlled domain gap the alignment losses are meant to close.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_FORMAT = "momentalign-dataset"


class DatasetError(ValueError):
    """Malformed dataset directory or manifest."""


@dataclass
class ProfileStats:
    """Length statistics of one dataset family."""

    t_range: tuple[int, int]
    n_range: tuple[int, int]
    moment_frac: tuple[float, float]


# Desk-scale stand-ins for the three dataset families: open-domain videos are
# longer with long moments, indoor clips are short with short moments, and the
# cooking set has long videos with tiny moments and few samples.
PROFILES: dict[str, ProfileStats] = {
    "activity": ProfileStats(t_range=(18, 28), n_range=(6, 10), moment_frac=(0.30, 0.55)),
    "charades": ProfileStats(t_range=(8, 14), n_range=(4, 7), moment_frac=(0.20, 0.40)),
    "tacos": ProfileStats(t_range=(30, 44), n_range=(5, 8), moment_frac=(0.06, 0.16)),
}


@dataclass
class GenConfig:
    """Everything the generator needs; generation is a pure function of this."""

    n_source: int = 200
    n_target: int = 200
    source_profile: str = "activity"
    target_profile: str = "activity"
    raw_dim: int = 16
    event_dim: int = 8
    noise: float = 0.05
    translation_scale: float = 0.0
    rotation_angle: float = 0.0
    feature_scaling: float = 0.0
    vocab_size: int = 64
    seed: int = 0

    def validate(self) -> "GenConfig":
        if self.n_source < 1 or self.n_target < 1:
            raise ValueError("sample counts must be >= 1")
        if self.raw_dim < 1 or self.event_dim < 1 or self.vocab_size < 1:
            raise ValueError("dims and vocabulary size must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        for name in (self.source_profile, self.target_profile):
            if name not in PROFILES:
                raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        kwargs = dict(data)
        return cls(**kwargs).validate()


@dataclass
class Sample:
    video: np.ndarray            # T x raw_dim, float32-quantized values
    query_tokens: np.ndarray     # N ints
    boundary: tuple[int, int] | None

    @property
    def length(self) -> int:
        return self.video.shape[0]


@dataclass
class DomainDataset:
    samples: list[Sample]
    domain: str
    dim: int
    vocab_size: int
    seed: int
    profile: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def has_boundaries(self) -> bool:
        return all(s.boundary is not None for s in self.samples)

    def without_boundaries(self) -> "DomainDataset":
        stripped = [Sample(s.video, s.query_tokens, None) for s in self.samples]
        return DomainDataset(stripped, self.domain, self.dim, self.vocab_size,
                             self.seed, self.profile)


@dataclass
class AffineShift:
    """Affine domain gap: frames are scaled per dimension, rotated in a random
    2-plane, then translated; the translation norm equals translation_scale."""

    rotation: np.ndarray     # raw_dim x raw_dim orthogonal
    scaling: np.ndarray      # raw_dim diagonal entries
    translation: np.ndarray  # raw_dim offset

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return (frames * self.scaling) @ self.rotation.T + self.translation


def _plane_rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    if dim == 1 or angle == 0.0:
        return np.eye(dim)
    basis = rng.normal(size=(dim, 2))
    q, _ = np.linalg.qr(basis)
    u, v = q[:, 0:1], q[:, 1:2]
    c, s = np.cos(angle), np.sin(angle)
    return np.eye(dim) + (c - 1.0) * (u @ u.T + v @ v.T) + s * (v @ u.T - u @ v.T)


def make_shift(cfg: GenConfig, rng: np.random.Generator) -> AffineShift:
    rotation = _plane_rotation(cfg.raw_dim, cfg.rotation_angle, rng)
    scaling = 1.0 + cfg.feature_scaling * rng.uniform(-1.0, 1.0, size=cfg.raw_dim)
    direction = rng.normal(size=cfg.raw_dim)
    norm = np.linalg.norm(direction)
    direction = direction / norm if norm > 0 else np.zeros(cfg.raw_dim)
    return AffineShift(rotation, scaling, cfg.translation_scale * direction)


def _quantize(frames: np.ndarray) -> np.ndarray:
    # datasets live on disk as float32; quantize once so round trips are exact
    return frames.astype(np.float32).astype(np.float64)


def sample_from_seed(child_seed, stats: ProfileStats, codebook: np.ndarray,
                     mixing: np.ndarray, noise: float,
                     shift: AffineShift | None) -> Sample:
    """Generate one sample; the shift is the only domain-dependent step."""
    rng = np.random.default_rng(child_seed)
    t_lo, t_hi = stats.t_range
    n_lo, n_hi = stats.n_range
    length = int(rng.integers(t_lo, t_hi + 1))
    n_tokens = int(rng.integers(n_lo, n_hi + 1))
    span = int(round(length * rng.uniform(*stats.moment_frac)))
    span = min(max(span, 1), length)
    start = int(rng.integers(0, length - span + 1))
    end = start + span - 1

    vocab = codebook.shape[0]
    tokens = rng.choice(vocab, size=min(n_tokens, vocab), replace=False)

    def token_event(ids):
        vec = codebook[ids].mean(axis=0)
        return vec / max(np.linalg.norm(vec), 1e-8)

    event = token_event(tokens)
    # distractor segments follow the same generative family as true moments,
    # so telling them apart requires the query, not just "is this an event"
    distractors = np.stack([
        token_event(rng.choice(vocab, size=min(n_tokens, vocab), replace=False))
        for _ in range(2)
    ])

    frames = np.empty((length, mixing.shape[0]))
    for t in range(length):
        if start <= t <= end:
            core = event
        elif t < start:
            core = distractors[0]
        else:
            core = distractors[1]
        frames[t] = mixing @ core
    frames += noise * rng.normal(size=frames.shape)
    if shift is not None:
        frames = shift.apply(frames)
    return Sample(_quantize(frames), tokens.astype(np.int64), (start, end))


def generate(cfg: GenConfig) -> tuple[DomainDataset, DomainDataset]:
    """Build the source and target datasets; pure function of the config."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    shared_ss, shift_ss, source_ss, target_ss = root.spawn(4)
    shared_rng = np.random.default_rng(shared_ss)
    codebook = shared_rng.normal(size=(cfg.vocab_size, cfg.event_dim))
    mixing = shared_rng.normal(size=(cfg.raw_dim, cfg.event_dim)) / np.sqrt(cfg.event_dim)
    shift = make_shift(cfg, np.random.default_rng(shift_ss))

    source_children = source_ss.spawn(cfg.n_source)
    target_children = target_ss.spawn(cfg.n_target)
    src_stats = PROFILES[cfg.source_profile]
    tgt_stats = PROFILES[cfg.target_profile]
    source = DomainDataset(
        [sample_from_seed(s, src_stats, codebook, mixing, cfg.noise, None)
         for s in source_children],
        domain="source", dim=cfg.raw_dim, vocab_size=cfg.vocab_size, seed=cfg.seed,
        profile=cfg.source_profile,
    )
    target = DomainDataset(
        [sample_from_seed(s, tgt_stats, codebook, mixing, cfg.noise, shift)
         for s in target_children],
        domain="target", dim=cfg.raw_dim, vocab_size=cfg.vocab_size, seed=cfg.seed,
        profile=cfg.target_profile,
    )
    return source, target


def shared_arrays(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """The (codebook, mixing) pair a config generates; exposed for tests."""
    shared_ss = np.random.SeedSequence(cfg.seed).spawn(4)[0]
    shared_rng = np.random.default_rng(shared_ss)
    codebook = shared_rng.normal(size=(cfg.vocab_size, cfg.event_dim))
    mixing = shared_rng.normal(size=(cfg.raw_dim, cfg.event_dim)) / np.sqrt(cfg.event_dim)
    return codebook, mixing


# ---------------------------------------------------------------------------
# on-disk format

def save_dataset(dataset: DomainDataset, directory) -> None:
    """manifest.json plus one float32 binary per sample per modality."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {directory}: {exc}") from exc
    entries = []
    for i, sample in enumerate(dataset.samples):
        video_file = f"{i:05d}.video.f32"
        query_file = f"{i:05d}.query.f32"
        (directory / video_file).write_bytes(sample.video.astype("<f4").tobytes())
        (directory / query_file).write_bytes(
            sample.query_tokens.astype("<f4").tobytes()
        )
        entries.append({
            "id": i,
            "video_file": video_file,
            "query_file": query_file,
            "T": int(sample.video.shape[0]),
            "N": int(sample.query_tokens.shape[0]),
            "boundary": list(sample.boundary) if sample.boundary is not None else None,
        })
    manifest = {
        "format": DATASET_FORMAT,
        "domain": dataset.domain,
        "dim": dataset.dim,
        "vocab_size": dataset.vocab_size,
        "seed": dataset.seed,
        "profile": dataset.profile,
        "samples": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(directory) -> DomainDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc
    for key in ("domain", "dim", "samples"):
        if key not in manifest:
            raise DatasetError(f"manifest {manifest_path} lacks key {key!r}")
    dim = int(manifest["dim"])
    samples = []
    for entry in manifest["samples"]:
        sid = entry.get("id")
        video_path = directory / entry["video_file"]
        query_path = directory / entry["query_file"]
        for path in (video_path, query_path):
            if not path.exists():
                raise DatasetError(f"sample {sid}: missing file {path}")
        t, n = int(entry["T"]), int(entry["N"])
        video_bytes = video_path.read_bytes()
        if len(video_bytes) != 4 * t * dim:
            raise DatasetError(
                f"sample {sid}: video file {video_path.name} has {len(video_bytes)} bytes, "
                f"expected {4 * t * dim} for {t}x{dim}"
            )
        query_bytes = query_path.read_bytes()
        if len(query_bytes) != 4 * n:
            raise DatasetError(
                f"sample {sid}: query file {query_path.name} has {len(query_bytes)} bytes, "
                f"expected {4 * n}"
            )
        video = np.frombuffer(video_bytes, dtype="<f4").astype(np.float64).reshape(t, dim)
        tokens = np.frombuffer(query_bytes, dtype="<f4").astype(np.int64)
        boundary = entry.get("boundary")
        if boundary is not None:
            s, e = int(boundary[0]), int(boundary[1])
            if not (0 <= s <= e < t):
                raise DatasetError(f"sample {sid}: boundary {boundary} outside [0, {t})")
            boundary = (s, e)
        samples.append(Sample(video, tokens, boundary))
    return DomainDataset(
        samples=samples,
        domain=manifest["domain"],
        dim=dim,
        vocab_size=int(manifest.get("vocab_size", 0)),
        seed=int(manifest.get("seed", 0)),
        profile=manifest.get("profile", ""),
    )
