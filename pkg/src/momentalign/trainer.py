"""Two-stage optimization: supervised pre-training on the annotated source,
then main training on source plus target with the full alignment objective.

Adam with bias correction, global-norm gradient clipping, linear learning-rate
decay, and early stopping on a held-out source split. Runs are bit-reproducible
for a fixed seed: batching randomness is a dedicated child generator, separate
from parameter initialization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .losses import LossWeights, final_loss
from .model import ModelConfig, ModelParams, batch_features
from .synthdata import DomainDataset

LOG_COLUMNS = ["epoch", "L_final", "L_SL", "L_DA", "L_M1", "L_M2", "L_SA", "grad_norm", "lr"]


class UnannotatedSourceError(ValueError):
    """Pre-training needs boundary annotations on every source sample."""


class NumericsError(RuntimeError):
    """A loss or gradient became non-finite during training."""


@dataclass
class TrainConfig:
    learning_rate: float = 4e-4
    epochs: int = 100
    batch_size: int = 16
    clip_norm: float = 1.0
    seed: int = 0
    patience: int = 10
    holdout_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fresh_optimizer_stage2: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (ranking losses need negatives)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")
        if not (0.0 <= self.holdout_fraction < 1.0):
            raise ValueError("holdout fraction must be in [0, 1)")
        self.weights.validate()
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "weights" in kwargs and isinstance(kwargs["weights"], dict):
            wkeys = set(LossWeights.__dataclass_fields__)
            wunknown = set(kwargs["weights"]) - wkeys
            if wunknown:
                raise ValueError(f"unknown loss weight keys: {sorted(wunknown)}")
            kwargs["weights"] = LossWeights(**kwargs["weights"])
        return cls(**kwargs).validate()


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, flat: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
        if grads.shape != flat.shape:
            raise ValueError(f"gradient length {grads.shape} != parameter count {flat.shape}")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return flat - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: ModelParams, grads: np.ndarray, lr: float,
              state: AdamState | None = None, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied through the flat parameter view."""
    if state is None:
        state = AdamState(params.count(), beta1, beta2, eps)
    params.set_flat(state.step(params.flat(), grads, lr))
    return state


def clip_gradients(grads: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Rescale to the max global L2 norm; returns (clipped, pre-clip norm)."""
    if max_norm <= 0:
        raise ValueError("max norm must be positive")
    norm = float(np.sqrt((grads * grads).sum()))
    if norm > max_norm:
        return grads * (max_norm / norm), norm
    return grads, norm


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    # linear decay to zero over the epoch budget
    return cfg.learning_rate * (1.0 - epoch / cfg.epochs)


def _holdout_split(n: int, fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    n_val = min(n_val, max(0, n - 2))
    if n_val < 2:
        n_val = 0  # ranking losses need >= 2 samples, so tiny splits disable validation
    return order[n_val:], order[:n_val]


def _batches(indices: np.ndarray, batch_size: int):
    full = len(indices) // batch_size
    for b in range(full):
        yield indices[b * batch_size : (b + 1) * batch_size]
    rem = len(indices) - full * batch_size
    if rem >= 2:
        yield indices[full * batch_size :]


class _Cycler:
    """Endless shuffled index stream over a dataset, reshuffling per pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.pool: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self.pool:
                self.pool = list(self.rng.permutation(self.n))
            out.append(self.pool.pop(0))
        return out


def _component_value(node) -> float:
    return float(node.value[0, 0]) if node is not None else 0.0


def write_log(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v)
                             for k, v in row.items()})


def _run_stage(params: ModelParams, source: DomainDataset, target: DomainDataset | None,
               cfg: TrainConfig):
    """Shared epoch loop; target None means pre-training (supervised loss only).

    Source batching, target batching, and the holdout split each use their own
    child generators, so a zero-weight main-training run draws the exact same
    source batches as pre-training with the same seed.
    """
    model_cfg = params.config
    split_ss, source_ss, target_ss = np.random.SeedSequence((cfg.seed, 1)).spawn(3)
    train_idx, val_idx = _holdout_split(len(source), cfg.holdout_fraction,
                                        np.random.default_rng(split_ss))
    source_rng = np.random.default_rng(source_ss)
    target_cycler = (_Cycler(len(target), np.random.default_rng(target_ss))
                     if target is not None else None)
    # a fixed target batch accompanies the held-out source split for validation
    val_target_idx = (target_cycler.take(max(len(val_idx), 2))
                      if target is not None and len(val_idx) > 0 else [])

    stage_weights = cfg.weights if target is not None else replace(
        cfg.weights, gamma1=0.0, gamma2=0.0, gamma3=0.0)

    def eval_loss(src_samples, tgt_samples) -> float:
        nodes = params.nodes()
        src_feats = batch_features(nodes, model_cfg, src_samples)
        # with all alignment weights zero the target block is never touched
        tgt_feats = (batch_features(nodes, model_cfg, tgt_samples)
                     if tgt_samples is not None else src_feats)
        total, _ = final_loss(src_feats, tgt_feats, nodes, stage_weights)
        return float(total.value[0, 0])

    rows = []
    state = AdamState(params.count(), cfg.beta1, cfg.beta2, cfg.eps)
    best_val = None
    best_flat = None
    since_best = 0
    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        order = train_idx[source_rng.permutation(len(train_idx))]
        sums = {k: 0.0 for k in ("L_final", "L_SL", "L_DA", "L_M1", "L_M2", "L_SA", "grad_norm")}
        steps = 0
        for batch_idx in _batches(order, cfg.batch_size):
            src_samples = [source.samples[i] for i in batch_idx]
            nodes = params.nodes()
            src_feats = batch_features(nodes, model_cfg, src_samples)
            if target is not None:
                tgt_samples = [target.samples[i] for i in target_cycler.take(len(batch_idx))]
                tgt_feats = batch_features(nodes, model_cfg, tgt_samples)
            else:
                tgt_feats = src_feats  # unused: all alignment weights are zero
            total, comps = final_loss(src_feats, tgt_feats, nodes, stage_weights)
            loss_val = float(total.value[0, 0])
            if not np.isfinite(loss_val):
                raise NumericsError(f"non-finite loss at epoch {epoch}")
            dc.backward(total)
            grads = params.grad_flat(nodes)
            if not np.all(np.isfinite(grads)):
                raise NumericsError(f"non-finite gradient at epoch {epoch}")
            grads, norm = clip_gradients(grads, cfg.clip_norm)
            adam_step(params, grads, lr, state)
            sums["L_final"] += loss_val
            for key in ("L_SL", "L_DA", "L_M1", "L_M2", "L_SA"):
                sums[key] += _component_value(comps[key])
            sums["grad_norm"] += norm
            steps += 1
        if steps == 0:
            raise ValueError(
                f"no full batch fits: {len(train_idx)} training samples, batch {cfg.batch_size}"
            )
        row = {"epoch": epoch, "lr": lr}
        row.update({k: sums[k] / steps for k in sums})
        rows.append(row)

        if len(val_idx) > 0:
            val = eval_loss(
                [source.samples[i] for i in val_idx],
                [target.samples[i] for i in val_target_idx] if target is not None else None,
            )
            if best_val is None or val < best_val:
                best_val = val
                best_flat = params.flat()
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    if best_flat is not None:
        params.set_flat(best_flat)
    return params, rows


def pretrain(source: DomainDataset, model_cfg: ModelConfig, cfg: TrainConfig,
             log_path=None) -> tuple[ModelParams, list[dict]]:
    """Stage 1: supervised ranking loss on the annotated source domain."""
    cfg.validate()
    if not source.has_boundaries():
        raise UnannotatedSourceError("pre-training requires boundaries on every source sample")
    params = ModelParams.init(model_cfg, seed=cfg.seed)
    params, rows = _run_stage(params, source, None, cfg)
    if log_path is not None:
        write_log(rows, log_path)
    return params, rows


def main_train(source: DomainDataset, target: DomainDataset, init: ModelParams,
               cfg: TrainConfig, log_path=None) -> tuple[ModelParams, list[dict]]:
    """Stage 2: full alignment objective on source plus unannotated target.

    Target boundaries are stripped before the loop ever sees the samples; the
    objective has no term that could read them.
    """
    cfg.validate()
    params = init.copy()
    blinded = target.without_boundaries()
    params, rows = _run_stage(params, source, blinded, cfg)
    if log_path is not None:
        write_log(rows, log_path)
    return params, rows
