"""Training loop: Adam with step-decayed learning rate over random cuboid patches."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from dfcn import autodiff as ad
from dfcn import ingest, metrics
from dfcn.network import DFCN, class_weights, predict_labels, weighted_loss

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 6
    lr0: float = 0.01
    decay_every: int = 3000
    decay_factor: float = 0.5
    epochs: int = 1000
    seed: int = 0
    alpha: float | None = 1.2
    patch_n: int = 8192
    dropout_ratio: float = 0.125
    cuboid: Sequence[float] = (30.0, 30.0, 40.0)
    patches_per_epoch: int | None = None
    grid: float = 30.0
    min_fraction: float = 0.5
    val_fraction: float = 0.1
    validate_every: int = 1
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_grad: float | None = None

    def __post_init__(self):
        self.cuboid = tuple(float(v) for v in self.cuboid)
        if self.batch_size < 1 or self.patch_n < 1 or self.epochs < 0:
            raise ValueError("batch_size and patch_n must be >= 1, epochs >= 0")
        if self.lr0 < 0 or self.decay_every < 1:
            raise ValueError("lr0 must be >= 0 and decay_every >= 1")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must be in (0, 1)")
        if not 0 <= self.dropout_ratio < 1:
            raise ValueError("dropout_ratio must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cuboid"] = list(d["cuboid"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """lr0 * decay_factor ** floor(step / decay_every)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (step // cfg.decay_every)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: ad.ParamStore, state: OptimizerState, lr: float,
                   clip_grad: float | None = None) -> None:
    """One Adam update with bias correction, then zero the gradients.

    Checks every gradient first so that a NaN aborts the step before any
    parameter moves.
    """
    grads = params.grads()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name}")
    if clip_grad is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > clip_grad:
            grads = {k: g * (clip_grad / norm) for k, g in grads.items()}
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    params.zero_grad()


# ---------------------------------------------------------------- data plumbing


def split_validation(cloud: ingest.PointCloud, cfg: TrainConfig, rng: np.random.Generator):
    """Hold out ``val_fraction`` of the tiled blocks; returns (train_idx, val_blocks)."""
    blocks = ingest.tile_blocks(cloud, cfg.grid, cfg.min_fraction)
    n_val = int(round(len(blocks) * cfg.val_fraction))
    if cfg.val_fraction <= 0 or len(blocks) < 2 or n_val == 0:
        return np.arange(len(cloud)), []
    chosen = set(rng.permutation(len(blocks))[:n_val].tolist())
    val_blocks = [b for i, b in enumerate(blocks) if i in chosen]
    held = np.zeros(len(cloud), dtype=bool)
    for b in val_blocks:
        held[b.point_indices] = True
    return np.flatnonzero(~held), val_blocks


def make_training_patch(cloud: ingest.PointCloud, cfg: TrainConfig, rng: np.random.Generator) -> ingest.Patch:
    patch = ingest.sample_training_patch(cloud, rng, cfg.cuboid, cfg.patch_n)
    patch = ingest.apply_dropout(patch, cfg.dropout_ratio, rng)
    return ingest.center_normalize(patch)


def epoch_rng(seed: int, epoch: int, worker: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, worker])


def patches_per_epoch(n_points: int, cfg: TrainConfig) -> int:
    if cfg.patches_per_epoch is not None:
        return int(cfg.patches_per_epoch)
    return max(1, math.ceil(n_points / cfg.patch_n))


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None
    best_val_f1: float | None = None
    steps: int = 0


def _model_inputs(model: DFCN, cloud: ingest.PointCloud):
    cols = {"intensity": cloud.intensity, "z": cloud.xyz[:, 2]}
    feats = np.column_stack([cols[name] for name in model.config.input_features])
    return cloud.xyz, feats


def train_loop(model: DFCN, cloud: ingest.PointCloud, cfg: TrainConfig, out_dir=None,
               log_path=None, max_steps: int | None = None) -> TrainResult:
    """Train ``model`` in place on ``cloud``.

    Every epoch draws ``patches_per_epoch`` patches in batches of
    ``batch_size``; one optimizer step per batch. Each step appends
    ``step lr loss`` to ``log_path``. Checkpoints: ``init.ckpt`` before the
    first step, ``best.ckpt`` on the best validation average F1 and
    ``last.ckpt`` at the end. Single-threaded and fully determined by
    ``cfg.seed``.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    logf = open(log_path, "a") if log_path is not None else None
    result = TrainResult()
    try:
        split_rng = np.random.default_rng([cfg.seed, 0x5EED])
        train_idx, val_blocks = split_validation(cloud, cfg, split_rng)
        train_cloud = cloud.subset(train_idx)
        weights = class_weights(train_cloud.class_counts(), cfg.alpha)
        opt = OptimizerState(cfg.beta1, cfg.beta2, cfg.eps)
        if out_dir is not None:
            ad.save_checkpoint(model.params, out_dir / "init.ckpt")
            result.last_checkpoint = out_dir / "init.ckpt"

        n_patches = patches_per_epoch(len(train_cloud), cfg)
        step = 0
        for epoch in range(cfg.epochs):
            rng = epoch_rng(cfg.seed, epoch)
            for lo in range(0, n_patches, cfg.batch_size):
                batch = min(cfg.batch_size, n_patches - lo)
                total = 0.0
                for _ in range(batch):
                    patch = make_training_patch(train_cloud, cfg, rng)
                    pts, feats = _model_inputs(model, patch.points)
                    logits = model.forward(pts, feats)
                    loss = weighted_loss(logits, patch.points.labels, weights, model.config.loss)
                    loss.backward(np.asarray(1.0 / batch, dtype=loss.dtype))
                    total += float(loss.data) / batch
                lr = lr_schedule(step, cfg)
                optimizer_step(model.params, opt, lr, cfg.clip_grad)
                result.history.append((step, lr, total))
                if logf is not None:
                    logf.write(f"{step} {lr:.8g} {total:.8g}\n")
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            if max_steps is not None and step >= max_steps:
                break
            if out_dir is not None and val_blocks and (epoch + 1) % cfg.validate_every == 0:
                f1 = validation_f1(model, cloud, val_blocks)
                log.info("epoch %d step %d loss %.4f val avgF1 %.4f", epoch, step, total, f1)
                if result.best_val_f1 is None or f1 > result.best_val_f1:
                    result.best_val_f1 = f1
                    result.best_checkpoint = ad.save_checkpoint(model.params, out_dir / "best.ckpt")
            if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                ad.save_checkpoint(model.params, out_dir / f"epoch{epoch + 1:05d}.ckpt")
        result.steps = step
        if out_dir is not None:
            result.last_checkpoint = ad.save_checkpoint(model.params, out_dir / "last.ckpt")
    finally:
        if logf is not None:
            logf.close()
    return result


def validation_f1(model: DFCN, cloud: ingest.PointCloud, blocks) -> float:
    pred = predict_blocks(model, blocks, cloud)
    covered = np.concatenate([b.point_indices for b in blocks])
    cm = metrics.confusion(pred[covered], cloud.labels[covered], model.config.n_classes)
    return metrics.average_f1(metrics.precision_recall_f1(cm)[2])


def predict_block(model: DFCN, cloud: ingest.PointCloud) -> np.ndarray:
    """Labels for one block in a single forward pass at its native size."""
    patch = ingest.prepare_block(cloud)
    pts, feats = _model_inputs(model, patch.points)
    return predict_labels(model.forward(pts, feats))


def predict_blocks(model: DFCN, blocks, cloud: ingest.PointCloud) -> np.ndarray:
    """Predict every block independently and merge into one label array.

    Points not covered by any block keep the unlabeled sentinel.
    """
    if not blocks:
        raise ValueError("no blocks to predict")
    pred = np.full(len(cloud), cloud.unlabeled, dtype=np.int64)
    for b in blocks:
        pred[b.point_indices] = predict_block(model, cloud.subset(b.point_indices))
    return pred
