"""Mini-batch training loop with masked cross-entropy and Adam.

Clouds are decimated per sample with an rng stream derived from
(seed, epoch, sample_id), so the augmentation a sample sees never depends on
batch composition; two runs with the same seeds produce bit-identical
checkpoints.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import dataclass

import numpy as np

from .geogrid import GridConfig, LabelMap, discretize, masked_labels
from .model import ModelConfig, ModelParams, init_params, forward_loss
from .numcore import GradTape
from .synthdata import CloudContainer, DatasetManifest, decimate


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decimation_k: int = 20
    mask_radius: int = 1
    seed: int = 0
    checkpoint_every: int = 0  # epochs between intermediate checkpoints; 0 = none

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.decimation_k < 1:
            raise ValueError(f"decimation factor must be >= 1, got {self.decimation_k}")


class AdamState:
    """First/second moment accumulators mirroring the parameter shapes."""

    def __init__(self, params: ModelParams):
        tensors = params.tensors()
        self.m = [np.zeros_like(t.data) for t in tensors]
        self.v = [np.zeros_like(t.data) for t in tensors]
        self.step = 0


def adam_step(
    params: ModelParams, grads: list[np.ndarray], state: AdamState, cfg: TrainConfig
) -> None:
    """One bias-corrected adaptive-moment update, in place."""
    tensors = params.tensors()
    if len(grads) != len(tensors):
        raise ValueError(f"expected {len(tensors)} gradients, got {len(grads)}")
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for tensor, g, m, v in zip(tensors, grads, state.m, state.v):
        if g.shape != tensor.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {tensor.data.shape}")
        m += (1.0 - cfg.beta1) * (g - m)
        v += (1.0 - cfg.beta2) * (g * g - v)
        tensor.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def parameter_count(params: ModelParams) -> int:
    return sum(t.data.size for t in params.tensors())


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def train(
    manifest: DatasetManifest,
    container: CloudContainer,
    label_map: LabelMap,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
    verbose: bool = False,
) -> tuple[ModelParams, list[dict]]:
    """Train on the database-role samples; returns final parameters and one
    log record per epoch (mean loss, wall time, lr, decimation, param count)."""
    from .model import save_checkpoint  # local to avoid cycle in docs builds

    samples = manifest.by_role("database")
    if not samples:
        raise ValueError("manifest has no database-role training samples")
    if model_cfg.num_classes != label_map.num_classes:
        raise ValueError(
            f"model is sized for {model_cfg.num_classes} classes but the label map "
            f"holds {label_map.num_classes}"
        )

    targets: dict[int, int] = {}
    masks: dict[int, set[int]] = {}
    for s in samples:
        cell = discretize(s.pose(), manifest.grid)
        targets[s.sample_id] = label_map.label_of(cell)
        masks[s.sample_id] = masked_labels(label_map, cell, radius=cfg.mask_radius)

    params = init_params(model_cfg)
    state = AdamState(params)
    n_params = parameter_count(params)
    logs: list[dict] = []
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            perm = np.random.default_rng((cfg.seed, epoch)).permutation(len(samples))
            loss_sum = 0.0
            for batch in _batches(perm, cfg.batch_size):
                grads = [np.zeros_like(t.data) for t in params.tensors()]
                for i in batch:
                    s = samples[int(i)]
                    target = targets[s.sample_id]
                    mask = masks[s.sample_id]
                    assert target not in mask, "target label must never be masked"
                    rng = np.random.default_rng((cfg.seed, epoch, s.sample_id))
                    pts = decimate(container.get(s), cfg.decimation_k, rng)
                    tape = GradTape()
                    loss = forward_loss(params, pts, target, mask, tape)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise TrainingDiverged(
                            f"non-finite loss {value} at epoch {epoch}, "
                            f"sample {s.sample_id}"
                        )
                    tape.backward(loss)
                    for acc, tensor in zip(grads, params.tensors()):
                        if tensor.grad is not None:
                            acc += tensor.grad
                    params.zero_grads()
                    loss_sum += value
                inv = 1.0 / len(batch)
                for g in grads:
                    g *= inv
                    if not np.isfinite(g).all():
                        raise TrainingDiverged(f"non-finite gradient at epoch {epoch}")
                adam_step(params, grads, state, cfg)
            record = {
                "epoch": epoch,
                "mean_loss": loss_sum / len(samples),
                "epoch_seconds": time.perf_counter() - t0,
                "lr": cfg.lr,
                "k": cfg.decimation_k,
                "param_count": n_params,
            }
            logs.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if verbose:
                print(
                    f"epoch {epoch:3d}  loss {record['mean_loss']:.4f}  "
                    f"{record['epoch_seconds']:.1f}s",
                    file=sys.stderr,
                )
            if (
                checkpoint_dir is not None
                and cfg.checkpoint_every > 0
                and epoch % cfg.checkpoint_every == 0
            ):
                save_checkpoint(f"{checkpoint_dir}/checkpoint_epoch{epoch:04d}.lnck", params)
    finally:
        if log_fh is not None:
            log_fh.close()
    return params, logs
