"""Encoder-decoder network for cell classification.

The encoder is a per-point MLP with ReLU followed by columnwise max pooling
and an affine embedding layer (optionally L2-normalized); the decoder is a
single affine classification head. Training minimizes cross-entropy with the
logits of cells adjacent to the target excluded, so near-misses on the grid
are never penalized.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .numcore import (
    GradTape,
    Tensor,
    affine,
    l2_normalize,
    masked_log_softmax,
    maxpool_points,
    relu,
    scale,
    select,
)

CHECKPOINT_MAGIC = b"LNCK"


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    point_widths: tuple[int, ...] = (3, 64, 128, 256)
    embed_dim: int = 512
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.embed_dim < 1:
            raise ValueError(f"embedding size must be >= 1, got {self.embed_dim}")
        if len(self.point_widths) < 2 or any(w < 1 for w in self.point_widths):
            raise ValueError(f"bad per-point widths {self.point_widths}")
        object.__setattr__(self, "point_widths", tuple(int(w) for w in self.point_widths))


@dataclass
class ModelParams:
    """All trainable weights, in checkpoint declaration order."""

    cfg: ModelConfig
    point_layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    embed_w: Tensor = None
    embed_b: Tensor = None
    decoder_w: Tensor = None
    decoder_b: Tensor = None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.point_layers):
            out.append((f"point{i}_w", w))
            out.append((f"point{i}_b", b))
        out.append(("embed_w", self.embed_w))
        out.append(("embed_b", self.embed_b))
        out.append(("decoder_w", self.decoder_w))
        out.append(("decoder_b", self.decoder_b))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grads(self) -> None:
        for t in self.tensors():
            t.zero_grad()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


def init_params(cfg: ModelConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases, fully determined by cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams(cfg)
    widths = cfg.point_widths
    for din, dout in zip(widths[:-1], widths[1:]):
        params.point_layers.append(
            (Tensor(_glorot(rng, din, dout)), Tensor(np.zeros(dout, dtype=np.float32)))
        )
    params.embed_w = Tensor(_glorot(rng, widths[-1], cfg.embed_dim))
    params.embed_b = Tensor(np.zeros(cfg.embed_dim, dtype=np.float32))
    params.decoder_w = Tensor(_glorot(rng, cfg.embed_dim, cfg.num_classes))
    params.decoder_b = Tensor(np.zeros(cfg.num_classes, dtype=np.float32))
    return params


def embed(params: ModelParams, points, tape: GradTape | None = None) -> Tensor:
    """Embed one point cloud (an [N, 3] array) into a D-vector.

    Max pooling makes the result invariant to point order and duplication.
    """
    x = points if isinstance(points, Tensor) else Tensor(points)
    if x.data.ndim != 2 or x.data.shape[1] != params.cfg.point_widths[0]:
        raise ValueError(
            f"expected an [N, {params.cfg.point_widths[0]}] cloud, got {x.data.shape}"
        )
    h = x
    for w, b in params.point_layers:
        h = relu(affine(h, w, b, tape), tape)
    pooled = maxpool_points(h, tape)
    emb = affine(pooled, params.embed_w, params.embed_b, tape)
    if params.cfg.normalize:
        emb = l2_normalize(emb, tape)
    return emb


def embed_array(params: ModelParams, points) -> np.ndarray:
    """Inference-only embedding as a plain float32 vector."""
    return embed(params, np.asarray(points, dtype=np.float32)).data


def logits(params: ModelParams, embedding: Tensor, tape: GradTape | None = None) -> Tensor:
    """Affine classification head on top of an embedding."""
    return affine(embedding, params.decoder_w, params.decoder_b, tape)


def masked_ce_loss(
    logit_vec: Tensor,
    target_label: int,
    mask: Iterable[int],
    tape: GradTape | None = None,
) -> Tensor:
    """Cross-entropy of the target under a softmax that ignores masked classes.

    The caller guarantees the target is not masked; violating that is a bug,
    not a data condition.
    """
    mask = {int(i) for i in mask}
    if target_label in mask:
        raise ValueError(f"target label {target_label} is in the mask")
    logp = masked_log_softmax(logit_vec, mask, tape)
    return scale(select(logp, target_label, tape), -1.0, tape)


def forward_loss(
    params: ModelParams,
    points,
    target_label: int,
    mask: Iterable[int],
    tape: GradTape | None = None,
) -> Tensor:
    """Full pipeline loss for one cloud: embed, classify, masked cross-entropy."""
    emb = embed(params, points, tape)
    return masked_ce_loss(logits(params, emb, tape), target_label, mask, tape)


def save_checkpoint(path, params: ModelParams) -> None:
    """Binary checkpoint: magic, length-prefixed JSON header, then raw
    little-endian float32 arrays in declaration order."""
    named = params.named_tensors()
    arrays = []
    offset = 0
    for name, tensor in named:
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        arrays.append((name, data))
        offset += data.nbytes
    header = {
        "config": {
            "num_classes": params.cfg.num_classes,
            "point_widths": list(params.cfg.point_widths),
            "embed_dim": params.cfg.embed_dim,
            "normalize": params.cfg.normalize,
            "seed": params.cfg.seed,
        },
        "arrays": [],
    }
    offset = 0
    for name, data in arrays:
        header["arrays"].append(
            {"name": name, "shape": list(data.shape), "offset": offset, "nbytes": data.nbytes}
        )
        offset += data.nbytes
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for _, data in arrays:
            fh.write(data.tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + header_len])
    cfg = ModelConfig(
        num_classes=header["config"]["num_classes"],
        point_widths=tuple(header["config"]["point_widths"]),
        embed_dim=header["config"]["embed_dim"],
        normalize=header["config"]["normalize"],
        seed=header["config"]["seed"],
    )
    payload = raw[8 + header_len :]
    tensors = {}
    for spec in header["arrays"]:
        start, nbytes = spec["offset"], spec["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype="<f4").reshape(spec["shape"])
        tensors[spec["name"]] = Tensor(arr.copy())
    params = ModelParams(cfg)
    n_layers = len(cfg.point_widths) - 1
    params.point_layers = [
        (tensors[f"point{i}_w"], tensors[f"point{i}_b"]) for i in range(n_layers)
    ]
    params.embed_w = tensors["embed_w"]
    params.embed_b = tensors["embed_b"]
    params.decoder_w = tensors["decoder_w"]
    params.decoder_b = tensors["decoder_b"]
    return params
