"""Frozen desk-scale reference experiment.

Four maps, forty scenes, roughly two thousand database samples and a few
hundred occupied cells: small enough to train on a laptop CPU in minutes,
large enough that retrieval quality is meaningfully above the geometric
chance rate. The verification suite and the example scripts both run this
exact configuration, so keep changes here deliberate.
"""

from __future__ import annotations

from .evalkit import EvalConfig
from .model import ModelConfig
from .synthdata import SynthConfig
from .trainer import TrainConfig

REFERENCE_SYNTH = SynthConfig(
    maps=4,
    scenes_per_map=10,
    samples_per_scene=55,
    step_len=1.6,
    heading_noise=0.25,
    world_extent=100.0,
    landmark_spacing=4.0,
    landmarks_per_tile=4,
    points_per_scan=384,
    sensor_range=30.0,
    position_jitter=0.15,
    point_noise=0.05,
    height_range=10.0,
    cell_size=6.0,
    seed=7,
)

REFERENCE_TRAIN = TrainConfig(
    epochs=25,
    batch_size=64,
    lr=1e-3,
    decimation_k=20,
    seed=2,
)

REFERENCE_EVAL = EvalConfig(radius=18.0)

REFERENCE_SPLIT_PERCENT = 90.0
REFERENCE_FILTER_RADIUS = 18.0


def reference_model_config(num_classes: int, embed_dim: int = 512,
                           normalize: bool = True) -> ModelConfig:
    return ModelConfig(
        num_classes=num_classes,
        point_widths=(3, 64, 128, 256),
        embed_dim=embed_dim,
        normalize=normalize,
        seed=1,
    )
