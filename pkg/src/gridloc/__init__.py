"""Place recognition for point clouds via grid-cell classification.

Poses are discretized into per-map grid cells whose occupied set forms the
class space; a permutation-invariant point encoder is trained with a masked
cross-entropy that ignores cells adjacent to the target, and localization at
query time is K-nearest-neighbor retrieval over a precomputed embedding
database with radius-matched recall metrics.
"""

from .annindex import EmbeddingDB, build_approx, build_db, load_db, query, query_approx, save_db
from .evalkit import EvalConfig, RecallReport, evaluate, mean_average_recall, top1pct_k
from .geogrid import (
    CellKey,
    GridConfig,
    LabelMap,
    build_label_map,
    cell_center,
    discretize,
    load_label_map,
    masked_labels,
    save_label_map,
)
from .model import (
    ModelConfig,
    ModelParams,
    embed,
    embed_array,
    init_params,
    load_checkpoint,
    logits,
    masked_ce_loss,
    save_checkpoint,
)
from .numcore import GradTape, Tensor
from .synthdata import (
    CloudContainer,
    DatasetManifest,
    Sample,
    SynthConfig,
    assign_roles,
    decimate,
    filter_queries,
    generate,
    holdout_split,
    load_manifest,
    save_manifest,
    split_train_val,
)
from .trainer import AdamState, TrainConfig, adam_step, parameter_count, train

__version__ = "0.1.0"
