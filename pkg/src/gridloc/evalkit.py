"""Radius-matched recall over filtered validation queries.

A retrieval counts as correct when the center of the retrieved entry's cell,
recovered from its class label, lies within the match radius of the query's
continuous pose (closed threshold). Recall is reported per map and averaged
across maps (MAR); the top-1% cutoff comes from the global class count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .annindex import EmbeddingDB, query
from .geogrid import GridConfig, LabelMap, cell_center
from .model import ModelParams, embed_array
from .synthdata import CloudContainer, DatasetManifest, Sample


@dataclass(frozen=True)
class EvalConfig:
    radius: float = 18.0
    extra_k: tuple[int, ...] = ()  # evaluated in addition to 1 and the top-1% K
    weighted_mar: bool = False  # average over queries instead of over maps
    split: str = "val"

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"match radius must be positive, got {self.radius}")
        if any(k < 1 for k in self.extra_k):
            raise ValueError(f"all K values must be >= 1, got {self.extra_k}")


def top1pct_k(num_classes: int) -> int:
    """The K used for recall@1%: one percent of the class count, at least 1."""
    if num_classes < 1:
        raise ValueError(f"class count must be >= 1, got {num_classes}")
    return max(1, num_classes // 100)


def is_match(
    entry_label: int,
    query_pose: tuple[float, float],
    radius: float,
    label_map: LabelMap,
    grid: GridConfig,
) -> bool:
    """Closed-threshold test between the entry's cell center and the query pose."""
    cx, cy = cell_center(label_map.cell_of(int(entry_label)), grid)
    return math.hypot(cx - query_pose[0], cy - query_pose[1]) <= radius


@dataclass
class RecallReport:
    config: dict
    per_map: dict[int, dict]  # map_id -> {"recall@K": ..., "kept": n, "excluded": n}
    mar_at_1: float
    mar_at_1pct: float
    k_values: list[int]
    k_top1pct: int
    skipped_maps: list[int] = field(default_factory=list)
    random_baseline_at_1: float | None = None

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "per_map": {str(m): stats for m, stats in sorted(self.per_map.items())},
            "MAR@1": self.mar_at_1,
            "MAR@1pct": self.mar_at_1pct,
            "k_values": self.k_values,
            "k_top1pct": self.k_top1pct,
            "skipped_maps": self.skipped_maps,
            "random_baseline@1": self.random_baseline_at_1,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        """Flatten per-map recalls to CSV for the sweep tool."""
        maps = sorted(self.per_map)
        header = ["map", "kept", "excluded"] + [f"recall@{k}" for k in self.k_values]
        rows = [",".join(header)]
        for m in maps:
            stats = self.per_map[m]
            cells = [str(m), str(stats["kept"]), str(stats["excluded"])]
            cells += [f"{stats[f'recall@{k}']:.6f}" for k in self.k_values]
            rows.append(",".join(cells))
        return "\n".join(rows) + "\n"


def mean_average_recall(per_map_recall: dict[int, float]) -> float:
    """Unweighted mean of per-map recall values."""
    if not per_map_recall:
        raise ValueError("no per-map recall values to average")
    return float(sum(per_map_recall.values()) / len(per_map_recall))


def kept_queries(manifest: DatasetManifest, split: str = "val") -> list[Sample]:
    return [s for s in manifest.samples if s.split == split and s.role == "query"]


def recall_at(
    db: EmbeddingDB,
    queries: list[Sample],
    embeddings: np.ndarray,
    k: int,
    radius: float,
    label_map: LabelMap,
    grid: GridConfig,
) -> dict[int, float]:
    """Per-map recall@K for pre-embedded queries."""
    per_map = _recall_curves(db, queries, embeddings, [k], radius, label_map, grid)
    return {m: rec[f"recall@{k}"] for m, rec in per_map.items()}


def _recall_curves(db, queries, embeddings, k_values, radius, label_map, grid):
    k_max = max(k_values)
    hits = {m: {k: 0 for k in k_values} for m in {s.map_id for s in queries}}
    totals = {m: 0 for m in hits}
    for s, emb in zip(queries, embeddings):
        totals[s.map_id] += 1
        results = query(db, emb, k_max, s.map_id)
        first_match = None
        for rank, (sid, _) in enumerate(results):
            if is_match(db.labels[db.row_of(sid)], (s.x, s.y), radius, label_map, grid):
                first_match = rank
                break
        if first_match is None:
            continue
        for k in k_values:
            if first_match < k:
                hits[s.map_id][k] += 1
    return {
        m: {f"recall@{k}": hits[m][k] / totals[m] for k in k_values}
        for m in hits
        if totals[m] > 0
    }


def random_retrieval_baseline(
    db: EmbeddingDB,
    queries: list[Sample],
    radius: float,
    label_map: LabelMap,
    grid: GridConfig,
) -> float:
    """Expected recall@1 of a retriever that picks a uniform same-map entry:
    the mean, over queries, of the fraction of same-map entries that match."""
    if not queries:
        raise ValueError("no queries to compute a baseline over")
    centers = np.array(
        [cell_center(label_map.cell_of(int(lb)), grid) for lb in db.labels]
    )
    fractions = []
    for s in queries:
        rows = np.nonzero(db.map_ids == s.map_id)[0]
        if rows.size == 0:
            continue
        d = np.hypot(centers[rows, 0] - s.x, centers[rows, 1] - s.y)
        fractions.append(float((d <= radius).mean()))
    if not fractions:
        raise ValueError("no query shares a map with the database")
    return float(np.mean(fractions))


def evaluate(
    db: EmbeddingDB,
    manifest: DatasetManifest,
    container: CloudContainer,
    params: ModelParams,
    label_map: LabelMap,
    cfg: EvalConfig,
    include_baseline: bool = True,
) -> RecallReport:
    """Embed the kept queries of the chosen split and score retrieval."""
    grid = manifest.grid
    k_1pct = top1pct_k(label_map.num_classes)
    k_values = sorted({1, k_1pct, *cfg.extra_k})
    queries = kept_queries(manifest, cfg.split)
    if not queries:
        raise ValueError(f"no kept {cfg.split!r} queries to evaluate")

    skipped = sorted(
        {s.map_id for s in queries} - set(np.unique(db.map_ids).tolist())
    )
    queries = [s for s in queries if s.map_id not in skipped]
    if not queries:
        raise ValueError("every query map is missing from the database")
    embeddings = np.stack([embed_array(params, container.get(s)) for s in queries])

    per_map_curves = _recall_curves(db, queries, embeddings, k_values, cfg.radius,
                                    label_map, grid)
    excluded: dict[int, int] = {m: 0 for m in per_map_curves}
    kept: dict[int, int] = {m: 0 for m in per_map_curves}
    for s in manifest.samples:
        if s.split != cfg.split or s.map_id not in per_map_curves:
            continue
        if s.role == "query":
            kept[s.map_id] += 1
        elif s.role == "excluded":
            excluded[s.map_id] += 1
    per_map = {
        m: {**per_map_curves[m], "kept": kept[m], "excluded": excluded[m]}
        for m in per_map_curves
    }

    if cfg.weighted_mar:
        weights = {m: kept[m] for m in per_map_curves}
        total = sum(weights.values())
        mar1 = sum(per_map_curves[m]["recall@1"] * weights[m] for m in per_map_curves) / total
        mar1pct = (
            sum(per_map_curves[m][f"recall@{k_1pct}"] * weights[m] for m in per_map_curves)
            / total
        )
    else:
        mar1 = mean_average_recall({m: per_map_curves[m]["recall@1"] for m in per_map_curves})
        mar1pct = mean_average_recall(
            {m: per_map_curves[m][f"recall@{k_1pct}"] for m in per_map_curves}
        )

    baseline = (
        random_retrieval_baseline(db, queries, cfg.radius, label_map, grid)
        if include_baseline
        else None
    )
    config_echo = {
        "radius": cfg.radius,
        "split": cfg.split,
        "weighted_mar": cfg.weighted_mar,
        "metric": db.metric,
        "normalized": db.normalized,
        "num_classes": label_map.num_classes,
    }
    return RecallReport(
        config=config_echo,
        per_map=per_map,
        mar_at_1=float(mar1),
        mar_at_1pct=float(mar1pct),
        k_values=k_values,
        k_top1pct=k_1pct,
        skipped_maps=skipped,
        random_baseline_at_1=baseline,
    )
