"""Two-tower retrieval: an embedding database over all training samples and
K-nearest-neighbor queries restricted to the query's own map.

Exact search (a vectorized linear scan with deterministic tie-breaking by
sample id) is the reference; a navigable small-world graph gives an optional
approximate mode whose recall is measured against the exact oracle.
"""

from __future__ import annotations

import heapq
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geogrid import GridConfig, LabelMap, discretize
from .model import ModelParams, embed_array
from .synthdata import CloudContainer, DatasetManifest

DB_MAGIC = b"EMDB"
METRICS = ("euclidean", "cosine")


def _distances(embeddings: np.ndarray, query: np.ndarray, metric: str) -> np.ndarray:
    e = embeddings.astype(np.float64)
    q = np.asarray(query, dtype=np.float64).ravel()
    if metric == "euclidean":
        return np.sqrt(((e - q) ** 2).sum(axis=1))
    if metric == "cosine":
        qn = np.linalg.norm(q)
        en = np.linalg.norm(e, axis=1)
        if qn == 0 or (en == 0).any():
            raise ValueError("cosine distance undefined for zero vectors")
        return 1.0 - (e @ q) / (en * qn)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


@dataclass
class EmbeddingDB:
    """Flat arrays, one row per database sample, plus optional per-map
    small-world graphs for approximate search."""

    sample_ids: np.ndarray  # uint64 [n]
    map_ids: np.ndarray  # uint32 [n]
    poses: np.ndarray  # float32 [n, 2]
    labels: np.ndarray  # uint32 [n]
    embeddings: np.ndarray  # float32 [n, D]
    metric: str = "euclidean"
    normalized: bool = False
    _graphs: dict = field(default_factory=dict, repr=False, compare=False)
    _rows_by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        n = len(self.sample_ids)
        if not (len(self.map_ids) == len(self.poses) == len(self.labels)
                == len(self.embeddings) == n):
            raise ValueError("database arrays disagree on entry count")
        if self.normalized:
            norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
            if n and not np.allclose(norms, 1.0, atol=1e-6):
                raise ValueError("normalization flag is set but embeddings are not unit norm")
        self._rows_by_id = {int(sid): i for i, sid in enumerate(self.sample_ids)}

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def row_of(self, sample_id: int) -> int:
        return self._rows_by_id[int(sample_id)]


def build_db(
    params: ModelParams,
    manifest: DatasetManifest,
    container: CloudContainer,
    label_map: LabelMap,
    metric: str = "euclidean",
) -> EmbeddingDB:
    """Embed every database-role sample with its full (undecimated) cloud."""
    entries = sorted(manifest.by_role("database"), key=lambda s: s.sample_id)
    if not entries:
        raise ValueError("manifest has no database-role samples to index")
    sample_ids = np.array([s.sample_id for s in entries], dtype=np.uint64)
    map_ids = np.array([s.map_id for s in entries], dtype=np.uint32)
    poses = np.array([[s.x, s.y] for s in entries], dtype=np.float32)
    labels = np.array(
        [label_map.label_of(discretize(s.pose(), manifest.grid)) for s in entries],
        dtype=np.uint32,
    )
    embeddings = np.stack([embed_array(params, container.get(s)) for s in entries])
    return EmbeddingDB(
        sample_ids=sample_ids,
        map_ids=map_ids,
        poses=poses,
        labels=labels,
        embeddings=embeddings,
        metric=metric,
        normalized=params.cfg.normalize,
    )


def query(
    db: EmbeddingDB, embedding: np.ndarray, k: int, map_filter: int
) -> list[tuple[int, float]]:
    """Exact K nearest same-map entries, ascending distance, ties broken by
    ascending sample id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rows = np.nonzero(db.map_ids == map_filter)[0]
    if rows.size == 0:
        raise ValueError(f"database holds no entries for map {map_filter}")
    dists = _distances(db.embeddings[rows], embedding, db.metric)
    sids = db.sample_ids[rows]
    order = np.lexsort((sids, dists))[:k]
    return [(int(sids[i]), float(dists[i])) for i in order]


class SmallWorldGraph:
    """Single-layer navigable small-world graph over one map's embeddings.

    Nodes are inserted in a seeded random order; each new node links
    bidirectionally to its nearest predecessors found by beam search. Search
    is a deterministic best-first walk from the first inserted node.
    """

    def __init__(
        self,
        vectors: np.ndarray,
        sample_ids: np.ndarray,
        metric: str,
        seed: int = 0,
        degree: int = 12,
        ef_construction: int = 100,
    ):
        self.vectors = vectors.astype(np.float64)
        self.sample_ids = sample_ids
        self.metric = metric
        self.degree = degree
        n = len(vectors)
        order = np.random.default_rng((seed, 17)).permutation(n)
        self.neighbors: list[list[int]] = [[] for _ in range(n)]
        self.entry = int(order[0])
        for rank in range(1, n):
            node = int(order[rank])
            found = self._search_nodes(self.vectors[node], ef_construction)
            for _, other in found[:degree]:
                self.neighbors[node].append(other)
                self.neighbors[other].append(node)

    def _dist(self, nodes: np.ndarray, q: np.ndarray) -> np.ndarray:
        return _distances(self.vectors[nodes], q, self.metric)

    def _search_nodes(self, q: np.ndarray, ef: int) -> list[tuple[float, int]]:
        """Beam search returning up to ef (distance, node) pairs, sorted."""
        q = np.asarray(q, dtype=np.float64).ravel()
        entry = self.entry
        d0 = float(self._dist(np.array([entry]), q)[0])
        visited = {entry}
        frontier = [(d0, entry)]  # min-heap of candidates to expand
        best: list[tuple[float, int]] = [(-d0, entry)]  # max-heap of size <= ef
        while frontier:
            d, node = heapq.heappop(frontier)
            if len(best) >= ef and d > -best[0][0]:
                break
            fresh = [v for v in self.neighbors[node] if v not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            fresh = np.array(fresh)
            for dv, v in zip(self._dist(fresh, q), fresh):
                dv, v = float(dv), int(v)
                if len(best) < ef or dv < -best[0][0]:
                    heapq.heappush(frontier, (dv, v))
                    heapq.heappush(best, (-dv, v))
                    if len(best) > ef:
                        heapq.heappop(best)
        found = [(-nd, node) for nd, node in best]
        found.sort(key=lambda t: (t[0], int(self.sample_ids[t[1]])))
        return found

    def search(self, q: np.ndarray, k: int, ef: int) -> list[tuple[int, float]]:
        found = self._search_nodes(q, max(ef, k))
        return [(int(self.sample_ids[node]), d) for d, node in found[:k]]


def build_approx(
    db: EmbeddingDB, seed: int = 0, degree: int = 12, ef_construction: int = 100
) -> None:
    """Attach per-map small-world graphs to the database."""
    db._graphs = {}
    for m in np.unique(db.map_ids):
        rows = np.nonzero(db.map_ids == m)[0]
        db._graphs[int(m)] = (
            SmallWorldGraph(
                db.embeddings[rows],
                db.sample_ids[rows],
                db.metric,
                seed=seed,
                degree=degree,
                ef_construction=ef_construction,
            )
        )


def query_approx(
    db: EmbeddingDB, embedding: np.ndarray, k: int, map_filter: int, ef: int = 128
) -> list[tuple[int, float]]:
    """Best-effort K nearest using the small-world graph for the query's map."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not db._graphs:
        raise ValueError("approximate structure not built; call build_approx first")
    graph = db._graphs.get(int(map_filter))
    if graph is None:
        raise ValueError(f"database holds no entries for map {map_filter}")
    return graph.search(np.asarray(embedding), k, ef)


def save_db(db: EmbeddingDB, path) -> None:
    """Snapshot: magic, length-prefixed JSON header, then packed records of
    (u64 sample_id, u32 map_id, 2*f32 pose, u32 label, D*f32 embedding)."""
    header = {
        "count": int(len(db)),
        "dim": int(db.dim),
        "metric": db.metric,
        "normalized": bool(db.normalized),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    record = np.dtype(
        [
            ("sample_id", "<u8"),
            ("map_id", "<u4"),
            ("pose", "<f4", (2,)),
            ("label", "<u4"),
            ("embedding", "<f4", (db.dim,)),
        ]
    )
    packed = np.empty(len(db), dtype=record)
    packed["sample_id"] = db.sample_ids
    packed["map_id"] = db.map_ids
    packed["pose"] = db.poses
    packed["label"] = db.labels
    packed["embedding"] = db.embeddings
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(packed.tobytes())


def load_db(path) -> EmbeddingDB:
    raw = Path(path).read_bytes()
    if raw[:4] != DB_MAGIC:
        raise ValueError(f"{path}: not an embedding database (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + header_len])
    dim = header["dim"]
    record = np.dtype(
        [
            ("sample_id", "<u8"),
            ("map_id", "<u4"),
            ("pose", "<f4", (2,)),
            ("label", "<u4"),
            ("embedding", "<f4", (dim,)),
        ]
    )
    packed = np.frombuffer(raw[8 + header_len :], dtype=record)
    if len(packed) != header["count"]:
        raise ValueError(f"{path}: header says {header['count']} entries, found {len(packed)}")
    return EmbeddingDB(
        sample_ids=packed["sample_id"].copy(),
        map_ids=packed["map_id"].copy(),
        poses=packed["pose"].copy(),
        labels=packed["label"].copy(),
        embeddings=packed["embedding"].copy(),
        metric=header["metric"],
        normalized=header["normalized"],
    )
