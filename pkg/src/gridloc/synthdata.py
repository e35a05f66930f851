"""Deterministic multi-map synthetic LiDAR-like datasets and split logic.

Each map is a fixed procedural world: landmark points are placed by hashing
tile coordinates together with the dataset seed, so the local constellation
of points (including per-landmark heights) is a stable fingerprint of a
location. Scenes are smooth random-walk trajectories inside a bounded box;
every sample's cloud is the set of landmarks within sensor range expressed
in a sensor-local frame with a small pose jitter and per-point noise.
Revisits of a cell by different scenes therefore see similar but
non-identical geometry, which is what makes the cell classifiable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geogrid import CellKey, GridConfig, discretize

PCC_MAGIC = b"PCC1"

# rng stream tags, so the per-scene / per-scan / per-tile streams never collide
_STREAM_WALK = 101
_STREAM_SCAN = 202
_STREAM_TILE = 303
_TILE_OFFSET = 1 << 20  # keeps hashed tile indices non-negative


@dataclass(frozen=True)
class SynthConfig:
    maps: int = 4
    scenes_per_map: int = 10
    samples_per_scene: int = 50
    step_len: float = 1.2
    heading_noise: float = 0.35
    world_extent: float = 110.0
    landmark_spacing: float = 4.0
    landmarks_per_tile: int = 4
    tile_occupancy: float = 0.6
    points_per_scan: int = 384
    sensor_range: float = 30.0
    position_jitter: float = 0.15
    point_noise: float = 0.05
    height_range: float = 10.0
    cell_size: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("maps", "scenes_per_map", "samples_per_scene",
                     "landmarks_per_tile", "points_per_scan"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("step_len", "world_extent", "landmark_spacing",
                     "sensor_range", "cell_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.tile_occupancy <= 1:
            raise ValueError(f"tile_occupancy must be in (0, 1], got {self.tile_occupancy}")


@dataclass
class Sample:
    sample_id: int
    map_id: int
    x: float
    y: float
    scene_id: int
    timestamp: int  # microseconds
    cloud_offset: int = 0
    cloud_len: int = 0  # byte length of the container record
    split: str | None = None  # train / val / test
    role: str | None = None  # database / query / excluded

    def pose(self) -> tuple[float, float, int]:
        return (self.x, self.y, self.map_id)


@dataclass
class DatasetManifest:
    grid: GridConfig
    maps: int
    samples: list[Sample]
    container: str = "clouds.pcc"
    warn_no_revisits: bool = False

    def by_role(self, role: str) -> list[Sample]:
        return [s for s in self.samples if s.role == role]

    def by_split(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]

    def scene_ids(self) -> list[int]:
        return sorted({s.scene_id for s in self.samples})


class CloudContainer:
    """Point clouds stored back to back: 4-byte magic, then per cloud a
    little-endian u32 point count followed by N*3 float32 coordinates.
    Manifest samples address clouds by byte offset."""

    def __init__(self, clouds: list[np.ndarray]):
        self._clouds = [np.ascontiguousarray(c, dtype="<f4") for c in clouds]
        self._offsets: list[int] = []
        self._by_offset: dict[int, int] = {}
        pos = len(PCC_MAGIC)
        for i, cloud in enumerate(self._clouds):
            if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < 1:
                raise ValueError(f"cloud {i} must be a non-empty [N, 3] array")
            self._offsets.append(pos)
            self._by_offset[pos] = i
            pos += 4 + cloud.nbytes

    def __len__(self) -> int:
        return len(self._clouds)

    def offset_of(self, index: int) -> int:
        return self._offsets[index]

    def record_len(self, index: int) -> int:
        return 4 + self._clouds[index].nbytes

    def cloud_at(self, offset: int) -> np.ndarray:
        try:
            return self._clouds[self._by_offset[offset]]
        except KeyError:
            raise KeyError(f"no cloud record at byte offset {offset}") from None

    def get(self, sample: Sample) -> np.ndarray:
        return self.cloud_at(sample.cloud_offset)

    def tobytes(self) -> bytes:
        parts = [PCC_MAGIC]
        for cloud in self._clouds:
            parts.append(struct.pack("<I", cloud.shape[0]))
            parts.append(cloud.tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.tobytes())

    @classmethod
    def load(cls, path) -> "CloudContainer":
        raw = Path(path).read_bytes()
        if raw[:4] != PCC_MAGIC:
            raise ValueError(f"{path}: not a point-cloud container (bad magic)")
        clouds = []
        pos = 4
        while pos < len(raw):
            (count,) = struct.unpack_from("<I", raw, pos)
            end = pos + 4 + count * 12
            if end > len(raw):
                raise ValueError(f"{path}: truncated cloud record at offset {pos}")
            pts = np.frombuffer(raw[pos + 4 : end], dtype="<f4").reshape(count, 3)
            clouds.append(pts.copy())
            pos = end
        return cls(clouds)


def _tile_landmarks(cfg: SynthConfig, map_id: int, tx: int, ty: int) -> np.ndarray:
    """Landmark points of one world tile, fixed by (seed, map, tile).

    Tiles are independently empty or built-up, and a built tile carries a
    shared base height with a small spread, so the silhouette and the height
    profile a sensor sees are distinctive for each location. A world where
    every spot looks statistically alike would leave a permutation-invariant
    encoder nothing to latch onto.
    """
    rng = np.random.default_rng(
        (cfg.seed, _STREAM_TILE, map_id, tx + _TILE_OFFSET, ty + _TILE_OFFSET)
    )
    if rng.uniform() > cfg.tile_occupancy:
        return np.empty((0, 3))
    n = int(rng.integers(1, 2 * cfg.landmarks_per_tile + 1))
    spacing = cfg.landmark_spacing
    base = rng.uniform(0.0, cfg.height_range)
    xy = rng.uniform(0.0, spacing, size=(n, 2)) + np.array([tx * spacing, ty * spacing])
    z = base + rng.uniform(0.0, 0.1 * cfg.height_range, size=(n, 1))
    return np.hstack([xy, z])


def _visible_landmarks(cfg, map_id, x, y, tile_cache) -> np.ndarray:
    spacing = cfg.landmark_spacing
    r = cfg.sensor_range
    tx0, tx1 = int(np.floor((x - r) / spacing)), int(np.floor((x + r) / spacing))
    ty0, ty1 = int(np.floor((y - r) / spacing)), int(np.floor((y + r) / spacing))
    chunks = []
    for tx in range(tx0, tx1 + 1):
        for ty in range(ty0, ty1 + 1):
            key = (map_id, tx, ty)
            if key not in tile_cache:
                tile_cache[key] = _tile_landmarks(cfg, map_id, tx, ty)
            chunks.append(tile_cache[key])
    world = np.vstack(chunks)
    dist = np.hypot(world[:, 0] - x, world[:, 1] - y)
    return world[dist <= r]


def _scan(cfg: SynthConfig, map_id: int, x: float, y: float,
          rng: np.random.Generator, tile_cache: dict) -> np.ndarray:
    world = _visible_landmarks(cfg, map_id, x, y, tile_cache)
    jitter = rng.normal(0.0, cfg.position_jitter, size=2)
    n_vis = world.shape[0]
    if n_vis == 0:
        raise ValueError(
            f"no landmarks within sensor range at ({x:.1f}, {y:.1f}) on map "
            f"{map_id}; raise tile_occupancy or sensor_range"
        )
    n = cfg.points_per_scan
    if n_vis >= n:
        pick = np.sort(rng.choice(n_vis, size=n, replace=False))
    else:
        pick = np.sort(rng.choice(n_vis, size=n, replace=True))
    local = world[pick].copy()
    local[:, 0] -= x + jitter[0]
    local[:, 1] -= y + jitter[1]
    local += rng.normal(0.0, cfg.point_noise, size=local.shape)
    return local.astype(np.float32)


def _walk(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth random walk with reflecting box boundaries; one row per sample."""
    extent = cfg.world_extent
    pos = rng.uniform(0.0, extent, size=2)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    out = np.empty((cfg.samples_per_scene, 2))
    out[0] = pos
    for i in range(1, cfg.samples_per_scene):
        heading += rng.normal(0.0, cfg.heading_noise)
        pos = pos + cfg.step_len * np.array([np.cos(heading), np.sin(heading)])
        if pos[0] < 0.0 or pos[0] > extent:
            pos[0] = np.clip(2.0 * np.clip(pos[0], 0.0, extent) - pos[0], 0.0, extent)
            heading = np.pi - heading
        if pos[1] < 0.0 or pos[1] > extent:
            pos[1] = np.clip(2.0 * np.clip(pos[1], 0.0, extent) - pos[1], 0.0, extent)
            heading = -heading
        out[i] = pos
    return out


def revisited_cell_count(manifest: DatasetManifest) -> int:
    """Cells visited by samples of two or more different scenes."""
    scenes_by_cell: dict[CellKey, set[int]] = {}
    for s in manifest.samples:
        cell = discretize(s.pose(), manifest.grid)
        scenes_by_cell.setdefault(cell, set()).add(s.scene_id)
    return sum(1 for scenes in scenes_by_cell.values() if len(scenes) >= 2)


def generate(cfg: SynthConfig) -> tuple[DatasetManifest, CloudContainer]:
    """Build the full dataset; identical cfg (including seed) gives
    byte-identical manifest and container."""
    clouds: list[np.ndarray] = []
    samples: list[Sample] = []
    tile_cache: dict = {}
    sid = 0
    total_scenes = cfg.maps * cfg.scenes_per_map
    for scene in range(total_scenes):
        map_id = scene % cfg.maps  # round-robin keeps every map in every era
        walk_rng = np.random.default_rng((cfg.seed, _STREAM_WALK, scene))
        poses = _walk(cfg, walk_rng)
        start_us = 1_000_000_000 + scene * 600_000_000
        for j, (x, y) in enumerate(poses):
            scan_rng = np.random.default_rng((cfg.seed, _STREAM_SCAN, scene, j))
            clouds.append(_scan(cfg, map_id, float(x), float(y), scan_rng, tile_cache))
            samples.append(
                Sample(
                    sample_id=sid,
                    map_id=map_id,
                    x=float(x),
                    y=float(y),
                    scene_id=scene,
                    timestamp=start_us + j * 500_000,
                )
            )
            sid += 1
    container = CloudContainer(clouds)
    for i, s in enumerate(samples):
        s.cloud_offset = container.offset_of(i)
        s.cloud_len = container.record_len(i)
    manifest = DatasetManifest(grid=GridConfig(cfg.cell_size), maps=cfg.maps, samples=samples)
    manifest.warn_no_revisits = revisited_cell_count(manifest) == 0
    return manifest, container


def split_train_val(manifest: DatasetManifest, k_percent: float = 90.0) -> DatasetManifest:
    """Tag whole scenes: sort by first timestamp, first k% (rounded down)
    become train, the rest val. No scene ever straddles the boundary."""
    if not 0 < k_percent < 100:
        raise ValueError(f"k_percent must be in (0, 100), got {k_percent}")
    first_ts: dict[int, int] = {}
    for s in manifest.samples:
        if s.scene_id not in first_ts or s.timestamp < first_ts[s.scene_id]:
            first_ts[s.scene_id] = s.timestamp
    scenes = sorted(first_ts, key=lambda sc: (first_ts[sc], sc))
    if len(scenes) < 2:
        raise ValueError(f"need at least 2 scenes to split, got {len(scenes)}")
    n_train = int(len(scenes) * k_percent / 100)
    if n_train < 1 or n_train >= len(scenes):
        raise ValueError(
            f"k_percent={k_percent} leaves no usable split over {len(scenes)} scenes"
        )
    train_scenes = set(scenes[:n_train])
    for s in manifest.samples:
        s.split = "train" if s.scene_id in train_scenes else "val"
    return manifest


def assign_roles(manifest: DatasetManifest) -> DatasetManifest:
    """Train samples form the retrieval database; val/test samples are queries."""
    for s in manifest.samples:
        s.role = "database" if s.split == "train" else "query"
    return manifest


def filter_queries(
    manifest: DatasetManifest, radius: float = 18.0
) -> tuple[DatasetManifest, dict]:
    """Drop queries with no same-map database sample within the match radius.

    Returns the manifest plus kept/removed counts per map per split.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    db_xy: dict[int, np.ndarray] = {}
    for m in range(manifest.maps):
        pts = [(s.x, s.y) for s in manifest.samples if s.role == "database" and s.map_id == m]
        if pts:
            db_xy[m] = np.asarray(pts)
    stats: dict[int, dict[str, dict[str, int]]] = {
        m: {} for m in range(manifest.maps)
    }
    for s in manifest.samples:
        if s.role != "query":
            continue
        per_split = stats[s.map_id].setdefault(s.split, {"kept": 0, "removed": 0})
        near = db_xy.get(s.map_id)
        if near is not None and bool(
            (np.hypot(near[:, 0] - s.x, near[:, 1] - s.y) <= radius).any()
        ):
            per_split["kept"] += 1
        else:
            s.role = "excluded"
            per_split["removed"] += 1
    return manifest, stats


def holdout_split(
    manifest: DatasetManifest, holdout_map: int, k_percent: float = 90.0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Leave one map out: the other maps form a training dataset, while the
    held-out map's own scenes are re-split by timestamp into database
    (first k%) and query (rest), independent of the training maps."""
    if manifest.maps < 2:
        raise ValueError(f"need at least 2 maps for a holdout split, got {manifest.maps}")
    if not 0 <= holdout_map < manifest.maps:
        raise ValueError(f"holdout map {holdout_map} outside [0, {manifest.maps})")
    train_samples = [replace(s) for s in manifest.samples if s.map_id != holdout_map]
    held_samples = [replace(s) for s in manifest.samples if s.map_id == holdout_map]
    if not held_samples:
        raise ValueError(f"map {holdout_map} has no samples")
    train_manifest = DatasetManifest(
        grid=manifest.grid, maps=manifest.maps, samples=train_samples,
        container=manifest.container,
    )
    held_manifest = DatasetManifest(
        grid=manifest.grid, maps=manifest.maps, samples=held_samples,
        container=manifest.container,
    )
    first_ts: dict[int, int] = {}
    for s in held_samples:
        if s.scene_id not in first_ts or s.timestamp < first_ts[s.scene_id]:
            first_ts[s.scene_id] = s.timestamp
    scenes = sorted(first_ts, key=lambda sc: (first_ts[sc], sc))
    if len(scenes) < 2:
        raise ValueError("held-out map needs at least 2 scenes for its internal split")
    n_db = int(len(scenes) * k_percent / 100)
    if n_db < 1 or n_db >= len(scenes):
        raise ValueError(
            f"k_percent={k_percent} leaves no usable holdout split over {len(scenes)} scenes"
        )
    db_scenes = set(scenes[:n_db])
    for s in held_samples:
        if s.scene_id in db_scenes:
            s.split, s.role = "train", "database"
        else:
            s.split, s.role = "val", "query"
    return train_manifest, held_manifest


def decimate(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Keep a uniform random 1/k subsample of a cloud, exactly
    max(1, round(N/k)) points; k=1 returns the cloud unchanged."""
    if k < 1:
        raise ValueError(f"decimation factor must be >= 1, got {k}")
    n = points.shape[0]
    if k == 1:
        return points.copy()
    if n < k:
        raise ValueError(f"cloud has {n} points, fewer than the decimation factor {k}")
    m = max(1, round(n / k))
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return points[idx]


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "grid": {"h": manifest.grid.h},
        "maps": manifest.maps,
        "container": manifest.container,
        "warn_no_revisits": manifest.warn_no_revisits,
        "samples": [asdict(s) for s in manifest.samples],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_manifest(path) -> DatasetManifest:
    doc = json.loads(Path(path).read_text())
    samples = [Sample(**rec) for rec in doc["samples"]]
    return DatasetManifest(
        grid=GridConfig(doc["grid"]["h"]),
        maps=doc["maps"],
        samples=samples,
        container=doc.get("container", "clouds.pcc"),
        warn_no_revisits=doc.get("warn_no_revisits", False),
    )
