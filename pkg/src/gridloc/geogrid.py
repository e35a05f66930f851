"""Spatial grid labeling.

Continuous planar poses are discretized into per-map square cells, and the
occupied cells are numbered with contiguous class labels by sorting the
(kx, ky, map_id) tuples lexicographically. The label map is the class space
for training and the lookup table that turns retrieved labels back into
coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple


class CellKey(NamedTuple):
    """One grid cell: integer cell coordinates plus the map it belongs to."""

    kx: int
    ky: int
    map_id: int


@dataclass(frozen=True)
class GridConfig:
    """Square-cell discretization; ``h`` is the cell side length in meters."""

    h: float = 1.0

    def __post_init__(self):
        if not (self.h > 0):
            raise ValueError(f"cell size must be positive, got {self.h}")


def discretize(pose: tuple[float, float, int], cfg: GridConfig) -> CellKey:
    """Map a continuous pose (x, y, map_id) onto its grid cell.

    Cell indices are floor(x/h) and floor(y/h); they may be negative.
    """
    x, y, map_id = pose
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"non-finite pose coordinates ({x}, {y})")
    return CellKey(math.floor(x / cfg.h), math.floor(y / cfg.h), int(map_id))


def cell_center(cell: CellKey, cfg: GridConfig) -> tuple[float, float]:
    """Planar coordinates of the cell midpoint."""
    return ((cell.kx + 0.5) * cfg.h, (cell.ky + 0.5) * cfg.h)


class LabelMap:
    """Bijection between occupied cells and class labels 0..C-1.

    Labels follow the lexicographic order of (kx, ky, map_id), so iterating
    labels in increasing order walks the cells in strictly increasing tuple
    order. Immutable after construction.
    """

    __slots__ = ("_cells", "_labels")

    def __init__(self, cells: Iterable[CellKey | tuple[int, int, int]]):
        ordered = sorted({CellKey(*c) for c in cells})
        if not ordered:
            raise ValueError("cannot build a label map from zero cells")
        self._cells: list[CellKey] = ordered
        self._labels: dict[CellKey, int] = {c: i for i, c in enumerate(ordered)}

    @property
    def num_classes(self) -> int:
        return len(self._cells)

    def __len__(self) -> int:
        return len(self._cells)

    def __contains__(self, cell) -> bool:
        return CellKey(*cell) in self._labels

    def label_of(self, cell) -> int:
        try:
            return self._labels[CellKey(*cell)]
        except KeyError:
            raise KeyError(f"cell {tuple(cell)} has no label") from None

    def cell_of(self, label: int) -> CellKey:
        if not 0 <= label < len(self._cells):
            raise IndexError(
                f"label {label} outside the class range [0, {len(self._cells)})"
            )
        return self._cells[label]

    def cells(self) -> Iterator[CellKey]:
        return iter(self._cells)


def build_label_map(cells: Iterable[CellKey | tuple[int, int, int]]) -> LabelMap:
    """Deduplicate cells and number them in lexicographic order."""
    return LabelMap(cells)


def masked_labels(label_map: LabelMap, target: CellKey, radius: int = 1) -> set[int]:
    """Labels of stored cells adjacent to the target, to be excluded from loss.

    Adjacency is the Chebyshev neighborhood of the given radius (radius 1 is
    the 8-cell ring) on the target's own map; the target itself is never in
    the returned set. Cells that hold no label are simply skipped.
    """
    target = CellKey(*target)
    label_map.label_of(target)  # unknown target -> KeyError
    out: set[int] = set()
    for dx in range(-radius, radius + 1):
        for dy in range(-radius, radius + 1):
            if dx == 0 and dy == 0:
                continue
            neighbor = CellKey(target.kx + dx, target.ky + dy, target.map_id)
            label = label_map._labels.get(neighbor)
            if label is not None:
                out.add(label)
    return out


def save_label_map(label_map: LabelMap, cfg: GridConfig, path) -> None:
    """Write the label map as text: a ``C=.. h=..`` header, then one
    ``kx ky map_id label`` record per line, sorted by label."""
    lines = [f"C={label_map.num_classes} h={cfg.h!r}"]
    for label, cell in enumerate(label_map.cells()):
        lines.append(f"{cell.kx} {cell.ky} {cell.map_id} {label}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_label_map(path) -> tuple[LabelMap, GridConfig]:
    """Read a label map written by :func:`save_label_map`, validating that
    the stored labels are the contiguous lexicographic numbering."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty label map file")
    header = lines[0].split()
    try:
        count = int(header[0].removeprefix("C="))
        h = float(header[1].removeprefix("h="))
    except (IndexError, ValueError):
        raise ValueError(f"{path}: malformed header {lines[0]!r}") from None
    cells = []
    for i, line in enumerate(lines[1:]):
        kx, ky, map_id, label = (int(tok) for tok in line.split())
        if label != i:
            raise ValueError(f"{path}: labels out of order at line {i + 2}")
        cells.append(CellKey(kx, ky, map_id))
    if len(cells) != count:
        raise ValueError(f"{path}: header says C={count}, found {len(cells)} records")
    label_map = LabelMap(cells)
    for i, cell in enumerate(cells):
        if label_map.label_of(cell) != i:
            raise ValueError(f"{path}: records are not in lexicographic order")
    return label_map, GridConfig(h)
