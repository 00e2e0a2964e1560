"""Domain types shared by every stage of the pipeline.

Coordinate convention: pixel coordinates are 1-based and run x = 1..width,
y = 1..height. Sub-pixel (real-valued) centroids are allowed everywhere;
rasterization to integer pixels rounds half up and happens only where a
dense map is actually needed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ImageGrid",
    "AnnotationSet",
    "SparseLocationSignal",
    "CompressedSignal",
    "DetectedPoint",
    "DetectionResult",
    "round_half_up",
    "sparsity_fraction",
    "to_dense_map",
    "save_annotations_csv",
    "load_annotations_csv",
    "save_detections_csv",
    "load_detections_csv",
]


def round_half_up(value: float) -> int:
    """Round to the nearest integer with halves going up (3.5 -> 4)."""
    return int(math.floor(value + 0.5))


def fmt_float(value) -> str:
    """Shortest round-trip decimal form, used by every text serializer."""
    return repr(float(value))


@dataclass(frozen=True)
class ImageGrid:
    """A width x height pixel grid."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(
                f"grid dimensions must be >= 1, got {self.width}x{self.height}"
            )

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def center(self) -> tuple[float, float]:
        # center of the 1-based pixel lattice [1, w] x [1, h]
        return (0.5 * (1 + self.width), 0.5 * (1 + self.height))

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        return (1.0 - margin <= x <= self.width + margin) and (
            1.0 - margin <= y <= self.height + margin
        )


@dataclass(frozen=True)
class AnnotationSet:
    """Cell centroids on a grid.

    Cells are (x, y) pairs, 1-based, real-valued. Every cell must lie on the
    grid and no two cells may be the identical point.
    """

    grid: ImageGrid
    cells: tuple = ()

    def __post_init__(self):
        cells = tuple((float(x), float(y)) for x, y in self.cells)
        object.__setattr__(self, "cells", cells)
        seen = set()
        for x, y in cells:
            if not self.grid.contains(x, y):
                raise ValueError(
                    f"cell ({x}, {y}) outside grid "
                    f"[1, {self.grid.width}] x [1, {self.grid.height}]"
                )
            if (x, y) in seen:
                raise ValueError(f"duplicate cell ({x}, {y})")
            seen.add((x, y))

    def __len__(self) -> int:
        return len(self.cells)

    def coords(self) -> np.ndarray:
        """Cell coordinates as a (k, 2) float array."""
        if not self.cells:
            return np.zeros((0, 2))
        return np.asarray(self.cells, dtype=np.float64)


def sparsity_fraction(annotations: AnnotationSet) -> float:
    """Fraction of grid pixels occupied by cells, k / (w*h)."""
    return len(annotations) / annotations.grid.n_pixels


def to_dense_map(annotations: AnnotationSet) -> np.ndarray:
    """Binary annotation map, shape (height, width), 1 at rounded centroids.

    Row index is y-1, column index is x-1.
    """
    grid = annotations.grid
    dense = np.zeros((grid.height, grid.width), dtype=np.uint8)
    for x, y in annotations.cells:
        px = min(max(round_half_up(x), 1), grid.width)
        py = min(max(round_half_up(y), 1), grid.height)
        dense[py - 1, px - 1] = 1
    return dense


def save_annotations_csv(annotations: AnnotationSet, path) -> None:
    """Write one centroid per row under an `x,y` header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y"])
        for x, y in annotations.cells:
            writer.writerow([fmt_float(x), fmt_float(y)])


def load_annotations_csv(path, grid: ImageGrid) -> AnnotationSet:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["x", "y"]:
            raise ValueError(f"{path}: expected header 'x,y', got {header}")
        cells = [(float(row[0]), float(row[1])) for row in reader if row]
    return AnnotationSet(grid=grid, cells=tuple(cells))


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SparseLocationSignal:
    """Sparse real vector with strictly increasing 1-based indices.

    `collapsed_duplicates` is metadata recording how many duplicate source
    positions were merged while building the signal; it does not take part
    in equality.
    """

    length: int
    indices: np.ndarray
    values: np.ndarray
    collapsed_duplicates: int = field(default=0, compare=False)

    def __post_init__(self):
        indices = _readonly(np.asarray(self.indices, dtype=np.int64))
        values = _readonly(np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)
        if self.length < 0:
            raise ValueError("length must be >= 0")
        if indices.shape != values.shape or indices.ndim != 1:
            raise ValueError("indices and values must be 1-D and equal length")
        if indices.size:
            if indices[0] < 1 or indices[-1] > self.length:
                raise ValueError("indices must lie in [1, length]")
            if np.any(np.diff(indices) <= 0):
                raise ValueError("indices must be strictly increasing")
        if np.any(values == 0.0) or not np.all(np.isfinite(values)):
            raise ValueError("stored values must be nonzero and finite")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.length)
        if self.indices.size:
            dense[self.indices - 1] = self.values
        return dense

    @classmethod
    def from_dense(cls, dense, collapsed_duplicates: int = 0) -> "SparseLocationSignal":
        dense = np.asarray(dense, dtype=np.float64)
        idx0 = np.flatnonzero(dense)
        return cls(
            length=dense.size,
            indices=idx0 + 1,
            values=dense[idx0],
            collapsed_duplicates=collapsed_duplicates,
        )

    def __eq__(self, other):
        if not isinstance(other, SparseLocationSignal):
            return NotImplemented
        return (
            self.length == other.length
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class CompressedSignal:
    """Fixed-length encoding vector, structured as block_count blocks of
    block_size entries (block_count is 1 for reshaping-based encoding and
    the number of observation axes for distance-based encoding)."""

    values: np.ndarray
    block_size: int
    block_count: int = 1

    def __post_init__(self):
        values = _readonly(np.asarray(self.values, dtype=np.float64).ravel())
        object.__setattr__(self, "values", values)
        if self.block_size < 1 or self.block_count < 1:
            raise ValueError("block_size and block_count must be >= 1")
        if values.size != self.block_size * self.block_count:
            raise ValueError(
                f"expected {self.block_size * self.block_count} values, "
                f"got {values.size}"
            )

    @property
    def length(self) -> int:
        return int(self.values.size)

    def block(self, index: int) -> np.ndarray:
        """The index-th block (0-based), as a read-only view."""
        if not 0 <= index < self.block_count:
            raise IndexError(f"block index {index} out of range")
        lo = index * self.block_size
        return self.values[lo : lo + self.block_size]

    def blocks(self):
        for i in range(self.block_count):
            yield self.block(i)

    def __eq__(self, other):
        if not isinstance(other, CompressedSignal):
            return NotImplemented
        return (
            self.block_size == other.block_size
            and self.block_count == other.block_count
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class DetectedPoint:
    """One detected point and the number of candidates that produced it."""

    x: float
    y: float
    support: int = 1

    def __post_init__(self):
        if self.support < 1:
            raise ValueError("support must be >= 1")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("detection coordinates must be finite")


@dataclass(frozen=True)
class DetectionResult:
    """Final detections for one image or patch."""

    points: tuple = ()

    def __post_init__(self):
        pts = tuple(
            p if isinstance(p, DetectedPoint) else DetectedPoint(*p)
            for p in self.points
        )
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def coords(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 2))
        return np.asarray([(p.x, p.y) for p in self.points], dtype=np.float64)

    def translated(self, dx: float, dy: float) -> "DetectionResult":
        return DetectionResult(
            tuple(DetectedPoint(p.x + dx, p.y + dy, p.support) for p in self.points)
        )


def save_detections_csv(result: DetectionResult, path) -> None:
    """Write detections as `x,y,support` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "support"])
        for p in result.points:
            writer.writerow([fmt_float(p.x), fmt_float(p.y), p.support])


def load_detections_csv(path) -> DetectionResult:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["x", "y", "support"]:
            raise ValueError(f"{path}: expected header 'x,y,support', got {header}")
        points = [
            DetectedPoint(float(r[0]), float(r[1]), int(r[2])) for r in reader if r
        ]
    return DetectionResult(tuple(points))
