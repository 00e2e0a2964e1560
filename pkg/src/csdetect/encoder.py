"""Cell-location encodings.

Two routes from an AnnotationSet to a fixed-length real vector:

* reshaping route: rasterize the annotations to a binary map, flatten it
  with the column-major rule index = x + h(y-1), project once.
* axis route: place L directed lines (observation axes) uniformly around
  and outside the image, record each cell on each axis as (bin along the
  axis, signed perpendicular distance), project each axis signal and
  concatenate.

The axes are tangent to a circle of radius half-diagonal + margin around
the grid center, with the normal pointing back at the image, so every true
cell sits at a signed distance of at least `margin` from its axis. That gap
is what lets the decoder separate real cells from recovery noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml

from .core import AnnotationSet, CompressedSignal, ImageGrid, SparseLocationSignal, round_half_up
from .sensing import SensingMatrix, project

__all__ = [
    "ObservationAxis",
    "AxisLayout",
    "default_margin",
    "flatten_annotations",
    "encode_scheme1",
    "build_axis_layout",
    "project_to_axis",
    "axis_signal",
    "encode_scheme2",
    "save_axis_layout",
    "load_axis_layout",
]

_UNIT_TOL = 1e-12


def default_margin(grid: ImageGrid) -> float:
    """Axis standoff distance: 5% of the image diagonal."""
    return 0.05 * grid.diagonal


def flatten_annotations(annotations: AnnotationSet) -> SparseLocationSignal:
    """Binary map flattened to length N = w*h via index = x + h(y-1).

    Centroids are rounded to pixels first. Distinct cells that round to the
    same pixel (or, on non-square grids, to the same index, since the
    formula is only a bijection when w = h) collapse to one entry; the
    collapse count is reported in the signal metadata.
    """
    grid = annotations.grid
    n = grid.n_pixels
    taken = set()
    collapsed = 0
    for cx, cy in annotations.cells:
        x = min(max(round_half_up(cx), 1), grid.width)
        y = min(max(round_half_up(cy), 1), grid.height)
        index = x + grid.height * (y - 1)
        if not 1 <= index <= n:
            raise ValueError(
                f"cell ({cx}, {cy}) maps to index {index} outside [1, {n}]; "
                f"the x + h(y-1) rule is only a bijection on square grids"
            )
        if index in taken:
            collapsed += 1
        else:
            taken.add(index)
    indices = np.sort(np.fromiter(taken, dtype=np.int64, count=len(taken)))
    return SparseLocationSignal(
        length=n,
        indices=indices,
        values=np.ones(indices.size),
        collapsed_duplicates=collapsed,
    )


def encode_scheme1(annotations: AnnotationSet, phi: SensingMatrix) -> CompressedSignal:
    """Single projection of the flattened annotation map."""
    f = flatten_annotations(annotations)
    if phi.cols != f.length:
        raise ValueError(
            f"matrix expects signals of length {phi.cols}, grid gives {f.length}"
        )
    return CompressedSignal(values=project(phi, f.to_dense()), block_size=phi.rows)


@dataclass(frozen=True)
class ObservationAxis:
    """A directed line outside the image.

    Points project to `bin = round((p - origin) . direction)` along the
    line and to `distance = (p - origin) . normal` across it; `normal` is
    `direction` rotated +90 degrees.
    """

    index: int
    origin: tuple
    direction: tuple
    normal: tuple
    bin_count: int

    def __post_init__(self):
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(
            self, "direction", (float(self.direction[0]), float(self.direction[1]))
        )
        object.__setattr__(self, "normal", (float(self.normal[0]), float(self.normal[1])))
        if self.index < 1:
            raise ValueError("axis index is 1-based")
        if self.bin_count < 1:
            raise ValueError("bin_count must be >= 1")
        dx, dy = self.direction
        nx, ny = self.normal
        if abs(math.hypot(dx, dy) - 1.0) > _UNIT_TOL:
            raise ValueError("direction must be a unit vector")
        if abs(dx * nx + dy * ny) > _UNIT_TOL:
            raise ValueError("normal must be orthogonal to direction")
        if abs(nx + dy) > _UNIT_TOL or abs(ny - dx) > _UNIT_TOL:
            raise ValueError("normal must be direction rotated +90 degrees")


@dataclass(frozen=True)
class AxisLayout:
    """L observation axes around one grid."""

    axes: tuple
    grid: ImageGrid
    margin: float

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        if not self.axes:
            raise ValueError("layout needs at least one axis")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        # every axis line must clear the pixel-extent rectangle of the grid
        cx, cy = self.grid.center
        half_w = 0.5 * self.grid.width
        half_h = 0.5 * self.grid.height
        for axis in self.axes:
            nx, ny = axis.normal
            line_dist = abs((cx - axis.origin[0]) * nx + (cy - axis.origin[1]) * ny)
            if line_dist <= half_w * abs(nx) + half_h * abs(ny):
                raise ValueError(f"axis {axis.index} intersects the image rectangle")

    @property
    def count(self) -> int:
        return len(self.axes)

    @property
    def bin_count(self) -> int:
        return self.axes[0].bin_count


def build_axis_layout(grid: ImageGrid, count: int, margin: float | None = None) -> AxisLayout:
    """Uniformly oriented axes at angles (l-1)*pi/L, l = 1..L.

    Each axis runs tangent to the circle of radius half-diagonal + margin
    centered on the grid, on the side that makes its normal point back at
    the image, so all in-image signed distances are positive and at least
    `margin`. Bins are centered on the tangent point; bin_count is the
    ceiling of the diagonal so every in-image point lands in a valid bin.
    """
    if count < 1:
        raise ValueError("need at least one axis")
    if margin is None:
        margin = default_margin(grid)
    if margin <= 0:
        raise ValueError("margin must be > 0")
    bins = int(math.ceil(grid.diagonal))
    cx, cy = grid.center
    radius = 0.5 * grid.diagonal + margin
    mid = 0.5 * (bins + 1)
    axes = []
    for l in range(1, count + 1):
        theta = (l - 1) * math.pi / count
        dx, dy = math.cos(theta), math.sin(theta)
        nx, ny = -dy, dx
        tangent = (cx - radius * nx, cy - radius * ny)
        origin = (tangent[0] - mid * dx, tangent[1] - mid * dy)
        axes.append(
            ObservationAxis(
                index=l, origin=origin, direction=(dx, dy), normal=(nx, ny), bin_count=bins
            )
        )
    return AxisLayout(axes=tuple(axes), grid=grid, margin=margin)


def project_to_axis(cell, axis: ObservationAxis) -> tuple:
    """(bin, signed distance) of a point on one axis.

    The bin is the rounded along-axis coordinate clamped to [1, bin_count];
    the distance is exact. Reconstructing origin + t*direction + d*normal
    from the unrounded t returns the point, so rounding is the only loss.
    """
    px = cell[0] - axis.origin[0]
    py = cell[1] - axis.origin[1]
    t = px * axis.direction[0] + py * axis.direction[1]
    d = px * axis.normal[0] + py * axis.normal[1]
    r = min(max(round_half_up(t), 1), axis.bin_count)
    return r, d


def axis_signal(annotations: AnnotationSet, axis: ObservationAxis) -> SparseLocationSignal:
    """Per-axis location signal: signed distances stored at projected bins.

    When two cells land in the same bin the one with the smaller absolute
    distance wins (ties: smaller x, then smaller y); the loser is counted
    in collapsed_duplicates and will still be seen by other axes.
    """
    best = {}
    collapsed = 0
    for cx, cy in annotations.cells:
        r, d = project_to_axis((cx, cy), axis)
        key = (abs(d), cx, cy)
        if r in best:
            collapsed += 1
            if key < best[r][0]:
                best[r] = (key, d)
        else:
            best[r] = (key, d)
    indices = np.sort(np.fromiter(best.keys(), dtype=np.int64, count=len(best)))
    values = np.array([best[int(r)][1] for r in indices])
    return SparseLocationSignal(
        length=axis.bin_count,
        indices=indices,
        values=values,
        collapsed_duplicates=collapsed,
    )


def encode_scheme2(
    annotations: AnnotationSet, layout: AxisLayout, phi: SensingMatrix
) -> CompressedSignal:
    """Project every axis signal and concatenate in axis order."""
    if phi.cols != layout.bin_count:
        raise ValueError(
            f"matrix expects signals of length {phi.cols}, layout bins are "
            f"{layout.bin_count}"
        )
    blocks = [project(phi, axis_signal(annotations, ax).to_dense()) for ax in layout.axes]
    return CompressedSignal(
        values=np.concatenate(blocks), block_size=phi.rows, block_count=layout.count
    )


def save_axis_layout(layout: AxisLayout, path) -> None:
    doc = {
        "grid": {"width": layout.grid.width, "height": layout.grid.height},
        "margin": float(layout.margin),
        "axes": [
            {
                "index": ax.index,
                "origin": [float(ax.origin[0]), float(ax.origin[1])],
                "direction": [float(ax.direction[0]), float(ax.direction[1])],
                "bin_count": ax.bin_count,
            }
            for ax in layout.axes
        ],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)


def load_axis_layout(path) -> AxisLayout:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    grid = ImageGrid(width=doc["grid"]["width"], height=doc["grid"]["height"])
    axes = []
    for entry in doc["axes"]:
        dx, dy = entry["direction"]
        axes.append(
            ObservationAxis(
                index=entry["index"],
                origin=tuple(entry["origin"]),
                direction=(dx, dy),
                normal=(-dy, dx),
                bin_count=entry["bin_count"],
            )
        )
    return AxisLayout(axes=tuple(axes), grid=grid, margin=doc["margin"])
