"""From recovered sparse signals back to point detections.

Reshaping route: threshold the recovered map signal and invert the
index = x + h(y-1) rule.

Axis route: back-project every recovered (bin, distance) pair of every
axis into the image plane, drop near-axis noise (recovery errors produce
entries with tiny distances, true cells sit at least the encoder margin
away), cluster the surviving candidates with flat-kernel mean shift, and
keep clusters backed by enough axes. Detection = mean of the cluster's
candidates, support = how many candidates agreed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import DetectedPoint, DetectionResult, ImageGrid, SparseLocationSignal
from .encoder import AxisLayout, ObservationAxis
from .recovery import RecoveryParams, SolverTrace, bp_recover, omp_recover, operator_norm_sq
from .sensing import SensingMatrix

__all__ = [
    "CandidatePoint",
    "DecodeParams",
    "decode_scheme1",
    "backproject_axis",
    "filter_noise_candidates",
    "meanshift_cluster",
    "decode_scheme2",
    "merge_ensemble",
]

log = logging.getLogger(__name__)

_SHIFT_TOL = 1e-3
_SHIFT_MAX_ITER = 100


@dataclass(frozen=True)
class CandidatePoint:
    """One back-projected location vote from one axis."""

    x: float
    y: float
    source_axis: int
    magnitude: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("candidate coordinates must be finite")


@dataclass(frozen=True)
class DecodeParams:
    """Decoding knobs. None fields resolve against the axis layout:
    noise_margin defaults to the encoder margin, bandwidth to half of it,
    min_support to ceil(L/2)."""

    scheme1_threshold: float = 0.5
    bandwidth: float | None = None
    min_support: int | None = None
    noise_margin: float | None = None
    merge_radius: float = 9.0
    merge_min_count: int = 6

    def __post_init__(self):
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.min_support is not None and self.min_support < 1:
            raise ValueError("min_support must be >= 1")
        if self.noise_margin is not None and self.noise_margin <= 0:
            raise ValueError("noise_margin must be > 0")
        if self.merge_radius <= 0 or self.merge_min_count < 1:
            raise ValueError("merge parameters must be positive")

    def resolved(self, layout: AxisLayout) -> "DecodeParams":
        margin = self.noise_margin if self.noise_margin is not None else layout.margin
        bandwidth = self.bandwidth if self.bandwidth is not None else 0.5 * margin
        support = (
            self.min_support
            if self.min_support is not None
            else int(math.ceil(layout.count / 2))
        )
        if support > layout.count:
            raise ValueError(f"min_support {support} exceeds axis count {layout.count}")
        return DecodeParams(
            scheme1_threshold=self.scheme1_threshold,
            bandwidth=bandwidth,
            min_support=support,
            noise_margin=margin,
            merge_radius=self.merge_radius,
            merge_min_count=self.merge_min_count,
        )


def decode_scheme1(f_hat: SparseLocationSignal, grid: ImageGrid, threshold: float) -> DetectionResult:
    """Entries above the threshold, mapped back through index = x + h(y-1)."""
    if f_hat.length != grid.n_pixels:
        raise ValueError(
            f"signal length {f_hat.length} does not match grid pixels {grid.n_pixels}"
        )
    points = []
    h = grid.height
    for index, value in zip(f_hat.indices, f_hat.values):
        if value > threshold:
            x = int((index - 1) % h) + 1
            y = int((index - 1) // h) + 1
            if not grid.contains(x, y):
                raise ValueError(
                    f"index {index} inverts to ({x}, {y}) outside the grid; "
                    f"reshaping decode requires a square grid"
                )
            points.append(DetectedPoint(x=float(x), y=float(y), support=1))
    return DetectionResult(points=tuple(points))


def backproject_axis(f_hat_l: SparseLocationSignal, axis: ObservationAxis) -> list:
    """Each (bin r, distance d) entry votes for origin + r*dir + d*normal."""
    if f_hat_l.length != axis.bin_count:
        raise ValueError(
            f"signal length {f_hat_l.length} does not match bin count {axis.bin_count}"
        )
    ox, oy = axis.origin
    dx, dy = axis.direction
    nx, ny = axis.normal
    return [
        CandidatePoint(
            x=ox + r * dx + d * nx,
            y=oy + r * dy + d * ny,
            source_axis=axis.index,
            magnitude=abs(float(d)),
        )
        for r, d in zip(f_hat_l.indices, f_hat_l.values)
    ]


def filter_noise_candidates(candidates, grid: ImageGrid, noise_margin: float) -> list:
    """Drop votes that hug their axis (magnitude below the margin) or fall
    outside the margin-expanded image rectangle."""
    return [
        c
        for c in candidates
        if c.magnitude >= noise_margin and grid.contains(c.x, c.y, margin=noise_margin)
    ]


def meanshift_cluster(candidates, bandwidth: float):
    """Flat-kernel mean shift over candidate positions.

    Every candidate iterates to the mean of its bandwidth-neighbors until
    it moves less than 1e-3 px; converged modes closer than bandwidth/2 are
    the same cluster. Returns [(mean point, support)] where the mean is over
    the original (unshifted) member positions and support is the member
    count.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    if not candidates:
        return []
    pts = np.array([(c.x, c.y) for c in candidates], dtype=np.float64)
    modes = pts.copy()
    bw2 = bandwidth * bandwidth
    for i in range(len(pts)):
        p = modes[i]
        for _ in range(_SHIFT_MAX_ITER):
            d2 = np.sum((pts - p) ** 2, axis=1)
            shifted = pts[d2 <= bw2].mean(axis=0)
            if np.hypot(*(shifted - p)) < _SHIFT_TOL:
                p = shifted
                break
            p = shifted
        modes[i] = p

    merge2 = (0.5 * bandwidth) ** 2
    centers = []  # representative mode per cluster
    members = []
    for i in range(len(pts)):
        assigned = False
        for c, center in enumerate(centers):
            if np.sum((modes[i] - center) ** 2) <= merge2:
                members[c].append(i)
                assigned = True
                break
        if not assigned:
            centers.append(modes[i])
            members.append([i])
    return [
        ((float(pts[idx, 0].mean()), float(pts[idx, 1].mean())), len(idx))
        for idx in (np.array(m) for m in members)
    ]


def decode_scheme2(
    y_hat,
    layout: AxisLayout,
    phi: SensingMatrix,
    params: DecodeParams | None = None,
    recovery: RecoveryParams | None = None,
    solver: str = "bp",
    diagnostics: dict | None = None,
) -> DetectionResult:
    """Full axis-route decode of a concatenated measurement vector.

    Per axis: recover the sparse signal, back-project to candidate points.
    Pooled candidates are noise-filtered and mean-shift clustered; clusters
    with support >= min_support become detections at the cluster mean. A
    non-converging axis is logged and decoded with its best iterate rather
    than aborting the others.
    """
    params = (params or DecodeParams()).resolved(layout)
    recovery = recovery or RecoveryParams()
    if y_hat.block_count != layout.count:
        raise ValueError(
            f"{y_hat.block_count} measurement blocks for {layout.count} axes"
        )
    if phi.cols != layout.bin_count or phi.rows != y_hat.block_size:
        raise ValueError("matrix shape does not match layout bins / block size")
    if solver not in ("bp", "omp"):
        raise ValueError(f"unknown solver {solver!r}")
    norm_sq = operator_norm_sq(phi.entries) if solver == "bp" else None

    candidates = []
    axis_records = []
    stalled = []
    for axis in layout.axes:
        block = y_hat.block(axis.index - 1)
        trace = SolverTrace()
        if solver == "bp":
            f_hat_l = bp_recover(block, phi, recovery, trace=trace, op_norm_sq=norm_sq)
        else:
            f_hat_l = omp_recover(block, phi, recovery, trace=trace)
        if not trace.converged:
            stalled.append(axis.index)
        votes = backproject_axis(f_hat_l, axis)
        candidates.extend(votes)
        if diagnostics is not None:
            axis_records.append(
                {"axis": axis.index, "trace": trace, "signal": f_hat_l, "candidates": votes}
            )

    if stalled:
        log.warning(
            "%d of %d axes stopped above the recovery tolerance (axes %s); "
            "decoding with their best iterates",
            len(stalled), layout.count, ",".join(map(str, stalled)),
        )
    kept = filter_noise_candidates(candidates, layout.grid, params.noise_margin)
    clusters = meanshift_cluster(kept, params.bandwidth)
    points = tuple(
        DetectedPoint(x=cx, y=cy, support=support)
        for (cx, cy), support in clusters
        if support >= params.min_support
    )
    if diagnostics is not None:
        diagnostics["axes"] = axis_records
        diagnostics["kept_candidates"] = kept
        diagnostics["clusters"] = clusters
        diagnostics["params"] = params
    return DetectionResult(points=points)


def merge_ensemble(detection_sets, merge_radius: float = 9.0, merge_min_count: int = 6) -> DetectionResult:
    """Fuse detections from several runs of the same image.

    Pools everything, then repeatedly seeds on the unconsumed detection
    with the most unconsumed neighbors within merge_radius (ties: smallest
    x, then y). A group of at least merge_min_count detections is emitted
    as its average; a smaller group just consumes its seed. Result order
    and content are independent of the order of the input sets.
    """
    if merge_min_count < 1:
        raise ValueError("merge_min_count must be >= 1")
    if merge_radius <= 0:
        raise ValueError("merge_radius must be > 0")
    pool = sorted(
        ((p.x, p.y) for result in detection_sets for p in result.points),
    )
    if not pool:
        return DetectionResult()
    pts = np.array(pool, dtype=np.float64)
    alive = np.ones(len(pts), dtype=bool)
    r2 = merge_radius * merge_radius
    merged = []
    while alive.any():
        live_idx = np.flatnonzero(alive)
        live = pts[live_idx]
        d2 = np.sum((live[:, None, :] - live[None, :, :]) ** 2, axis=2)
        counts = np.sum(d2 <= r2, axis=1)
        seed = int(np.argmax(counts))  # pool is (x, y)-sorted, so first max wins ties
        group = live_idx[d2[seed] <= r2]
        if counts[seed] >= merge_min_count:
            gx, gy = pts[group].mean(axis=0)
            merged.append(DetectedPoint(x=float(gx), y=float(gy), support=int(counts[seed])))
            alive[group] = False
        else:
            alive[live_idx[seed]] = False
    merged.sort(key=lambda p: (p.x, p.y))
    return DetectionResult(points=tuple(merged))
