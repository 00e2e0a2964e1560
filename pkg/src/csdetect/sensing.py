"""Seeded random Gaussian sensing matrices and empirical isometry checks.

Matrices are generated with numpy's default PCG64 generator so that a
(rows, cols, seed) triple is a portable, reproducible identity for the
matrix. Entries are iid N(0, 1/rows), which keeps ||Phi f|| close to ||f||
for sparse f and makes the isometry defect directly interpretable.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SensingMatrix",
    "RipReport",
    "make_sensing_matrix",
    "minimum_rows",
    "project",
    "empirical_rip_check",
    "save_sensing_matrix",
    "load_sensing_matrix",
]

DEFAULT_ROW_CONSTANT = 4.0

_HEADER = struct.Struct("<qqq")


@dataclass(frozen=True, eq=False)
class SensingMatrix:
    """Compressing random projection with seed provenance."""

    entries: np.ndarray
    seed: int

    def __post_init__(self):
        entries = np.ascontiguousarray(np.asarray(self.entries, dtype=np.float64))
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)
        if entries.ndim != 2:
            raise ValueError("entries must be a 2-D matrix")
        m, n = entries.shape
        if not 1 <= m < n:
            raise ValueError(f"need 1 <= rows < cols for compression, got {m}x{n}")

    @property
    def rows(self) -> int:
        return int(self.entries.shape[0])

    @property
    def cols(self) -> int:
        return int(self.entries.shape[1])

    def __eq__(self, other):
        if not isinstance(other, SensingMatrix):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.entries, other.entries)


@dataclass(frozen=True)
class RipReport:
    """Result of a Monte-Carlo near-isometry scan."""

    delta_observed: float
    trials: int
    sparsity_tested: int
    violation_count: int
    delta_bound: float

    def __post_init__(self):
        if self.delta_observed < 0:
            raise ValueError("delta_observed must be >= 0")
        if self.violation_count > self.trials:
            raise ValueError("violation_count cannot exceed trials")


def make_sensing_matrix(rows: int, cols: int, seed: int) -> SensingMatrix:
    """Dense (rows, cols) matrix with iid N(0, 1/rows) entries."""
    if rows < 1:
        raise ValueError("rows must be >= 1")
    if rows >= cols:
        raise ValueError(f"rows={rows} must be < cols={cols}; projection must compress")
    rng = np.random.default_rng(seed)
    entries = rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols))
    return SensingMatrix(entries=entries, seed=seed)


def minimum_rows(
    sparsity: int, signal_length: int, constant: float = DEFAULT_ROW_CONSTANT
) -> int:
    """Smallest measurement count M with M >= constant * k * ln(N)."""
    if sparsity < 1:
        raise ValueError("sparsity must be >= 1")
    if signal_length <= 1:
        raise ValueError("signal_length must be > 1")
    if constant <= 1.0:
        raise ValueError("constant must be > 1")
    return int(math.ceil(constant * sparsity * math.log(signal_length)))


def project(phi: SensingMatrix, signal: np.ndarray) -> np.ndarray:
    """Apply the projection: y = Phi @ signal."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape != (phi.cols,):
        raise ValueError(
            f"signal shape {signal.shape} does not match matrix columns {phi.cols}"
        )
    return phi.entries @ signal


def empirical_rip_check(
    phi,
    sparsity: int,
    trials: int,
    seed: int,
    delta_bound: float = 0.6,
) -> RipReport:
    """Monte-Carlo scan of the near-isometry of phi on sparse vectors.

    Draws `trials` random unit vectors with 2*sparsity nonzeros (the
    difference of two k-sparse signals is 2k-sparse) and reports the worst
    observed deviation | ||Phi f|| - 1 | plus how many trials exceeded
    `delta_bound`.

    `phi` may be a SensingMatrix or a bare 2-D array (the latter lets tests
    probe square orthonormal matrices that the SensingMatrix constructor
    rejects).
    """
    matrix = phi.entries if isinstance(phi, SensingMatrix) else np.asarray(phi)
    n = matrix.shape[1]
    s = 2 * sparsity
    if s > n:
        raise ValueError(f"2*sparsity={s} exceeds signal length {n}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    violations = 0
    for _ in range(trials):
        support = rng.choice(n, size=s, replace=False)
        x = np.zeros(n)
        x[support] = rng.normal(size=s)
        x /= np.linalg.norm(x)
        deviation = abs(float(np.linalg.norm(matrix @ x)) - 1.0)
        worst = max(worst, deviation)
        if deviation > delta_bound:
            violations += 1
    return RipReport(
        delta_observed=worst,
        trials=trials,
        sparsity_tested=sparsity,
        violation_count=violations,
        delta_bound=delta_bound,
    )


def save_sensing_matrix(phi: SensingMatrix, path) -> None:
    """Flat binary dump: (rows, cols, seed) int64 header + row-major f8."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(phi.rows, phi.cols, phi.seed))
        fh.write(phi.entries.astype("<f8").tobytes())


def load_sensing_matrix(path) -> SensingMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated matrix file")
    rows, cols, seed = _HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != rows * cols:
        raise ValueError(
            f"{path}: expected {rows * cols} entries, found {body.size}"
        )
    return SensingMatrix(entries=body.reshape(rows, cols), seed=int(seed))
