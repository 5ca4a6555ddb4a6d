from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

UNIT_NORM_TOL = 1e-6


class DensratioError(Exception):
    """Base class for every error raised by the toolkit."""


class ContractError(DensratioError, ValueError):
    """Raised when a caller violates an operation's precondition."""


class DataError(DensratioError, ValueError):
    """Raised when values are unusable (NaN/Inf entries, zero-norm rows)."""


class FormatError(DataError):
    """Raised when an input file does not parse under its declared format."""


class TrainingDivergedError(DensratioError, RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"Training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class MatrixSpec:
    modality: str | None = None
    require_normalized: bool = False
    min_rows: int = 1


def validate_ids(ids: Sequence[str], n_rows: int) -> None:
    if len(ids) != n_rows:
        raise ContractError(f"Got {len(ids)} ids for {n_rows} rows")

    seen: set[str] = set()
    dupes: list[str] = []
    for sample_id in ids:
        if sample_id in seen:
            dupes.append(sample_id)
        seen.add(sample_id)
    if dupes:
        raise ContractError(f"Duplicate sample ids found: {dupes[:10]}")


def validate_finite(rows: np.ndarray, ids: Sequence[str]) -> None:
    bad = ~np.isfinite(rows).all(axis=1)
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise DataError(
            f"Non-finite entry in row {ids[first]!r} ({int(bad.sum())} bad rows in total)"
        )


def validate_unit_norm(rows: np.ndarray, ids: Sequence[str], tol: float = UNIT_NORM_TOL) -> None:
    norms = np.linalg.norm(rows, axis=1)
    off = np.abs(norms - 1.0) > tol
    if off.any():
        first = int(np.flatnonzero(off)[0])
        raise ContractError(
            f"Row {ids[first]!r} has norm {norms[first]:.9f}, expected unit norm"
        )


def validate_matrix(matrix, spec: MatrixSpec) -> None:
    """Check an EmbeddingMatrix against the requirements of a consuming operation."""
    if matrix.n < spec.min_rows:
        raise ContractError(f"Need at least {spec.min_rows} rows, got {matrix.n}")
    if spec.modality is not None and matrix.modality != spec.modality:
        raise ContractError(f"Expected {spec.modality} embeddings, got {matrix.modality}")
    if spec.require_normalized and not matrix.normalized:
        raise ContractError("Embeddings must be normalized first (see normalize)")


def validate_same_dim(*dims: int) -> None:
    if len(set(dims)) > 1:
        raise ContractError(f"Dimension mismatch: {list(dims)}")


def validate_id_cover(expected: Sequence[str], got: Sequence[str]) -> None:
    missing = set(expected) - set(got)
    extra = set(got) - set(expected)
    if missing or extra:
        raise ContractError(
            "Metric ids do not match corpus ids: "
            f"missing={sorted(missing)[:10]} extra={sorted(extra)[:10]} "
            f"(symmetric difference size {len(missing) + len(extra)})"
        )
