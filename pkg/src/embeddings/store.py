from __future__ import annotations

import hashlib
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from src.metrics.metric_vector import MODALITIES, MetricVector
from src.validation.validate_embeddings import (
    ContractError,
    DataError,
    validate_finite,
    validate_ids,
    validate_same_dim,
    validate_unit_norm,
)

logger = logging.getLogger("densratio.store")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """
    n x d embedding rows with stable sample ids.

    Rows are stored as a read-only float64 array. `pre_norms` keeps the row norms
    seen before normalization, since normalizing destroys them.
    """

    ids: tuple[str, ...]
    rows: np.ndarray
    modality: str
    normalized: bool = False
    pre_norms: np.ndarray | None = None

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ContractError(f"Embedding rows must be 2-D, got shape {rows.shape}")
        if rows.shape[0] == 0:
            raise ContractError("empty matrix")
        if self.modality not in MODALITIES:
            raise ContractError(f"Unknown modality: {self.modality!r}")

        ids = tuple(str(i) for i in self.ids)
        validate_ids(ids, rows.shape[0])
        validate_finite(rows, ids)
        if self.normalized:
            validate_unit_norm(rows, ids)

        rows.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "rows", rows)

        if self.pre_norms is not None:
            pre = np.array(self.pre_norms, dtype=np.float64)
            if pre.shape != (rows.shape[0],):
                raise ContractError("pre_norms must hold one norm per row")
            pre.setflags(write=False)
            object.__setattr__(self, "pre_norms", pre)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def index_of(self) -> dict[str, int]:
        return {sample_id: k for k, sample_id in enumerate(self.ids)}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.modality.encode("utf-8"))
        h.update("\n".join(self.ids).encode("utf-8"))
        h.update(np.ascontiguousarray(self.rows).tobytes())
        return h.hexdigest()[:16]


def subset(m: EmbeddingMatrix, ids: Sequence[str]) -> EmbeddingMatrix:
    """Rows for `ids`, in the order of the `ids` list."""
    index = m.index_of()
    missing = [i for i in ids if i not in index]
    if missing:
        raise ContractError(f"Unknown sample ids: {missing[:10]}")

    rows = [index[i] for i in ids]
    pre = None if m.pre_norms is None else m.pre_norms[rows]
    return EmbeddingMatrix(tuple(ids), m.rows[rows], m.modality, m.normalized, pre)


def normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    norms = np.linalg.norm(m.rows, axis=1)
    zero = norms == 0.0
    if zero.any():
        first = int(np.flatnonzero(zero)[0])
        raise DataError(f"Zero-norm row {m.ids[first]!r} cannot be normalized")

    pre = m.pre_norms if m.pre_norms is not None else norms
    return EmbeddingMatrix(m.ids, m.rows / norms[:, None], m.modality, True, pre)


def raw_norms(m: EmbeddingMatrix) -> MetricVector:
    """Per-row Euclidean norm before normalization (cached norms win when present)."""
    values = m.pre_norms if m.pre_norms is not None else np.linalg.norm(m.rows, axis=1)
    return MetricVector(m.ids, values, "raw_norm", m.modality, {"cached": m.pre_norms is not None})


@dataclass(frozen=True)
class PairedCorpus:
    """Image/text matrices where images.ids[k] pairs with texts.ids[pairing[k]]."""

    images: EmbeddingMatrix
    texts: EmbeddingMatrix
    pairing: np.ndarray | None = None
    captions: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.images.modality != "image" or self.texts.modality != "text":
            raise ContractError("PairedCorpus needs an image matrix and a text matrix")
        if self.images.n != self.texts.n:
            raise ContractError(f"Pair count mismatch: {self.images.n} images vs {self.texts.n} texts")
        validate_same_dim(self.images.d, self.texts.d)

        pairing = np.arange(self.images.n) if self.pairing is None else np.asarray(self.pairing, dtype=np.int64)
        if pairing.shape != (self.images.n,) or not np.array_equal(np.sort(pairing), np.arange(self.images.n)):
            raise ContractError("pairing must be a bijection on 0..n-1")
        pairing.setflags(write=False)
        object.__setattr__(self, "pairing", pairing)

        if self.captions is not None:
            captions = tuple(self.captions)
            if len(captions) != self.texts.n:
                raise ContractError(f"Got {len(captions)} captions for {self.texts.n} texts")
            object.__setattr__(self, "captions", captions)

    @property
    def n(self) -> int:
        return self.images.n

    @property
    def ids(self) -> tuple[str, ...]:
        return self.images.ids

    def aligned_texts(self) -> EmbeddingMatrix:
        """Texts reordered so row k pairs with image row k."""
        order = self.pairing.tolist()
        pre = None if self.texts.pre_norms is None else self.texts.pre_norms[order]
        return EmbeddingMatrix(
            tuple(self.texts.ids[k] for k in order),
            self.texts.rows[order],
            "text",
            self.texts.normalized,
            pre,
        )

    def normalized(self) -> "PairedCorpus":
        return PairedCorpus(normalize(self.images), normalize(self.texts), self.pairing, self.captions)
