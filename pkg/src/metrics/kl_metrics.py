"""
Per-sample divergence metrics built on similarity-as-log-ratio.

For a query embedding q and a reference set of the other modality with scores
s_t = a<v_t, q>:

    D_KL  = sum_t softmax(s)_t * s_t - log mean_t e^{s_t}
    D_KLR = log mean_t e^{s_t} - mean_t s_t              (>= 0 by Jensen)

D_KL is KL(p(.|q) || p(.)) with p uniform over the references; its second term
is the log of the empirical normalizer. The quadratic approximations use the
moments of the reference sets:

    D_C = a^2 ||q - mean_same||^2
    D_W = a^2 (q - mean_same)^T Cov_other (q - mean_same)
"""
from __future__ import annotations

import json
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from scipy.stats import pearsonr

from src.embeddings.store import EmbeddingMatrix, raw_norms
from src.metrics.metric_vector import METRIC_KINDS, MetricVector
from src.ratio.ratio_core import ScoreModel
from src.validation.validate_embeddings import (
    ContractError,
    MatrixSpec,
    validate_matrix,
    validate_same_dim,
)

logger = logging.getLogger("densratio.kl_metrics")

DIVERGENCE_KINDS = ("d_kl", "d_klr", "d_c", "d_w")
DEFAULT_CHUNK = 1024
SYMMETRY_TOL = 1e-12


def other_modality(modality: str) -> str:
    return "text" if modality == "image" else "image"


@dataclass(frozen=True)
class MomentSummary:
    """Sample means and biased (1/n) covariances of a text set and an image set."""

    mean_text: np.ndarray
    mean_image: np.ndarray
    cov_text: np.ndarray
    cov_image: np.ndarray
    counts: dict[str, int]
    fingerprints: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("cov_text", "cov_image"):
            cov = getattr(self, name)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ContractError(f"{name} must be square, got {cov.shape}")
            if np.abs(cov - cov.T).max() > SYMMETRY_TOL:
                raise ContractError(f"{name} is not symmetric")
        validate_same_dim(
            self.mean_text.shape[0], self.mean_image.shape[0], self.cov_text.shape[0], self.cov_image.shape[0]
        )

    @property
    def d(self) -> int:
        return self.mean_text.shape[0]

    def mean(self, modality: str) -> np.ndarray:
        return self.mean_image if modality == "image" else self.mean_text

    def cov(self, modality: str) -> np.ndarray:
        return self.cov_image if modality == "image" else self.cov_text


def row_moments(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / rows.shape[0]
    return mean, (cov + cov.T) / 2.0


def moments_from_rows(text_rows: np.ndarray, image_rows: np.ndarray) -> MomentSummary:
    mean_t, cov_t = row_moments(text_rows)
    mean_i, cov_i = row_moments(image_rows)
    return MomentSummary(mean_t, mean_i, cov_t, cov_i, {"text": len(text_rows), "image": len(image_rows)})


def moment_summary(texts: EmbeddingMatrix, images: EmbeddingMatrix) -> MomentSummary:
    validate_matrix(texts, MatrixSpec(modality="text"))
    validate_matrix(images, MatrixSpec(modality="image"))
    validate_same_dim(texts.d, images.d)

    summary = moments_from_rows(texts.rows, images.rows)
    return MomentSummary(
        summary.mean_text,
        summary.mean_image,
        summary.cov_text,
        summary.cov_image,
        summary.counts,
        {"text": texts.fingerprint(), "image": images.fingerprint()},
    )


# --- Array kernels (one row per query) ---


def d_kl_rows(query_rows: np.ndarray, ref_rows: np.ndarray, a: float) -> np.ndarray:
    s = a * (query_rows @ ref_rows.T)
    lse = logsumexp(s, axis=1)
    weights = np.exp(s - lse[:, None])
    return (weights * s).sum(axis=1) - (lse - np.log(ref_rows.shape[0]))


def d_klr_rows(query_rows: np.ndarray, ref_rows: np.ndarray, a: float) -> np.ndarray:
    s = a * (query_rows @ ref_rows.T)
    return logsumexp(s, axis=1) - np.log(ref_rows.shape[0]) - s.mean(axis=1)


def d_c_rows(query_rows: np.ndarray, mean: np.ndarray, a: float) -> np.ndarray:
    diff = query_rows - mean
    return a**2 * np.einsum("ij,ij->i", diff, diff)


def d_c_rows_leave_one_out(rows: np.ndarray, a: float) -> np.ndarray:
    """D_C of each row against the mean of all the other rows."""
    n = rows.shape[0]
    loo_means = (rows.sum(axis=0) - rows) / (n - 1)
    diff = rows - loo_means
    return a**2 * np.einsum("ij,ij->i", diff, diff)


def d_w_rows(query_rows: np.ndarray, mean: np.ndarray, cov: np.ndarray, a: float) -> np.ndarray:
    diff = query_rows - mean
    return a**2 * np.einsum("ij,ij->i", diff @ cov, diff)


def _map_chunks(fn: Callable[[np.ndarray], np.ndarray], rows: np.ndarray, chunk_size: int, threads: int) -> np.ndarray:
    chunks = [rows[k : k + chunk_size] for k in range(0, rows.shape[0], chunk_size)]
    if threads <= 1 or len(chunks) == 1:
        return np.concatenate([fn(c) for c in chunks])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # map keeps chunk order, so the result does not depend on the schedule
        return np.concatenate(list(pool.map(fn, chunks)))


def evaluate_rows(
    kind: str,
    query_rows: np.ndarray,
    a: float,
    other_rows: np.ndarray | None = None,
    same_rows: np.ndarray | None = None,
    exclude_self: bool = False,
    chunk_size: int = DEFAULT_CHUNK,
    threads: int = 1,
) -> np.ndarray:
    """
    Evaluate one divergence metric for every query row.

    other_rows: reference set of the other modality (D_T for image queries).
    same_rows: reference set of the query modality (D_I for image queries);
        defaults to the queries themselves.
    """
    if kind not in DIVERGENCE_KINDS:
        raise ContractError(f"{kind!r} is not a divergence metric; expected one of {DIVERGENCE_KINDS}")
    same_rows = query_rows if same_rows is None else same_rows

    if kind in ("d_kl", "d_klr", "d_w"):
        if other_rows is None or other_rows.shape[0] == 0:
            raise ContractError(f"{kind} needs a nonempty reference set of the other modality")
        validate_same_dim(query_rows.shape[1], other_rows.shape[1])
    validate_same_dim(query_rows.shape[1], same_rows.shape[1])

    if kind == "d_kl":
        return _map_chunks(lambda q: d_kl_rows(q, other_rows, a), query_rows, chunk_size, threads)
    if kind == "d_klr":
        return _map_chunks(lambda q: d_klr_rows(q, other_rows, a), query_rows, chunk_size, threads)
    if kind == "d_c":
        if exclude_self:
            if same_rows is not query_rows:
                raise ContractError("exclude_self needs the queries to be the reference set")
            if query_rows.shape[0] < 2:
                raise ContractError("exclude_self needs at least 2 rows")
            return d_c_rows_leave_one_out(query_rows, a)
        return d_c_rows(query_rows, same_rows.mean(axis=0), a)

    mean, _ = row_moments(same_rows)
    _, cov = row_moments(other_rows)
    return _map_chunks(lambda q: d_w_rows(q, mean, cov, a), query_rows, chunk_size, threads)


# --- Single-query operations ---


def _query(query, d: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ContractError(f"Query must be a vector, got shape {q.shape}")
    validate_same_dim(q.shape[0], d)
    return q


def d_kl(query, refs: EmbeddingMatrix, model: ScoreModel) -> float:
    validate_matrix(refs, MatrixSpec(require_normalized=True))
    q = _query(query, refs.d)
    return float(d_kl_rows(q[None, :], refs.rows, model.logit_scale)[0])


def d_klr(query, refs: EmbeddingMatrix, model: ScoreModel) -> float:
    validate_matrix(refs, MatrixSpec(require_normalized=True))
    q = _query(query, refs.d)
    return float(d_klr_rows(q[None, :], refs.rows, model.logit_scale)[0])


def d_c(query, summary: MomentSummary, modality: str, a: float) -> float:
    q = _query(query, summary.d)
    return float(d_c_rows(q[None, :], summary.mean(modality), a)[0])


def d_w(query, summary: MomentSummary, a: float, modality: str = "image") -> float:
    """D_W(i) uses the image mean and the text covariance; text queries swap both."""
    q = _query(query, summary.d)
    return float(d_w_rows(q[None, :], summary.mean(modality), summary.cov(other_modality(modality)), a)[0])


def conformity(m: EmbeddingMatrix) -> MetricVector:
    """Mean cosine similarity of each row to every other row."""
    validate_matrix(m, MatrixSpec(require_normalized=True, min_rows=2))
    rows = m.rows
    self_dots = np.einsum("ij,ij->i", rows, rows)
    values = (rows @ rows.sum(axis=0) - self_dots) / (m.n - 1)
    return MetricVector(m.ids, values, "conformity", m.modality, {"n": m.n})


def compute_metric(
    kind: str,
    queries: EmbeddingMatrix,
    model: ScoreModel,
    other: EmbeddingMatrix | None = None,
    same: EmbeddingMatrix | None = None,
    exclude_self: bool = False,
    chunk_size: int = DEFAULT_CHUNK,
    threads: int = 1,
) -> MetricVector:
    """
    Evaluate `kind` for every query and tag the result with its parameters.

    For image queries `other` is the text reference set D_T and `same` the image
    set D_I (defaults to the queries); text queries reverse the roles.
    """
    if kind not in METRIC_KINDS or kind == "iwl_weight":
        raise ContractError(f"Cannot compute metric kind {kind!r} here")
    if kind == "raw_norm":
        return raw_norms(queries)
    if kind == "conformity":
        return conformity(queries)

    validate_matrix(queries, MatrixSpec(require_normalized=True))
    params: dict = {"model": model.to_dict(), "queries": queries.fingerprint(), "exclude_self": exclude_self}

    for name, ref, modality in (
        ("other", other, other_modality(queries.modality)),
        ("same", same, queries.modality),
    ):
        if ref is None:
            continue
        validate_matrix(ref, MatrixSpec(modality=modality, require_normalized=True))
        params[name] = {"fingerprint": ref.fingerprint(), "n": ref.n}

    if kind in ("d_c", "d_w") and exclude_self and same is not None:
        raise ContractError("exclude_self applies only when the queries are the reference set")

    values = evaluate_rows(
        kind,
        queries.rows,
        model.logit_scale,
        other_rows=None if other is None else other.rows,
        same_rows=None if same is None else same.rows,
        exclude_self=exclude_self,
        chunk_size=chunk_size,
        threads=threads,
    )
    logger.info("Computed %s for %d %s queries", kind, queries.n, queries.modality)
    return MetricVector(queries.ids, values, kind, queries.modality, params)


def metric_correlations(metrics: Sequence[MetricVector]) -> pd.DataFrame:
    """
    Pearson coefficients between metrics sharing one id ordering.

    Entries involving a zero-variance metric are <NA> (nullable Float64), the
    diagonal is 1.
    """
    if not metrics:
        raise ContractError("Need at least one metric to correlate")
    ids = metrics[0].ids
    for m in metrics[1:]:
        if m.ids != ids:
            raise ContractError(f"{m.label} does not share the id set and ordering of {metrics[0].label}")

    labels: list[str] = []
    for m in metrics:
        label = m.label
        k = 2
        while label in labels:
            label = f"{m.label}#{k}"
            k += 1
        labels.append(label)

    size = len(metrics)
    out = pd.DataFrame(pd.NA, index=labels, columns=labels, dtype="Float64")
    flat = [np.std(m.values) == 0 for m in metrics]
    for i in range(size):
        out.iat[i, i] = 1.0
        for j in range(i + 1, size):
            if flat[i] or flat[j]:
                continue
            r, _ = pearsonr(metrics[i].values, metrics[j].values)
            r = float(np.clip(r, -1.0, 1.0))
            out.iat[i, j] = r
            out.iat[j, i] = r

    undefined = [labels[k] for k in range(size) if flat[k]]
    if undefined:
        logger.warning("Zero-variance metrics have undefined correlations: %s", undefined)
    return out


def write_correlations_json(correlations: pd.DataFrame, path: Path) -> Path:
    matrix = [[None if pd.isna(v) else float(v) for v in row] for row in correlations.itertuples(index=False)]
    payload = {"labels": list(correlations.columns), "matrix": matrix}
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    return path
