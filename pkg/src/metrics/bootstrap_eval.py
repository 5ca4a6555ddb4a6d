"""
Bootstrap estimates of the finite-sample error of the divergence metrics.

Each query's metric is recomputed on B resamples (with replacement) of the
reference set. Per query:

    bias     = mean_b D(i; b) - D(i)
    variance = mean_b (D(i; b) - mean_b D(i; b))^2
    rmse     = sqrt(variance + bias^2)

and the normalized columns divide by the spread of D(i) across queries.
"""
from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from src.embeddings.store import EmbeddingMatrix
from src.metrics.kl_metrics import DEFAULT_CHUNK, DIVERGENCE_KINDS, evaluate_rows, other_modality
from src.ratio.ratio_core import ScoreModel
from src.validation.validate_embeddings import (
    ContractError,
    MatrixSpec,
    validate_matrix,
    validate_same_dim,
)

logger = logging.getLogger("densratio.bootstrap")

GENERATOR_FAMILY = "PCG64"
IDENTITY_RTOL = 1e-9
REPORT_COLUMNS = ("id", "bias", "variance", "rmse", "bias_over_scale", "var_over_scale2", "rmse_over_scale")


@dataclass(frozen=True)
class BootstrapReport:
    ids: tuple[str, ...]
    full: np.ndarray
    bias: np.ndarray
    variance: np.ndarray
    rmse: np.ndarray
    scale: float
    B: int
    n: int
    seed: int
    metric: str
    modality: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if (self.variance < 0).any():
            raise ContractError("Bootstrap variance must be nonnegative")
        lhs = self.rmse**2
        rhs = self.variance + self.bias**2
        if not np.allclose(lhs, rhs, rtol=IDENTITY_RTOL, atol=0.0):
            raise ContractError("rmse^2 != variance + bias^2")

    def _normalized(self, power: int) -> float:
        if self.scale == 0:
            return np.nan
        return self.scale**power

    def to_frame(self) -> pd.DataFrame:
        s1, s2 = self._normalized(1), self._normalized(2)
        return pd.DataFrame(
            {
                "id": list(self.ids),
                "bias": self.bias,
                "variance": self.variance,
                "rmse": self.rmse,
                "bias_over_scale": self.bias / s1,
                "var_over_scale2": self.variance / s2,
                "rmse_over_scale": self.rmse / s1,
            },
            columns=list(REPORT_COLUMNS),
        )

    def header(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "modality": self.modality,
            "B": self.B,
            "n": self.n,
            "seed": self.seed,
            "scale": self.scale,
            "generator": GENERATOR_FAMILY,
            "params": self.params,
        }

    def write_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as f:
            f.write("# " + json.dumps(self.header(), sort_keys=True, default=str) + "\n")
            self.to_frame().to_csv(f, index=False, float_format="%.17g", na_rep="nan")
        logger.info("Wrote bootstrap report for %d queries to %s", len(self.ids), path)
        return path


def _generator(seed_seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_seq))


def _check_refs(kind: str, queries: EmbeddingMatrix, refs: EmbeddingMatrix, same: EmbeddingMatrix | None):
    if kind not in DIVERGENCE_KINDS:
        raise ContractError(f"Bootstrap supports {DIVERGENCE_KINDS}, got {kind!r}")
    validate_matrix(queries, MatrixSpec(require_normalized=True))
    # d_c resamples the query-modality reference set; the others resample the opposite one
    ref_modality = queries.modality if kind == "d_c" else other_modality(queries.modality)
    validate_matrix(refs, MatrixSpec(modality=ref_modality, require_normalized=True))
    validate_same_dim(queries.d, refs.d)
    if same is not None:
        validate_matrix(same, MatrixSpec(modality=queries.modality, require_normalized=True))
        validate_same_dim(queries.d, same.d)


def bootstrap(
    queries: EmbeddingMatrix,
    refs: EmbeddingMatrix,
    metric: str,
    model: ScoreModel,
    B: int,
    seed: int,
    same: EmbeddingMatrix | None = None,
    threads: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> BootstrapReport:
    """
    Bootstrap the per-query error of `metric` over resamples of `refs`.

    refs is the text set for image-query d_kl/d_klr/d_w and the image set for
    d_c. For d_w the mean comes from `same` (default: the queries). When `same`
    has as many rows as `refs` the two are treated as aligned pairs and resampled
    with one index stream; otherwise each gets its own draw.
    """
    _check_refs(metric, queries, refs, same)
    if B < 2:
        raise ContractError(f"B must be at least 2, got {B}")
    if seed < 0:
        raise ContractError(f"seed must be a nonnegative integer, got {seed}")

    if refs.n == 1:
        logger.warning("Reference set has a single row; every resample is identical")
    if metric == "d_w" and refs.n < refs.d:
        logger.warning("Only %d references for d=%d: the covariance is rank-deficient", refs.n, refs.d)

    a = model.logit_scale
    ref_rows = refs.rows
    same_rows = same.rows if same is not None else None
    joint = same is not None and same.n == refs.n

    def evaluate(r_rows: np.ndarray, s_rows: np.ndarray | None) -> np.ndarray:
        if metric == "d_c":
            return evaluate_rows("d_c", queries.rows, a, same_rows=r_rows, chunk_size=chunk_size)
        return evaluate_rows(metric, queries.rows, a, other_rows=r_rows, same_rows=s_rows, chunk_size=chunk_size)

    full = evaluate(ref_rows, same_rows)
    children = np.random.SeedSequence(seed).spawn(B)

    def one_resample(b: int) -> np.ndarray:
        rng = _generator(children[b])
        idx = rng.integers(0, refs.n, size=refs.n)
        s_rows = same_rows
        if same_rows is not None:
            s_idx = idx if joint else rng.integers(0, same_rows.shape[0], size=same_rows.shape[0])
            s_rows = same_rows[s_idx]
        return evaluate(ref_rows[idx], s_rows)

    if threads <= 1:
        draws = [one_resample(b) for b in range(B)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            draws = list(pool.map(one_resample, range(B)))
    stack = np.vstack(draws)

    centre = stack.mean(axis=0)
    bias = centre - full
    variance = ((stack - centre) ** 2).mean(axis=0)
    rmse = np.sqrt(variance + bias**2)

    scale = float(np.std(full))
    if scale == 0:
        logger.warning("%s is constant across queries; normalized columns are undefined", metric)

    params = {
        "model": model.to_dict(),
        "refs": refs.fingerprint(),
        "queries": queries.fingerprint(),
        "resampling": "joint" if joint else "independent",
    }
    logger.info("Bootstrapped %s over %d resamples of %d references", metric, B, refs.n)
    return BootstrapReport(
        ids=queries.ids,
        full=full,
        bias=bias,
        variance=variance,
        rmse=rmse,
        scale=scale,
        B=B,
        n=refs.n,
        seed=seed,
        metric=metric,
        modality=queries.modality,
        params=params,
    )


def _take(m: EmbeddingMatrix, rows: np.ndarray) -> EmbeddingMatrix:
    return EmbeddingMatrix(tuple(m.ids[k] for k in rows), m.rows[rows], m.modality, m.normalized)


def sample_size_sweep(
    queries: EmbeddingMatrix,
    refs: EmbeddingMatrix,
    metric: str,
    model: ScoreModel,
    sizes: Sequence[int],
    repeats: int,
    seed: int,
    B: int = 100,
    same: EmbeddingMatrix | None = None,
    threads: int = 1,
) -> pd.DataFrame:
    """
    For each size n: draw `repeats` subsets of n references (without
    replacement), bootstrap inside each, and summarize rmse/scale over all
    queries and repeats as median and quartiles.

    Repeat r bootstraps with seed + r, so a size equal to refs.n with one repeat
    reproduces bootstrap(..., seed) on the full set.
    """
    if not sizes:
        raise ContractError("sizes must not be empty")
    if repeats < 1:
        raise ContractError(f"repeats must be positive, got {repeats}")
    too_big = [s for s in sizes if s > refs.n or s < 1]
    if too_big:
        raise ContractError(f"Sizes {too_big} are outside 1..{refs.n}")
    joint = same is not None and same.n == refs.n

    records = []
    for k, size in enumerate(sizes):
        pooled = []
        for r in range(repeats):
            if size == refs.n:
                sub_refs, sub_same = refs, same
            else:
                rng = _generator(np.random.SeedSequence(seed, spawn_key=(k, r)))
                rows = np.sort(rng.choice(refs.n, size=size, replace=False))
                sub_refs = _take(refs, rows)
                sub_same = _take(same, rows) if joint else same
            report = bootstrap(queries, sub_refs, metric, model, B, seed + r, same=sub_same, threads=threads)
            pooled.append(report.to_frame()["rmse_over_scale"].to_numpy())

        values = np.concatenate(pooled)
        if np.isnan(values).all():
            logger.warning("Every repeat at n=%d had zero scale", size)
            q1 = median = q3 = np.nan
        else:
            q1, median, q3 = np.nanpercentile(values, [25, 50, 75])
        records.append({"n": int(size), "median": median, "q1": q1, "q3": q3})
        logger.info("n=%d: median rmse/scale %.4g", size, median)

    return pd.DataFrame.from_records(records, columns=["n", "median", "q1", "q3"])


def write_sweep_csv(sweep: pd.DataFrame, path: Path, header: dict[str, Any] | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        if header is not None:
            f.write("# " + json.dumps(header, sort_keys=True, default=str) + "\n")
        sweep.to_csv(f, index=False, float_format="%.17g", na_rep="nan")
    return path
