"""
Similarity scores read as log density ratios.

A contrastive model scores a pair as s(t, i) = a<v_t, v_i> (+ b for the sigmoid
flavor). Up to a per-image constant that is log p(t|i)/p(t); by Bayes the same
number reads as log p(i|t)/p(i), so the text->image direction is the same
matrix transposed.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from src.embeddings.store import EmbeddingMatrix
from src.metrics.metric_vector import MetricVector
from src.validation.validate_embeddings import (
    ContractError,
    MatrixSpec,
    validate_matrix,
    validate_same_dim,
)

logger = logging.getLogger("densratio.ratio")

FLAVORS = ("softmax_contrastive", "sigmoid_contrastive")
CALIBRATIONS = ("empirical_Z", "nu_eb", "none")
IWL_DEFAULT_SCALE = 10.0


@dataclass(frozen=True)
class ScoreModel:
    logit_scale: float
    logit_bias: float = 0.0
    flavor: str = "softmax_contrastive"
    nu: int = 1

    def __post_init__(self):
        if not self.logit_scale > 0:
            raise ContractError(f"logit_scale must be positive, got {self.logit_scale}")
        if self.flavor not in FLAVORS:
            raise ContractError(f"Unknown flavor {self.flavor!r}; expected one of {FLAVORS}")
        if int(self.nu) != self.nu or self.nu < 1:
            raise ContractError(f"nu must be a positive integer, got {self.nu}")

    @property
    def effective_bias(self) -> float:
        # softmax scoring ignores the bias
        return self.logit_bias if self.flavor == "sigmoid_contrastive" else 0.0

    @property
    def default_calibration(self) -> str:
        return "empirical_Z" if self.flavor == "softmax_contrastive" else "nu_eb"

    def to_dict(self) -> dict:
        return asdict(self)


def _as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"Expected a vector, got shape {arr.shape}")
    return arr


def score(v_t, v_i, model: ScoreModel) -> float:
    v_t, v_i = _as_vector(v_t), _as_vector(v_i)
    validate_same_dim(v_t.shape[0], v_i.shape[0])
    return float(model.logit_scale * np.dot(v_t, v_i) + model.effective_bias)


def score_block(text_rows: np.ndarray, image_rows: np.ndarray, model: ScoreModel) -> np.ndarray:
    """Scores for every (text, image) row pair, texts on axis 0."""
    validate_same_dim(text_rows.shape[1], image_rows.shape[1])
    return model.logit_scale * (text_rows @ image_rows.T) + model.effective_bias


def scores(texts: EmbeddingMatrix, images: EmbeddingMatrix, model: ScoreModel) -> np.ndarray:
    return score_block(texts.rows, images.rows, model)


def _weight_column(weights, ndim: int, axis: int, n: int) -> np.ndarray:
    """Weights normalized to sum 1, shaped to broadcast along `axis`."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or (w < 0).any() or w.sum() <= 0:
        raise ContractError("weights must be nonnegative, one per element, with positive sum")
    shape = [1] * ndim
    shape[axis] = n
    return (w / w.sum()).reshape(shape)


def _shifted_log_mean_exp(values: np.ndarray, axis: int = 0, weights: np.ndarray | None = None):
    """Return (values - max, log mean exp(values - max)) along `axis`."""
    n = values.shape[axis]
    if n == 0:
        raise ContractError("Normalizer undefined over an empty set")

    shifted = values - values.max(axis=axis, keepdims=True)
    terms = np.exp(shifted)
    if weights is None:
        return shifted, np.log(terms.mean(axis=axis, keepdims=True))

    mean = (terms * _weight_column(weights, values.ndim, axis, n)).sum(axis=axis, keepdims=True)
    return shifted, np.log(mean)


def log_mean_exp(values: np.ndarray, axis: int = 0, weights: np.ndarray | None = None) -> np.ndarray:
    """log of the (optionally weighted) mean of exp(values)."""
    n = values.shape[axis]
    if n == 0:
        raise ContractError("Normalizer undefined over an empty set")
    if weights is None:
        return logsumexp(values, axis=axis) - np.log(n)
    b = np.broadcast_to(_weight_column(weights, values.ndim, axis, n), values.shape)
    return logsumexp(values, axis=axis, b=b)


def calibrated_log_ratios(
    text_rows: np.ndarray,
    image_rows: np.ndarray,
    model: ScoreModel,
    calibration: str | None = None,
    text_weights: np.ndarray | None = None,
) -> np.ndarray:
    """log p(t|i)/p(t) for every (text, image) row pair."""
    calibration = calibration or model.default_calibration
    if calibration not in CALIBRATIONS:
        raise ContractError(f"Unknown calibration {calibration!r}; expected one of {CALIBRATIONS}")

    s = score_block(text_rows, image_rows, model)
    if calibration == "empirical_Z":
        # per-image Z over the text set; fixed reduction order along axis 0
        shifted, log_mean = _shifted_log_mean_exp(s, axis=0, weights=text_weights)
        return shifted - log_mean
    if calibration == "nu_eb":
        return s + np.log(model.nu)
    return s


def ratio_matrix(
    texts: EmbeddingMatrix,
    images: EmbeddingMatrix,
    model: ScoreModel,
    calibration: str | None = None,
    text_weights: np.ndarray | None = None,
) -> np.ndarray:
    """
    Entry (t, i) estimates p_T(t|i)/p_T(t), equivalently p_I(i|t)/p_I(i).

    calibration:
        empirical_Z: divide e^score by the per-image mean of e^score over `texts`
            (optionally weighted, for a text set given as a label prior).
        nu_eb: multiply e^(score + b) by nu.
        none: e^score as is.
    """
    spec = MatrixSpec(require_normalized=True)
    validate_matrix(texts, spec)
    validate_matrix(images, spec)
    validate_same_dim(texts.d, images.d)
    return np.exp(calibrated_log_ratios(texts.rows, images.rows, model, calibration, text_weights))


def iwl_weight(u_image, u_prompt, a: float = IWL_DEFAULT_SCALE) -> float:
    """Unnormalized importance weight exp(a<u_image, u_prompt>) for p_test/p_train."""
    if not a > 0:
        raise ContractError(f"Scale must be positive, got {a}")
    u_image, u_prompt = _as_vector(u_image), _as_vector(u_prompt)
    validate_same_dim(u_image.shape[0], u_prompt.shape[0])
    return float(np.exp(a * np.dot(u_image, u_prompt)))


def iwl_weight_array(image_rows: np.ndarray, u_prompt: np.ndarray, a: float = IWL_DEFAULT_SCALE) -> np.ndarray:
    if not a > 0:
        raise ContractError(f"Scale must be positive, got {a}")
    validate_same_dim(image_rows.shape[1], u_prompt.shape[0])
    return np.exp(a * (image_rows @ u_prompt))


def iwl_weights(images: EmbeddingMatrix, u_prompt, a: float = IWL_DEFAULT_SCALE) -> MetricVector:
    validate_matrix(images, MatrixSpec(require_normalized=True))
    values = iwl_weight_array(images.rows, _as_vector(u_prompt), a)
    return MetricVector(images.ids, values, "iwl_weight", images.modality, {"a": a})


def write_ratio_csv(
    path: Path,
    text_ids,
    image_ids,
    ratios: np.ndarray,
    model: ScoreModel,
    calibration: str,
) -> Path:
    """Long-form (text_id, image_id, value) CSV with a JSON parameter header line."""
    header = {**model.to_dict(), "calibration": calibration}
    tt, ii = np.meshgrid(np.arange(len(text_ids)), np.arange(len(image_ids)), indexing="ij")
    df = pd.DataFrame(
        {
            "text_id": np.asarray(text_ids, dtype=object)[tt.ravel()],
            "image_id": np.asarray(image_ids, dtype=object)[ii.ravel()],
            "value": ratios.ravel(),
        }
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        f.write("# " + json.dumps(header, sort_keys=True) + "\n")
        df.to_csv(f, index=False, float_format="%.17g")
    logger.info("Wrote %d ratios to %s", len(df), path)
    return path
