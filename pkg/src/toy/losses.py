"""
Softmax (CLIP) and sigmoid (SigLIP) contrastive objectives with analytic
gradients, optionally importance-weighted per pair.

Row j of a batch is the pair (image j, text j); S[j, k] scores image j
against text k.
"""
from __future__ import annotations

import logging

import numpy as np
from scipy.special import expit, log_softmax

from src.toy.encoders import EncoderParams, one_hot, tower_backward, tower_forward
from src.validation.validate_embeddings import ContractError

logger = logging.getLogger("densratio.toy.losses")

GRADIENT_TOL = 1e-4
FD_EPS = 1e-6


def _pair_weights(weights: np.ndarray | None, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or (w < 0).any() or not np.isfinite(w).all():
        raise ContractError("weights must be finite, nonnegative, one per pair")
    return w


def softmax_contrastive_loss(
    u_img: np.ndarray, u_txt: np.ndarray, log_scale: float, weights: np.ndarray | None = None
) -> tuple[float, dict[str, np.ndarray]]:
    """
    L = (1/N) sum_j w_j (l_i2t(j) + l_t2i(j)), each term a cross-entropy over the batch.

    Returns the loss and gradients with respect to u_img, u_txt and log a.
    """
    n = u_img.shape[0]
    w = _pair_weights(weights, n)
    a = np.exp(log_scale)
    s = a * (u_img @ u_txt.T)

    log_p_row = log_softmax(s, axis=1)
    log_p_col = log_softmax(s, axis=0)
    diag = np.arange(n)
    loss = float(-(w * (log_p_row[diag, diag] + log_p_col[diag, diag])).sum() / n)

    g = (w[:, None] * np.exp(log_p_row) + w[None, :] * np.exp(log_p_col)) / n
    g[diag, diag] -= 2.0 * w / n
    grads = {
        "img": a * g @ u_txt,
        "txt": a * g.T @ u_img,
        "log_scale": np.array([(g * s).sum()]),
    }
    return loss, grads


def sigmoid_contrastive_loss(
    u_img: np.ndarray, u_txt: np.ndarray, log_scale: float, bias: float, weights: np.ndarray | None = None
) -> tuple[float, dict[str, np.ndarray]]:
    """L = -(1/N) sum_j w_j sum_k log sigmoid(y_jk S_jk), y = +1 on the diagonal, -1 elsewhere."""
    n = u_img.shape[0]
    w = _pair_weights(weights, n)
    a = np.exp(log_scale)
    cos = u_img @ u_txt.T
    s = a * cos + bias
    y = 2.0 * np.eye(n) - 1.0

    # log sigmoid(x) = -log(1 + e^-x)
    loss = float((w[:, None] * np.logaddexp(0.0, -y * s)).sum() / n)

    g = -(w[:, None] * y * expit(-y * s)) / n
    grads = {
        "img": a * g @ u_txt,
        "txt": a * g.T @ u_img,
        "log_scale": np.array([(g * a * cos).sum()]),
        "bias": np.array([g.sum()]),
    }
    return loss, grads


def loss_and_grads(
    params: EncoderParams,
    images: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch loss and the gradient for every trainable tensor of `params`."""
    if images.shape[0] < 2:
        raise ContractError("A contrastive batch needs at least 2 pairs")
    n_labels = params.tensors["text.W0"].shape[0]
    u_img, img_cache = tower_forward(params, "image", images)
    u_txt, txt_cache = tower_forward(params, "text", one_hot(labels, n_labels))
    log_scale = float(params.tensors["log_scale"][0])

    if params.flavor == "softmax_contrastive":
        loss, g = softmax_contrastive_loss(u_img, u_txt, log_scale, weights)
    else:
        loss, g = sigmoid_contrastive_loss(u_img, u_txt, log_scale, params.logit_bias, weights)

    grads = tower_backward(params, "image", img_cache, g["img"])
    grads.update(tower_backward(params, "text", txt_cache, g["txt"]))
    grads["log_scale"] = g["log_scale"]
    if "bias" in g:
        grads["bias"] = g["bias"]
    return loss, grads


def check_gradients(
    params: EncoderParams,
    images: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
    eps: float = FD_EPS,
) -> dict[str, float]:
    """
    Relative error between the analytic gradient and central finite differences,
    per trainable tensor: ||g - g_fd|| / max(||g|| + ||g_fd||, 1e-8).
    """
    _, analytic = loss_and_grads(params, images, labels, weights)
    probe = params.copy()

    errors: dict[str, float] = {}
    for name in params.trainable():
        tensor = probe.tensors[name]
        numeric = np.zeros_like(tensor)
        flat, num_flat = tensor.reshape(-1), numeric.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + eps
            plus, _ = loss_and_grads(probe, images, labels, weights)
            flat[k] = original - eps
            minus, _ = loss_and_grads(probe, images, labels, weights)
            flat[k] = original
            num_flat[k] = (plus - minus) / (2.0 * eps)

        diff = np.linalg.norm(analytic[name] - numeric)
        denom = max(np.linalg.norm(analytic[name]) + np.linalg.norm(numeric), 1e-8)
        errors[name] = float(diff / denom)

    worst = max(errors, key=errors.get)
    logger.info("Worst gradient mismatch: %s (%.2e)", worst, errors[worst])
    return errors
