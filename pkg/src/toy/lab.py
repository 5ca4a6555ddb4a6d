"""
Experiments on the toy world: ratio-recovery accuracy against the analytic
oracle, 2-D evaluation grids, and importance-weighted training toward a prompt.
"""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Any

import numpy as np
import pandas as pd
from scipy.special import log_softmax
from scipy.stats import pearsonr

from src.ratio.ratio_core import calibrated_log_ratios, iwl_weight_array
from src.toy.encoders import EncoderParams, encode_images, encode_texts
from src.toy.trainer import TrainConfig, train
from src.toy.world import (
    MixtureWorld,
    log_true_ratio_matrix,
    sample_component,
    sample_pairs,
    true_posterior,
)
from src.validation.validate_embeddings import ContractError

logger = logging.getLogger("densratio.toy.lab")


def predicted_log_ratios(
    params: EncoderParams,
    world: MixtureWorld,
    images: np.ndarray,
    calibration: str | None = None,
    label_weights: np.ndarray | None = None,
) -> np.ndarray:
    """n x K predicted log p(i|t_j)/p(i); empirical_Z averages over labels with `label_weights`."""
    u_img = encode_images(params, images)
    u_txt = encode_texts(params, np.arange(world.K))
    weights = world.priors if label_weights is None else label_weights
    log_r = calibrated_log_ratios(u_txt, u_img, params.score_model(), calibration, text_weights=weights)
    return log_r.T


def evaluate(
    world: MixtureWorld,
    params: EncoderParams,
    n_test: int,
    seed: int,
    calibration: str | None = None,
) -> dict[str, Any]:
    """R^2, MSE and Pearson between predicted and true ratios over every (test image, label) pair."""
    calibration = calibration or params.score_model().default_calibration
    labels, images = sample_pairs(world, n_test, seed)
    freqs = np.bincount(labels, minlength=world.K) / n_test

    truth = np.exp(log_true_ratio_matrix(world, images)).ravel()
    pred = np.exp(predicted_log_ratios(params, world, images, calibration, freqs)).ravel()

    resid = pred - truth
    mse = float(np.mean(resid**2))
    sst = float(np.sum((truth - truth.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / sst if sst > 0 else float("nan")
    pearson = float(pearsonr(pred, truth)[0]) if np.std(pred) > 0 and sst > 0 else float("nan")

    result = {
        "flavor": params.flavor,
        "calibration": calibration,
        "n_test": n_test,
        "r2": r2,
        "mse": mse,
        "pearson": pearson,
    }
    logger.info("R2=%.4f MSE=%.4g Pearson=%.4f (%s, %s)", r2, mse, pearson, params.flavor, calibration)
    return result


def evaluation_grid(
    world: MixtureWorld,
    params: EncoderParams,
    lo: float = -10.0,
    hi: float = 10.0,
    points: int = 41,
    calibration: str | None = None,
) -> pd.DataFrame:
    """True and predicted ratios on a square grid, one row per (label, point). 2-D worlds only."""
    if world.d != 2:
        raise ContractError(f"Evaluation grids need d=2, got d={world.d}")
    if points < 2 or not hi > lo:
        raise ContractError("Grid needs at least 2 points per axis and hi > lo")

    axis = np.linspace(lo, hi, points)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    grid = np.column_stack([xx.ravel(), yy.ravel()])
    truth = np.exp(log_true_ratio_matrix(world, grid))
    pred = np.exp(predicted_log_ratios(params, world, grid, calibration))

    frames = [
        pd.DataFrame(
            {
                "label": k,
                "x": grid[:, 0],
                "y": grid[:, 1],
                "true_ratio": truth[:, k],
                "predicted_ratio": pred[:, k],
            }
        )
        for k in range(world.K)
    ]
    return pd.concat(frames, ignore_index=True)


def prompt_weight_fn(reference: EncoderParams, prompt_label: int, a: float, normalize: bool):
    """Per-pair weights exp(a<u_image, u_prompt>) from a frozen encoder, optionally mean-normalized per batch."""
    u_prompt = encode_texts(reference, np.array([prompt_label]))[0]

    def weights(images: np.ndarray, labels: np.ndarray) -> np.ndarray:
        w = iwl_weight_array(encode_images(reference, images), u_prompt, a)
        return w / w.mean() if normalize else w

    return weights


def prompt_test_loss(world: MixtureWorld, params: EncoderParams, prompt_label: int, n_test: int, seed: int) -> float:
    """
    Expected cross-entropy of the model posterior against p(t|i) on images from
    the prompt's component.
    """
    images = sample_component(world, prompt_label, n_test, seed)
    u_img = encode_images(params, images)
    u_txt = encode_texts(params, np.arange(world.K))
    # posterior under the model: softmax over labels of score + log prior
    log_q = log_softmax(params.logit_scale * (u_img @ u_txt.T) + world.log_priors, axis=1)
    p = true_posterior(world, images)
    return float(-(p * np.where(p > 0, log_q, 0.0)).sum(axis=1).mean())


def iwl_demo(
    world: MixtureWorld,
    prompt_label: int,
    config: TrainConfig,
    trials: int = 1,
    a: float | None = None,
    normalize_weights: bool = True,
    n_test: int = 5000,
    reference_config: TrainConfig | None = None,
) -> dict[str, Any]:
    """
    Compare weighted and unweighted training on the prompt component.

    A reference encoder is trained once with reference_config (the full default
    recipe when omitted) and frozen; its image/prompt similarity gives the
    weights. With a=None the weights use the reference's own learned logit
    scale, so exp(a * cos) tracks the reference's ratio estimate. Trial t trains
    both runs with seed config.seed + t, so they share initialisation and
    batches. Weighting only pays off when config cannot fit every component
    at once; a recipe that reaches the Bayes floor everywhere ties by chance.
    """
    if not 0 <= prompt_label < world.K:
        raise ContractError(f"prompt_label {prompt_label} outside 0..{world.K - 1}")
    if trials < 1:
        raise ContractError(f"trials must be positive, got {trials}")

    if reference_config is None:
        reference_config = TrainConfig(objective=config.objective, seed=config.seed + 10_000)
    reference = train(world, reference_config).params
    scale = float(reference.logit_scale) if a is None else float(a)
    if not scale > 0:
        raise ContractError(f"weight scale must be positive, got {scale}")
    weight_fn = prompt_weight_fn(reference, prompt_label, scale, normalize_weights)

    # weights by true label on one held-out sample
    labels, images = sample_pairs(world, n_test, config.seed + 20_000)
    raw = iwl_weight_array(encode_images(reference, images), encode_texts(reference, np.array([prompt_label]))[0], scale)
    on_prompt = labels == prompt_label
    weight_on = float(raw[on_prompt].mean()) if on_prompt.any() else float("nan")
    weight_off = float(raw[~on_prompt].mean()) if (~on_prompt).any() else float("nan")

    records = []
    for t in range(trials):
        trial_config = replace(config, seed=config.seed + t)
        weighted = train(world, trial_config, weight_fn).params
        baseline = train(world, trial_config).params
        test_seed = config.seed + 30_000 + t
        records.append(
            {
                "trial": t,
                "seed": trial_config.seed,
                "weighted_loss": prompt_test_loss(world, weighted, prompt_label, n_test, test_seed),
                "baseline_loss": prompt_test_loss(world, baseline, prompt_label, n_test, test_seed),
            }
        )

    wins = sum(r["weighted_loss"] <= r["baseline_loss"] for r in records)
    logger.info("Weighted run matched or beat the baseline in %d of %d trials (a=%.2f)", wins, trials, scale)
    return {
        "prompt_label": prompt_label,
        "a": scale,
        "normalize_weights": normalize_weights,
        "reference": reference_config.to_dict(),
        "trials": records,
        "wins": wins,
        "weighted_loss_mean": float(np.mean([r["weighted_loss"] for r in records])),
        "baseline_loss_mean": float(np.mean([r["baseline_loss"] for r in records])),
        "weight_on_prompt_mean": weight_on,
        "weight_off_prompt_mean": weight_off,
    }
