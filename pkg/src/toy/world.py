"""
Ground-truth world: categorical labels and a Gaussian mixture of images.

Label j is drawn with probability pi_j and its image from N(mu_j, var * I), so
the exact density ratio p(i|t_j)/p(i) is available in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Any

import numpy as np
from scipy.special import logsumexp, softmax

from src.validation.validate_embeddings import ContractError

PRIOR_TOL = 1e-12
DEFAULT_VAR = 4.0
DEFAULT_MEAN_SCALE = 4.0


@dataclass(frozen=True)
class MixtureWorld:
    means: np.ndarray
    var: float = DEFAULT_VAR
    priors: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 1 or means.shape[1] < 1:
            raise ContractError(f"means must be a K x d array, got shape {means.shape}")
        if not self.var > 0:
            raise ContractError(f"var must be positive, got {self.var}")

        k = means.shape[0]
        priors = np.full(k, 1.0 / k) if self.priors is None else np.array(self.priors, dtype=np.float64)
        if priors.shape != (k,):
            raise ContractError(f"Expected {k} priors, got shape {priors.shape}")
        if (priors < 0).any() or abs(priors.sum() - 1.0) > PRIOR_TOL:
            raise ContractError("priors must be nonnegative and sum to 1")
        if len(np.unique(means, axis=0)) != k:
            raise ContractError("Component means must be pairwise distinct")

        means.setflags(write=False)
        priors.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "priors", priors)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def log_priors(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.priors)

    def to_dict(self) -> dict[str, Any]:
        return {
            "K": self.K,
            "d": self.d,
            "means": self.means.tolist(),
            "var": float(self.var),
            "priors": self.priors.tolist(),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "MixtureWorld":
        """Accepts either explicit `means` or (K, d, mean_scale) for make_world."""
        known = {f.name for f in fields(cls)} | {"K", "d", "mean_scale"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ContractError(f"Unknown world keys: {unknown}")

        if "means" in doc:
            world = cls(
                means=np.asarray(doc["means"], dtype=np.float64),
                var=float(doc.get("var", DEFAULT_VAR)),
                priors=doc.get("priors"),
                seed=int(doc.get("seed", 0)),
            )
            for key in ("K", "d"):
                if key in doc and doc[key] != getattr(world, key):
                    raise ContractError(f"{key}={doc[key]} disagrees with the given means")
            return world

        if "K" not in doc or "d" not in doc:
            raise ContractError("A world needs either means or both K and d")
        return make_world(
            K=int(doc["K"]),
            d=int(doc["d"]),
            seed=int(doc.get("seed", 0)),
            mean_scale=float(doc.get("mean_scale", DEFAULT_MEAN_SCALE)),
            var=float(doc.get("var", DEFAULT_VAR)),
            priors=doc.get("priors"),
        )


def make_world(
    K: int,
    d: int,
    seed: int = 0,
    mean_scale: float = DEFAULT_MEAN_SCALE,
    var: float = DEFAULT_VAR,
    priors=None,
) -> MixtureWorld:
    """Means drawn i.i.d. from N(0, mean_scale^2 I)."""
    if K < 1 or d < 1:
        raise ContractError(f"K and d must be positive, got K={K}, d={d}")
    rng = np.random.default_rng(seed)
    means = mean_scale * rng.standard_normal((K, d))
    return MixtureWorld(means=means, var=var, priors=priors, seed=seed)


def sample_pairs(world: MixtureWorld, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """
    Draw n (label, image) pairs. `seed` may be an int or a numpy Generator,
    in which case the caller's stream advances.
    """
    if n < 1:
        raise ContractError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.choice(world.K, size=n, p=world.priors)
    images = world.means[labels] + np.sqrt(world.var) * rng.standard_normal((n, world.d))
    return labels, images


def sample_component(world: MixtureWorld, label: int, n: int, seed) -> np.ndarray:
    _check_label(world, label)
    rng = np.random.default_rng(seed)
    return world.means[label] + np.sqrt(world.var) * rng.standard_normal((n, world.d))


def _check_label(world: MixtureWorld, label: int) -> None:
    if not 0 <= label < world.K:
        raise ContractError(f"label {label} outside 0..{world.K - 1}")


def _log_components(world: MixtureWorld, images: np.ndarray) -> np.ndarray:
    # the Gaussian normalizer is shared by every component and cancels in all ratios
    sq = (
        np.einsum("ij,ij->i", images, images)[:, None]
        - 2.0 * images @ world.means.T
        + np.einsum("kj,kj->k", world.means, world.means)[None, :]
    )
    return -sq / (2.0 * world.var)


def log_true_ratio_matrix(world: MixtureWorld, images: np.ndarray) -> np.ndarray:
    """n x K matrix of log p(i|t_j)/p(i)."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    log_c = _log_components(world, images)
    return log_c - logsumexp(log_c + world.log_priors, axis=1, keepdims=True)


def true_ratio(world: MixtureWorld, image, label: int) -> float:
    _check_label(world, label)
    return float(np.exp(log_true_ratio_matrix(world, image)[0, label]))


def true_posterior(world: MixtureWorld, images: np.ndarray) -> np.ndarray:
    """n x K matrix of p(t_j|i)."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    return softmax(_log_components(world, images) + world.log_priors, axis=1)
