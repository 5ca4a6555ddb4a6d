"""
Three-layer tanh MLP encoders with a unit-normalized output, plus their
hand-written backward pass.

Images enter as d-vectors; labels enter one-hot through the same architecture.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from src.ratio.ratio_core import FLAVORS, ScoreModel
from src.validation.validate_embeddings import ContractError

N_LAYERS = 3
TOWERS = ("image", "text")


@dataclass
class EncoderParams:
    """Named float64 tensors for both towers plus log a and b."""

    tensors: dict[str, np.ndarray]
    flavor: str = "softmax_contrastive"
    embed_dim: int = 16
    hidden: int = 64
    nu: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ContractError(f"Unknown flavor {self.flavor!r}")
        for name, value in self.tensors.items():
            if not np.isfinite(value).all():
                raise ContractError(f"Parameter {name} holds non-finite values")

    @property
    def logit_scale(self) -> float:
        return float(np.exp(self.tensors["log_scale"][0]))

    @property
    def logit_bias(self) -> float:
        return float(self.tensors["bias"][0])

    def trainable(self) -> list[str]:
        # softmax scoring ignores the bias, so it is never updated
        names = sorted(self.tensors)
        if self.flavor == "softmax_contrastive":
            names.remove("bias")
        return names

    def score_model(self) -> ScoreModel:
        return ScoreModel(self.logit_scale, self.logit_bias, self.flavor, self.nu)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            {k: v.copy() for k, v in self.tensors.items()},
            self.flavor,
            self.embed_dim,
            self.hidden,
            self.nu,
            dict(self.meta),
        )


def _tower_shapes(in_dim: int, hidden: int, embed_dim: int) -> list[tuple[int, int]]:
    return [(in_dim, hidden), (hidden, hidden), (hidden, embed_dim)]


def init_params(
    image_dim: int,
    n_labels: int,
    rng: np.random.Generator,
    flavor: str = "softmax_contrastive",
    hidden: int = 64,
    embed_dim: int = 16,
    init_scale: float = 10.0,
    batch_size: int = 2,
) -> EncoderParams:
    """Weights ~ N(0, 1/fan_in), zero biases, a = init_scale, b = -log(batch_size - 1)."""
    tensors: dict[str, np.ndarray] = {}
    for tower, in_dim in (("image", image_dim), ("text", n_labels)):
        for layer, (fan_in, fan_out) in enumerate(_tower_shapes(in_dim, hidden, embed_dim)):
            tensors[f"{tower}.W{layer}"] = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            tensors[f"{tower}.b{layer}"] = np.zeros(fan_out)

    nu = max(batch_size - 1, 1)
    tensors["log_scale"] = np.array([np.log(init_scale)])
    tensors["bias"] = np.array([-np.log(nu) if flavor == "sigmoid_contrastive" else 0.0])
    return EncoderParams(tensors, flavor, embed_dim, hidden, nu)


def one_hot(labels: np.ndarray, n_labels: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_labels):
        raise ContractError(f"labels must lie in 0..{n_labels - 1}")
    out = np.zeros((labels.shape[0], n_labels))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def tower_forward(params: EncoderParams, tower: str, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Unit embeddings for the rows of x, and the activations needed for backward."""
    t = params.tensors
    cache = {"inputs": [x]}
    h = x
    for layer in range(N_LAYERS):
        z = h @ t[f"{tower}.W{layer}"] + t[f"{tower}.b{layer}"]
        if layer < N_LAYERS - 1:
            h = np.tanh(z)
            cache["inputs"].append(h)
        else:
            h = z
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    u = h / norms
    cache["u"] = u
    cache["norms"] = norms
    return u, cache


def tower_backward(params: EncoderParams, tower: str, cache: dict, g_u: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients of one tower given dL/du for its unit outputs."""
    t = params.tensors
    u = cache["u"]
    g = (g_u - u * np.einsum("ij,ij->i", u, g_u)[:, None]) / cache["norms"]

    grads: dict[str, np.ndarray] = {}
    for layer in reversed(range(N_LAYERS)):
        h_in = cache["inputs"][layer]
        grads[f"{tower}.W{layer}"] = h_in.T @ g
        grads[f"{tower}.b{layer}"] = g.sum(axis=0)
        if layer > 0:
            # h_in = tanh(previous pre-activation)
            g = (g @ t[f"{tower}.W{layer}"].T) * (1.0 - h_in**2)
    return grads


def encode_images(params: EncoderParams, images: np.ndarray) -> np.ndarray:
    u, _ = tower_forward(params, "image", np.atleast_2d(np.asarray(images, dtype=np.float64)))
    return u


def encode_texts(params: EncoderParams, labels: np.ndarray) -> np.ndarray:
    n_labels = params.tensors["text.W0"].shape[0]
    u, _ = tower_forward(params, "text", one_hot(labels, n_labels))
    return u
