from __future__ import annotations

import json
import logging
import struct
from collections.abc import Callable
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from src.toy.encoders import EncoderParams, init_params
from src.toy.losses import loss_and_grads
from src.toy.world import MixtureWorld, sample_pairs
from src.validation.validate_embeddings import ContractError, FormatError, TrainingDivergedError

logger = logging.getLogger("densratio.toy.trainer")

OBJECTIVE_ALIASES = {
    "clip": "softmax_contrastive",
    "siglip": "sigmoid_contrastive",
    "softmax_contrastive": "softmax_contrastive",
    "sigmoid_contrastive": "sigmoid_contrastive",
}
ENC1_MAGIC = b"ENC1"
ENC1_HEADER_LEN = struct.Struct("<Q")
LOG_EVERY = 500

WeightFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "softmax_contrastive"
    batch_size: int = 128
    steps: int = 3000
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 64
    embed_dim: int = 16
    init_scale: float = 10.0
    max_scale: float = 100.0
    seed: int = 0
    eval_grid: dict[str, Any] | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVE_ALIASES:
            raise ContractError(f"Unknown objective {self.objective!r}; expected one of {sorted(OBJECTIVE_ALIASES)}")
        object.__setattr__(self, "objective", OBJECTIVE_ALIASES[self.objective])
        if self.batch_size < 2:
            raise ContractError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.steps < 1:
            raise ContractError(f"steps must be positive, got {self.steps}")
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.init_scale <= self.max_scale:
            raise ContractError("init_scale must lie in (0, max_scale]")

    @property
    def nu(self) -> int:
        return self.batch_size - 1

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ContractError(f"Unknown train config keys: {unknown}")
        return cls(**doc)


class Adam:
    """Adam over a dict of named tensors, updated in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], names: list[str]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in names:
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: EncoderParams
    losses: np.ndarray


def train(world: MixtureWorld, config: TrainConfig, weight_fn: WeightFn | None = None) -> TrainResult:
    """
    Minimize the configured contrastive loss over fresh seeded minibatches.

    weight_fn(images, labels) -> per-pair weights turns on the importance-weighted
    loss; None trains the plain objective.
    """
    rng = np.random.default_rng(config.seed)
    params = init_params(
        world.d,
        world.K,
        rng,
        flavor=config.objective,
        hidden=config.hidden,
        embed_dim=config.embed_dim,
        init_scale=config.init_scale,
        batch_size=config.batch_size,
    )
    params.meta = {"world": world.to_dict(), "config": config.to_dict()}
    names = params.trainable()
    optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    max_log_scale = np.log(config.max_scale)

    losses = np.empty(config.steps)
    for step in range(config.steps):
        labels, images = sample_pairs(world, config.batch_size, rng)
        weights = None if weight_fn is None else weight_fn(images, labels)
        loss, grads = loss_and_grads(params, images, labels, weights)
        if not np.isfinite(loss):
            logger.error("Loss became %s at step %d", loss, step)
            raise TrainingDivergedError(step, loss)

        optimizer.step(params.tensors, grads, names)
        np.minimum(params.tensors["log_scale"], max_log_scale, out=params.tensors["log_scale"])
        losses[step] = loss

        if (step + 1) % LOG_EVERY == 0:
            logger.info("step %d/%d loss=%.4f a=%.2f", step + 1, config.steps, loss, params.logit_scale)

    return TrainResult(params, losses)


# --- Parameter container ---


def save_params(params: EncoderParams, path: Path) -> Path:
    """
    ENC1 layout: magic, u64 header length, sorted-key JSON header, then every
    tensor as little-endian float64 in header order.
    """
    names = sorted(params.tensors)
    header = {
        "flavor": params.flavor,
        "embed_dim": params.embed_dim,
        "hidden": params.hidden,
        "nu": params.nu,
        "meta": params.meta,
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(ENC1_MAGIC)
        f.write(ENC1_HEADER_LEN.pack(len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params.tensors[n], dtype="<f8").tobytes())
    logger.info("Wrote encoder parameters to %s", path)
    return path


def load_params(path: Path) -> EncoderParams:
    if not path.exists():
        raise FileNotFoundError(f"Parameter file not found: {path}")
    data = path.read_bytes()
    if len(data) < 4 + ENC1_HEADER_LEN.size or data[:4] != ENC1_MAGIC:
        raise FormatError(f"Bad magic {data[:4]!r} in {path}, expected {ENC1_MAGIC!r}")

    (length,) = ENC1_HEADER_LEN.unpack_from(data, 4)
    offset = 4 + ENC1_HEADER_LEN.size
    try:
        header = json.loads(data[offset : offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Unreadable ENC1 header in {path}: {e}") from e
    offset += length

    tensors: dict[str, np.ndarray] = {}
    if not isinstance(header, dict) or "tensors" not in header:
        raise FormatError(f"ENC1 header in {path} has no tensor table")
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        if offset + 8 * count > len(data):
            raise FormatError(f"Tensor {entry['name']} truncated in {path}")
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise FormatError(f"Trailing bytes after the last tensor in {path}")

    return EncoderParams(
        tensors,
        header["flavor"],
        header["embed_dim"],
        header["hidden"],
        header["nu"],
        header.get("meta", {}),
    )
