import numpy as np

from src.embeddings.store import EmbeddingMatrix, normalize


def unit_matrix(n: int, d: int, modality: str = "image", seed: int = 0, prefix: str = "s") -> EmbeddingMatrix:
    rng = np.random.default_rng(seed)
    raw = EmbeddingMatrix(tuple(f"{prefix}{k}" for k in range(n)), rng.standard_normal((n, d)), modality)
    return normalize(raw)


def shifted_matrix(
    n: int, d: int, modality: str = "image", seed: int = 0, prefix: str = "s", shift: float = 1.5
) -> EmbeddingMatrix:
    """Unit rows clustered around a common direction, with unequal spread per axis."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n, d)) * np.linspace(1.0, 0.3, d)
    raw[:, 0] += shift
    return normalize(EmbeddingMatrix(tuple(f"{prefix}{k}" for k in range(n)), raw, modality))
