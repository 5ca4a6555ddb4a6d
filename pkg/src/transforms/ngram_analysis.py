"""
Caption diversity by metric decile: top-K n-gram coverage curves.

Coverage at K is the share of all n-gram occurrences in a group taken by its K
most frequent n-grams (ties ordered lexicographically).
"""
from __future__ import annotations

import logging
import re
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from src.metrics.metric_vector import MetricVector
from src.validation.validate_embeddings import ContractError

logger = logging.getLogger("densratio.ngram")

N_GROUPS = 10
DEFAULT_ORDERS = (1, 2, 3)
GROUP_BY = ("own_metric", "paired_image_metric")
_NON_WORD = re.compile(r"[^\w\s]|_")


def tokenize(caption: str) -> tuple[str, ...]:
    """Lowercase, punctuation to spaces, split on whitespace."""
    return tuple(_NON_WORD.sub(" ", caption.lower()).split())


def ngrams(tokens: Sequence[str], n: int) -> Iterable[tuple[str, ...]]:
    return (tuple(tokens[k : k + n]) for k in range(len(tokens) - n + 1))


@dataclass
class NGramTable:
    n: int
    group: int
    counts: Counter = field(default_factory=Counter)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def merge(self, other: "NGramTable") -> "NGramTable":
        if other.n != self.n:
            raise ContractError(f"Cannot merge {other.n}-gram counts into {self.n}-gram counts")
        return NGramTable(self.n, self.group, self.counts + other.counts)


def count_ngrams(captions: Sequence[str], n: int, group: int = 0, threads: int = 1) -> NGramTable:
    if n < 1:
        raise ContractError(f"n-gram order must be positive, got {n}")

    def count(chunk: Sequence[str]) -> NGramTable:
        return NGramTable(n, group, Counter(g for c in chunk for g in ngrams(tokenize(c), n)))

    if threads <= 1 or len(captions) < 2:
        return count(captions)
    size = -(-len(captions) // threads)
    chunks = [captions[k : k + size] for k in range(0, len(captions), size)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        tables = list(pool.map(count, chunks))
    merged = NGramTable(n, group)
    for table in tables:
        merged = merged.merge(table)
    return merged


def decile_groups(
    metric: MetricVector,
    captions: pd.DataFrame,
    group_by: str = "own_metric",
) -> list[list[str]]:
    """
    Split caption ids into 10 groups by metric decile (group 9 = largest values).

    captions: frame with `id` and, for paired_image_metric, `image_id`; the metric
    is keyed by caption id (own_metric) or by image id (paired_image_metric).
    Order is (value, id) ascending, so boundary ties resolve by id.
    """
    if group_by not in GROUP_BY:
        raise ContractError(f"Unknown group_by {group_by!r}; expected one of {GROUP_BY}")
    if len(captions) < N_GROUPS:
        raise ContractError(f"Need at least {N_GROUPS} captions for deciles, got {len(captions)}")

    values = metric.as_series()
    key = captions["id"] if group_by == "own_metric" else captions.get("image_id")
    if key is None:
        raise ContractError("paired_image_metric needs an image_id column")
    missing = sorted(set(key) - set(values.index))
    if missing:
        raise ContractError(f"Metric does not cover ids: {missing[:10]}")

    frame = pd.DataFrame({"id": captions["id"].to_numpy(), "value": values.loc[key.to_numpy()].to_numpy()})
    ordered = frame.sort_values(["value", "id"], kind="mergesort")["id"].to_numpy()
    return [list(part) for part in np.array_split(ordered, N_GROUPS)]


def coverage_curve(table: NGramTable | Sequence[str], n: int | None = None, K_max: int | None = None) -> list[tuple[int, float]]:
    """
    [(K, coverage)] for K = 1..K_max, or up to the number of distinct n-grams
    without K_max. Past the last distinct n-gram the curve stays at 1.0, so
    curves from groups of different vocabulary size line up.

    Accepts a counted table or the raw captions of one group (then `n` is required).
    """
    if K_max is not None and K_max < 1:
        raise ContractError(f"K_max must be positive, got {K_max}")
    if not isinstance(table, NGramTable):
        if n is None:
            raise ContractError("n is required when passing captions")
        if len(table) == 0:
            raise ContractError("Cannot build a coverage curve for an empty group")
        table = count_ngrams(table, n)

    total = table.total
    if total == 0:
        logger.warning("No %d-grams in group %d; returning an empty curve", table.n, table.group)
        return []

    ranked = sorted(table.counts.items(), key=lambda item: (-item[1], item[0]))
    limit = len(ranked) if K_max is None else min(K_max, len(ranked))
    cumulative = np.cumsum([count for _, count in ranked[:limit]])
    curve = [(k + 1, float(c) / total) for k, c in enumerate(cumulative)]
    if K_max is not None:
        curve.extend((k, 1.0) for k in range(limit + 1, K_max + 1))
    return curve


def coverage_table(
    groups: Sequence[Sequence[str]],
    texts: Mapping[str, str],
    orders: Sequence[int] = DEFAULT_ORDERS,
    K_max: int | None = None,
    threads: int = 1,
) -> pd.DataFrame:
    """Long-form (group, n, K, coverage) over every group and gram order."""
    frames = []
    for g, ids in enumerate(groups):
        captions = [texts[i] for i in ids]
        for n in orders:
            curve = coverage_curve(count_ngrams(captions, n, g, threads), K_max=K_max)
            frames.append(pd.DataFrame(curve, columns=["K", "coverage"]).assign(group=g, n=n))
    if not frames:
        return pd.DataFrame(columns=["group", "n", "K", "coverage"])
    return pd.concat(frames, ignore_index=True)[["group", "n", "K", "coverage"]]
