from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from src.embeddings.store import PairedCorpus
from src.metrics.metric_vector import MetricVector
from src.validation.validate_embeddings import ContractError, FormatError, validate_id_cover

logger = logging.getLogger("densratio.curation")

TIE_RULES = ("by_id", "stable")
COMPOSE_MODES = ("intersection", "sequential")
MANIFEST_COLUMNS = ["id", "value", "rank"]


def kept_count(keep_fraction: float, n: int) -> int:
    """ceil(keep_fraction * n), rounded first so 0.29 * 100 stays 29."""
    if not 0 < keep_fraction <= 1:
        raise ContractError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    return math.ceil(round(keep_fraction * n, 9))


def _ranked(frame: pd.DataFrame, tie_rule: str) -> pd.DataFrame:
    if tie_rule not in TIE_RULES:
        raise ContractError(f"Unknown tie rule {tie_rule!r}; expected one of {TIE_RULES}")
    if tie_rule == "by_id":
        return frame.sort_values(["value", "id"], ascending=[False, True], kind="mergesort")
    # stable keeps the input order among equal values
    return frame.sort_values("value", ascending=False, kind="mergesort")


def _manifest(frame: pd.DataFrame) -> pd.DataFrame:
    out = frame[["id", "value"]].reset_index(drop=True)
    out["rank"] = range(1, len(out) + 1)
    return out[MANIFEST_COLUMNS]


def rank_and_filter(
    corpus: PairedCorpus | Sequence[str],
    metric: MetricVector,
    keep_fraction: float,
    tie_rule: str = "by_id",
) -> pd.DataFrame:
    """
    Keep the ceil(keep_fraction * n) highest-valued samples.

    Returns a manifest frame (id, value, rank) in descending metric order.
    `corpus` may be a PairedCorpus or a plain id sequence.
    """
    ids = list(corpus.ids if isinstance(corpus, PairedCorpus) else corpus)
    validate_id_cover(ids, metric.ids)
    k = kept_count(keep_fraction, len(ids))

    # rows follow the corpus order so "stable" ties resolve by corpus position
    frame = metric.subset(ids).to_frame()
    kept = _ranked(frame, tie_rule).head(k)
    logger.info("Kept %d of %d samples by %s", len(kept), len(ids), metric.label)
    return _manifest(kept)


def threshold_filter(ids: Sequence[str], metric: MetricVector, min_value: float) -> pd.DataFrame:
    """Keep samples with metric >= min_value, ranked by (value desc, id asc). ids may be any subset of the metric."""
    frame = metric.subset(list(ids)).to_frame()
    kept = _ranked(frame[frame["value"] >= min_value], "by_id")
    logger.info("Threshold %.6g kept %d of %d samples", min_value, len(kept), len(frame))
    return _manifest(kept)


@dataclass(frozen=True)
class Filter:
    """One filtering stage, re-applicable to any surviving subset."""

    metric: MetricVector
    keep_fraction: float | None = None
    min_value: float | None = None
    tie_rule: str = "by_id"

    def __post_init__(self):
        if (self.keep_fraction is None) == (self.min_value is None):
            raise ContractError("A filter needs exactly one of keep_fraction or min_value")

    def apply(self, ids: Sequence[str]) -> pd.DataFrame:
        if self.min_value is not None:
            return threshold_filter(ids, self.metric, self.min_value)
        metric = self.metric.subset(list(ids))
        return rank_and_filter(list(ids), metric, self.keep_fraction, self.tie_rule)


def compose_filters(
    manifests: Sequence[pd.DataFrame | Filter],
    mode: str = "intersection",
    ids: Sequence[str] | None = None,
) -> pd.DataFrame:
    """
    intersection: ids present in every manifest, in the first manifest's order.
    sequential: each Filter runs on the survivors of the previous one, starting
    from `ids`; ready-made manifests act as id masks.
    """
    if mode not in COMPOSE_MODES:
        raise ContractError(f"Unknown compose mode {mode!r}; expected one of {COMPOSE_MODES}")
    if not manifests:
        raise ContractError("Need at least one manifest to compose")

    if mode == "intersection":
        frames = [m.apply(ids) if isinstance(m, Filter) else m for m in manifests]
        common = set(frames[0]["id"])
        for frame in frames[1:]:
            common &= set(frame["id"])
        result = _manifest(frames[0][frames[0]["id"].isin(common)])
    else:
        if ids is None:
            first = manifests[0]
            if isinstance(first, Filter):
                raise ContractError("Sequential composition starting with a Filter needs the corpus ids")
            survivors = first
            manifests = manifests[1:]
        else:
            survivors = _manifest(pd.DataFrame({"id": list(ids), "value": float("nan")}))
        for stage in manifests:
            current = list(survivors["id"])
            if isinstance(stage, Filter):
                survivors = stage.apply(current)
            else:
                allowed = set(stage["id"])
                survivors = _manifest(survivors[survivors["id"].isin(allowed)])
        result = survivors

    if result.empty:
        logger.warning("Composed filter kept no samples")
    return result


def write_manifest(manifest: pd.DataFrame, path: Path, id_list_path: Path | None = None) -> Path:
    """JSONL of {"id", "value", "rank"}; optionally a plain id list next to it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for row in manifest.itertuples(index=False):
            f.write(json.dumps({"id": row.id, "value": float(row.value), "rank": int(row.rank)}) + "\n")

    if id_list_path is not None:
        id_list_path.parent.mkdir(parents=True, exist_ok=True)
        id_list_path.write_text("".join(f"{i}\n" for i in manifest["id"]), encoding="utf-8")

    logger.info("Wrote manifest with %d ids to %s", len(manifest), path)
    return path


def read_manifest(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    if path.stat().st_size == 0:
        return pd.DataFrame(columns=MANIFEST_COLUMNS)
    try:
        df = pd.read_json(path, lines=True, dtype={"id": str})
    except ValueError as e:
        raise FormatError(f"Unreadable manifest {path}: {e}") from e
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise FormatError(f"Manifest {path} is missing fields: {missing}")
    df["id"] = df["id"].astype(str)
    return df[MANIFEST_COLUMNS]
