import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import pandas as pd

from src.embeddings.store import EmbeddingMatrix, PairedCorpus
from src.validation.validate_embeddings import ContractError, DataError, FormatError

logger = logging.getLogger("densratio.ingestion")

EMB1_MAGIC = b"EMB1"
EMB1_HEADER = struct.Struct("<4sIIB")
EMB1_TRAILER_LEN = struct.Struct("<Q")
MODALITY_CODES = {"image": 0, "text": 1}
FORMATS = ("emb1", "csv", "jsonl")
NAN_STRINGS = {"nan", "+nan", "-nan"}


def infer_format(path: Path) -> str:
    suffix = path.suffix.lower().lstrip(".")
    if suffix in ("emb", "emb1", "bin"):
        return "emb1"
    if suffix in ("csv", "jsonl"):
        return suffix
    raise FormatError(f"Cannot infer embedding format from {path.name}; pass format explicitly")


def _default_ids(n: int) -> tuple:
    return tuple(str(k) for k in range(n))


def _read_emb1(path: Path) -> Tuple[tuple, np.ndarray, str]:
    data = path.read_bytes()
    if len(data) < EMB1_HEADER.size:
        raise FormatError(f"Truncated EMB1 header in {path}")

    magic, n, d, code = EMB1_HEADER.unpack_from(data, 0)
    if magic != EMB1_MAGIC:
        raise FormatError(f"Bad magic {magic!r} in {path}, expected {EMB1_MAGIC!r}")
    if n == 0 or d == 0:
        raise FormatError(f"empty matrix in {path}")
    modality = {v: k for k, v in MODALITY_CODES.items()}.get(code)
    if modality is None:
        raise FormatError(f"Unknown modality code {code} in {path}")

    offset = EMB1_HEADER.size
    body = n * d * 4
    if len(data) < offset + body:
        raise FormatError(f"EMB1 body truncated in {path}: need {body} bytes")
    rows = np.frombuffer(data, dtype="<f4", count=n * d, offset=offset).reshape(n, d).astype(np.float64)

    offset += body
    if offset == len(data):
        return _default_ids(n), rows, modality

    (length,) = EMB1_TRAILER_LEN.unpack_from(data, offset)
    offset += EMB1_TRAILER_LEN.size
    try:
        ids = json.loads(data[offset : offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Unreadable id trailer in {path}: {e}") from e
    if not isinstance(ids, list) or len(ids) != n:
        raise FormatError(f"Id trailer in {path} must list {n} ids")
    return tuple(str(i) for i in ids), rows, modality


def _read_csv(path: Path) -> Tuple[tuple, np.ndarray]:
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise FormatError(f"empty matrix in {path}")

    has_ids = [line.lstrip().startswith("id:") for line in lines]
    if any(has_ids) and not all(has_ids):
        first = has_ids.index(not has_ids[0])
        raise FormatError(f"Row {first} in {path} mixes id-prefixed and bare rows")

    widths = [line.count(",") + 1 for line in lines]
    for k, width in enumerate(widths):
        if width != widths[0]:
            raise FormatError(
                f"Row {k} in {path} has {width} fields, expected {widths[0]} (dimension mismatch)"
            )

    raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    ids = _default_ids(len(raw))
    if has_ids[0]:
        ids = tuple(raw.iloc[:, 0].str.strip().str[3:])
        raw = raw.iloc[:, 1:]

    values = raw.apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    literal_nan = raw.apply(lambda col: col.str.strip().str.lower().isin(NAN_STRINGS))
    non_numeric = values.isna() & ~literal_nan
    if non_numeric.to_numpy().any():
        row = int(np.flatnonzero(non_numeric.any(axis=1).to_numpy())[0])
        raise FormatError(f"Non-numeric value in row {ids[row]!r} of {path}")

    return ids, values.to_numpy(dtype=np.float64)


def _read_jsonl(path: Path) -> Tuple[tuple, np.ndarray]:
    try:
        df = pd.read_json(path, lines=True, dtype=False, precise_float=True)
    except ValueError as e:
        raise FormatError(f"Unreadable JSONL in {path}: {e}") from e
    if df.empty:
        raise FormatError(f"empty matrix in {path}")
    if "vec" not in df.columns:
        raise FormatError(f"JSONL records in {path} need a 'vec' field")

    ids = tuple(df["id"].astype(str)) if "id" in df.columns else _default_ids(len(df))
    lengths = df["vec"].map(lambda v: len(v) if isinstance(v, list) else -1)
    bad = lengths != lengths.iloc[0]
    if bad.any() or lengths.iloc[0] <= 0:
        row = int(np.flatnonzero(bad.to_numpy())[0]) if bad.any() else 0
        raise FormatError(f"Row {ids[row]!r} in {path} has a vector of a different dimension")

    rows = np.array([[np.nan if x is None else x for x in v] for v in df["vec"]], dtype=np.float64)
    return ids, rows


def load(
    path: Path,
    format: str | None = None,
    modality: str = "image",
    quarantine: bool = False,
    return_metrics: bool = False,
) -> Union[EmbeddingMatrix, Tuple[EmbeddingMatrix, Dict[str, Any]]]:
    """
    Load an embedding matrix (normalized=False) from EMB1, CSV or JSONL.

    With `quarantine=True` rows holding NaN/Inf are dropped and counted instead
    of failing the load.
    """
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")

    fmt = (format or infer_format(path)).lower()
    if fmt not in FORMATS:
        raise ContractError(f"Unknown embedding format {fmt!r}; expected one of {FORMATS}")

    if fmt == "emb1":
        ids, rows, modality = _read_emb1(path)
    elif fmt == "csv":
        ids, rows = _read_csv(path)
    else:
        ids, rows = _read_jsonl(path)

    metrics: Dict[str, Any] = {
        "path": str(path),
        "format": fmt,
        "input_rows": int(rows.shape[0]),
        "clean_rows": None,
        "quarantined_rows": 0,
        "quarantine_enabled": bool(quarantine),
    }

    bad = ~np.isfinite(rows).all(axis=1)
    if quarantine and bad.any():
        quarantined = [ids[k] for k in np.flatnonzero(bad)]
        logger.warning("Quarantining %d non-finite rows from %s", len(quarantined), path)
        logger.warning("Quarantined ids (first 10): %s", quarantined[:10])
        ids = tuple(i for i, b in zip(ids, bad) if not b)
        rows = rows[~bad]
        metrics["quarantined_rows"] = len(quarantined)
        if rows.shape[0] == 0:
            raise DataError(f"Every row of {path} was quarantined")

    try:
        matrix = EmbeddingMatrix(ids, rows, modality, normalized=False)
    except DataError as e:
        logger.error("Validation failed for %s: %s", path, e)
        raise

    metrics["clean_rows"] = matrix.n
    metrics["dim"] = matrix.d
    metrics["quarantine_rate"] = round(metrics["quarantined_rows"] / metrics["input_rows"], 4)
    logger.info("Loaded %d x %d %s embeddings from %s", matrix.n, matrix.d, modality, path)

    if return_metrics:
        return matrix, metrics
    return matrix


def save(m: EmbeddingMatrix, path: Path, format: str | None = None) -> Path:
    fmt = (format or infer_format(path)).lower()
    if fmt not in FORMATS:
        raise ContractError(f"Unknown embedding format {fmt!r}; expected one of {FORMATS}")
    path.parent.mkdir(parents=True, exist_ok=True)

    if fmt == "emb1":
        as_f32 = m.rows.astype("<f4")
        if not np.array_equal(as_f32.astype(np.float64), m.rows):
            logger.warning("EMB1 stores 32-bit floats; %s loses precision on save", path)
        trailer = json.dumps(list(m.ids), ensure_ascii=False).encode("utf-8")
        with path.open("wb") as f:
            f.write(EMB1_HEADER.pack(EMB1_MAGIC, m.n, m.d, MODALITY_CODES[m.modality]))
            f.write(as_f32.tobytes())
            f.write(EMB1_TRAILER_LEN.pack(len(trailer)))
            f.write(trailer)
    elif fmt == "csv":
        if any("," in i for i in m.ids):
            raise ContractError("CSV embedding files cannot carry ids containing commas")
        df = pd.DataFrame(m.rows)
        df.insert(0, "id", ["id:" + i for i in m.ids])
        df.to_csv(path, header=False, index=False, float_format="%.17g")
    else:
        # json.dumps keeps the shortest exact repr of every float
        with path.open("w", encoding="utf-8") as f:
            for sample_id, row in zip(m.ids, m.rows.tolist()):
                f.write(json.dumps({"id": sample_id, "vec": row}) + "\n")

    logger.info("Wrote %d x %d embeddings to %s", m.n, m.d, path)
    return path


def load_pairs(path: Path) -> PairedCorpus:
    """Pair JSONL: {"id", "image": [...], "text": [...], "caption": optional str}."""
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        df = pd.read_json(path, lines=True, dtype=False, precise_float=True)
    except ValueError as e:
        raise FormatError(f"Unreadable pair JSONL in {path}: {e}") from e

    missing = [c for c in ("id", "image", "text") if c not in df.columns]
    if missing:
        raise FormatError(f"Pair records in {path} are missing fields: {missing}")

    ids = tuple(df["id"].astype(str))
    images = EmbeddingMatrix(ids, np.array(df["image"].tolist(), dtype=np.float64), "image")
    texts = EmbeddingMatrix(ids, np.array(df["text"].tolist(), dtype=np.float64), "text")
    captions = tuple(df["caption"].fillna("").astype(str)) if "caption" in df.columns else None

    logger.info("Loaded %d pairs from %s", len(ids), path)
    return PairedCorpus(images, texts, captions=captions)


def save_pairs(corpus: PairedCorpus, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    texts = corpus.aligned_texts()
    with path.open("w", encoding="utf-8") as f:
        for k, sample_id in enumerate(corpus.ids):
            record = {"id": sample_id, "image": corpus.images.rows[k].tolist(), "text": texts.rows[k].tolist()}
            if corpus.captions is not None:
                record["caption"] = corpus.captions[corpus.pairing[k]]
            f.write(json.dumps(record) + "\n")
    return path


def load_captions(path: Path) -> pd.DataFrame:
    """Caption JSONL {"id", "text", "image_id"?} as a DataFrame indexed by id."""
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        df = pd.read_json(path, lines=True, dtype=False, precise_float=True)
    except ValueError as e:
        raise FormatError(f"Unreadable caption JSONL {path}: {e}") from e

    missing = [c for c in ("id", "text") if c not in df.columns]
    if missing:
        raise FormatError(f"Caption records in {path} are missing fields: {missing}")

    df["id"] = df["id"].astype(str)
    df["text"] = df["text"].fillna("").astype(str)
    if "image_id" in df.columns:
        df["image_id"] = df["image_id"].astype(str)
    if df["id"].duplicated().any():
        dupes = df.loc[df["id"].duplicated(), "id"].tolist()
        raise ContractError(f"Duplicate caption ids: {dupes[:10]}")

    logger.info("Loaded %d captions from %s", len(df), path)
    return df.set_index("id", drop=False)
