from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from src.validation.validate_embeddings import ContractError, DataError, FormatError

METRIC_KINDS = ("d_kl", "d_klr", "d_c", "d_w", "conformity", "raw_norm", "iwl_weight")
MODALITIES = ("image", "text")
JENSEN_SLACK = 1e-9


@dataclass(frozen=True)
class MetricVector:
    """Per-sample values of one metric, tagged with kind, modality and the parameters used."""

    ids: tuple[str, ...]
    values: np.ndarray
    kind: str
    modality: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "values", values)

        if self.kind not in METRIC_KINDS:
            raise ContractError(f"Unknown metric kind: {self.kind!r}")
        if self.modality not in MODALITIES:
            raise ContractError(f"Unknown modality: {self.modality!r}")
        if values.ndim != 1 or len(self.ids) != len(values):
            raise ContractError(f"Got {len(self.ids)} ids for {values.shape} values")
        if np.isnan(values).any():
            first = int(np.flatnonzero(np.isnan(values))[0])
            raise DataError(f"NaN {self.kind} value for sample {self.ids[first]!r}")
        if self.kind == "d_klr" and len(values) and values.min() < -JENSEN_SLACK:
            raise DataError(f"d_klr below the Jensen bound: {values.min():.3e}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def label(self) -> str:
        return f"{self.kind}({self.modality})"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"id": list(self.ids), "value": self.values})

    def as_series(self) -> pd.Series:
        return pd.Series(self.values, index=pd.Index(self.ids, name="id"), name=self.kind)

    def subset(self, ids: Sequence[str]) -> "MetricVector":
        index = {sample_id: k for k, sample_id in enumerate(self.ids)}
        missing = [i for i in ids if i not in index]
        if missing:
            raise ContractError(f"Unknown ids for {self.label}: {missing[:10]}")
        rows = [index[i] for i in ids]
        return MetricVector(tuple(ids), self.values[rows], self.kind, self.modality, dict(self.params))

    def header(self) -> dict[str, Any]:
        return {"kind": self.kind, "modality": self.modality, "params": self.params}

    def write_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as f:
            f.write("# " + json.dumps(self.header(), sort_keys=True, default=str) + "\n")
            self.to_frame().to_csv(f, index=False, float_format="%.17g")
        return path

    @classmethod
    def read_csv(cls, path: Path) -> "MetricVector":
        """Read a file written by write_csv; the '# {json}' header line is required."""
        if not path.exists():
            raise FileNotFoundError(f"Metric file not found: {path}")

        with path.open("r", encoding="utf-8") as f:
            first = f.readline()
        if not first.startswith("#"):
            raise FormatError(f"Metric file {path} lacks the '# {{\"kind\", \"modality\"}}' header line")
        try:
            header = json.loads(first[1:].strip())
        except json.JSONDecodeError as e:
            raise FormatError(f"Unreadable metric header in {path}: {e}") from e
        if not isinstance(header, dict) or "kind" not in header or "modality" not in header:
            raise FormatError(f"Metric header in {path} must name kind and modality, got {header!r}")

        try:
            df = pd.read_csv(path, skiprows=1, dtype={"id": str, "sample_id": str})
        except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as e:
            raise FormatError(f"Unreadable metric file {path}: {e}") from e
        id_col = "id" if "id" in df.columns else "sample_id"
        if id_col not in df.columns or "value" not in df.columns:
            raise FormatError(f"Metric file {path} needs id and value columns, got {list(df.columns)}")

        values = pd.to_numeric(df["value"], errors="coerce")
        bad = values.isna() & df["value"].notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise FormatError(f"Non-numeric value {df['value'].iloc[row]!r} for sample {df[id_col].iloc[row]!r} in {path}")

        return cls(
            ids=tuple(df[id_col].astype(str)),
            values=values.to_numpy(dtype=np.float64),
            kind=header["kind"],
            modality=header["modality"],
            params=header.get("params") or {},
        )
