"""Dataset container, column standardization and TSV ingestion.

All model code operates on standardized matrices: every non-constant column
has zero mean and unit population variance (divide-by-N convention), and
constant columns are mapped to all-zero with a recorded scale of 1 so that
the transform stays invertible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

STANDARDIZE_TOL = 1e-9


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class FeatureInfo:
    id: str
    kind: str  # "mutation" | "cytogenetic"
    gene: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("mutation", "cytogenetic"):
            raise DataError(f"unknown feature kind {self.kind!r} for {self.id!r}")
        if self.kind == "mutation" and not self.gene:
            raise DataError(f"mutation feature {self.id!r} must carry a gene symbol")


@dataclass(frozen=True)
class DrugInfo:
    id: str
    name: str
    group: str
    targets: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.group:
            raise DataError(f"drug {self.id!r} has an empty group")


@dataclass(frozen=True)
class ColumnTransform:
    """Per-column location/scale used by :func:`standardize`."""

    mean: np.ndarray
    scale: np.ndarray

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.mean) / self.scale

    def invert(self, standardized: np.ndarray) -> np.ndarray:
        return standardized * self.scale + self.mean


@dataclass(frozen=True)
class Dataset:
    """Standardized feature matrix X (N x M) and response matrix Y (N x D)."""

    X: np.ndarray
    Y: np.ndarray
    features: tuple[FeatureInfo, ...]
    drugs: tuple[DrugInfo, ...]
    x_transform: ColumnTransform
    y_transform: ColumnTransform
    sample_ids: tuple[str, ...] = ()

    def __post_init__(self):
        n, m = self.X.shape
        n2, d = self.Y.shape
        if n != n2:
            raise DataError(f"X has {n} rows but Y has {n2}")
        if m != len(self.features):
            raise DataError(f"X has {m} columns but {len(self.features)} features")
        if d != len(self.drugs):
            raise DataError(f"Y has {d} columns but {len(self.drugs)} drugs")
        if len({f.id for f in self.features}) != m:
            raise DataError("feature ids are not unique")
        if len({dr.id for dr in self.drugs}) != d:
            raise DataError("drug ids are not unique")
        self.X.setflags(write=False)
        self.Y.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_drugs(self) -> int:
        return self.Y.shape[1]

    def feature_index(self, feature_id: str) -> int:
        return self._feature_lookup[feature_id]

    def drug_index(self, drug_id: str) -> int:
        return self._drug_lookup[drug_id]

    @property
    def _feature_lookup(self) -> dict[str, int]:
        cache = self.__dict__.get("_feature_lookup_cache")
        if cache is None:
            cache = {f.id: i for i, f in enumerate(self.features)}
            object.__setattr__(self, "_feature_lookup_cache", cache)
        return cache

    @property
    def _drug_lookup(self) -> dict[str, int]:
        cache = self.__dict__.get("_drug_lookup_cache")
        if cache is None:
            cache = {d.id: i for i, d in enumerate(self.drugs)}
            object.__setattr__(self, "_drug_lookup_cache", cache)
        return cache


def standardize_columns(raw: np.ndarray) -> tuple[np.ndarray, ColumnTransform]:
    """Standardize each column to zero mean, unit population variance.

    Constant columns become all-zero with recorded scale 1.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise DataError("expected a 2-D matrix")
    mean = raw.mean(axis=0)
    sd = np.sqrt(np.mean((raw - mean) ** 2, axis=0))
    scale = np.where(sd > 0.0, sd, 1.0)
    out = (raw - mean) / scale
    # Constant columns: exact zeros, not residual rounding noise.
    out[:, sd == 0.0] = 0.0
    return out, ColumnTransform(mean=mean, scale=scale)


def standardize(
    raw_X: np.ndarray,
    raw_Y: np.ndarray,
    features: Sequence[FeatureInfo] | None = None,
    drugs: Sequence[DrugInfo] | None = None,
    sample_ids: Sequence[str] | None = None,
) -> Dataset:
    """Build a standardized :class:`Dataset` from raw matrices.

    Missing metadata is replaced with anonymous placeholders, which is
    convenient for synthetic data.
    """
    raw_X = np.asarray(raw_X, dtype=float)
    raw_Y = np.asarray(raw_Y, dtype=float)
    if raw_X.ndim != 2 or raw_Y.ndim != 2:
        raise DataError("X and Y must be 2-D matrices")
    if raw_X.shape[0] != raw_Y.shape[0]:
        raise DataError(
            f"X has {raw_X.shape[0]} rows but Y has {raw_Y.shape[0]}"
        )
    if raw_X.shape[0] < 2:
        raise DataError("need at least 2 samples to standardize")
    if np.isnan(raw_X).any() or np.isnan(raw_Y).any():
        raise DataError("input matrices must not contain NaNs")

    if features is None:
        features = [
            FeatureInfo(id=f"f{m:04d}", kind="mutation", gene=f"GENE{m:04d}")
            for m in range(raw_X.shape[1])
        ]
    if drugs is None:
        drugs = [
            DrugInfo(id=f"d{j:02d}", name=f"drug-{j:02d}", group="synthetic")
            for j in range(raw_Y.shape[1])
        ]
    if sample_ids is None:
        sample_ids = [f"s{i:03d}" for i in range(raw_X.shape[0])]

    X, xt = standardize_columns(raw_X)
    Y, yt = standardize_columns(raw_Y)
    return Dataset(
        X=X,
        Y=Y,
        features=tuple(features),
        drugs=tuple(drugs),
        x_transform=xt,
        y_transform=yt,
        sample_ids=tuple(sample_ids),
    )


def dataset_from_arrays(
    X: np.ndarray,
    Y: np.ndarray,
    features: Sequence[FeatureInfo] | None = None,
    drugs: Sequence[DrugInfo] | None = None,
    sample_ids: Sequence[str] | None = None,
) -> Dataset:
    """Wrap arrays that are already in model units (identity transforms).

    Unlike :func:`standardize` this accepts any number of rows, including
    zero, which the enumeration oracle uses for prior-only checks.
    """
    X = np.ascontiguousarray(X, dtype=float)
    Y = np.ascontiguousarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2:
        raise DataError("X and Y must be 2-D matrices")
    if features is None:
        features = [
            FeatureInfo(id=f"f{m:04d}", kind="mutation", gene=f"GENE{m:04d}")
            for m in range(X.shape[1])
        ]
    if drugs is None:
        drugs = [
            DrugInfo(id=f"d{j:02d}", name=f"drug-{j:02d}", group="synthetic")
            for j in range(Y.shape[1])
        ]
    if sample_ids is None:
        sample_ids = [f"s{i:03d}" for i in range(X.shape[0])]
    identity_x = ColumnTransform(mean=np.zeros(X.shape[1]), scale=np.ones(X.shape[1]))
    identity_y = ColumnTransform(mean=np.zeros(Y.shape[1]), scale=np.ones(Y.shape[1]))
    return Dataset(
        X=X,
        Y=Y,
        features=tuple(features),
        drugs=tuple(drugs),
        x_transform=identity_x,
        y_transform=identity_y,
        sample_ids=tuple(sample_ids),
    )


# ---------------------------------------------------------------------------
# TSV ingestion (matrices carry a header row of ids and a first column of
# sample ids; metadata tables are plain TSV).

def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a
    partial file and a crash leaves the previous version intact."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def read_matrix_tsv(path: str | Path) -> tuple[np.ndarray, list[str], list[str]]:
    """Read a TSV matrix; returns (values, column_ids, sample_ids)."""
    # round_trip parsing keeps write->read exact for %.17g formatted output.
    df = pd.read_csv(path, sep="\t", index_col=0, float_precision="round_trip")
    if df.isna().any().any():
        raise DataError(f"{path}: matrix contains missing values")
    return df.to_numpy(dtype=float), [str(c) for c in df.columns], [str(i) for i in df.index]


def write_matrix_tsv(path: str | Path, values: np.ndarray, column_ids: Sequence[str], sample_ids: Sequence[str]) -> None:
    df = pd.DataFrame(np.asarray(values), index=list(sample_ids), columns=list(column_ids))
    df.to_csv(path, sep="\t", float_format="%.17g")


def read_features_tsv(path: str | Path) -> list[FeatureInfo]:
    """Read feature metadata: columns id, kind, gene (gene may be empty)."""
    df = pd.read_csv(path, sep="\t", dtype=str).fillna("")
    required = {"id", "kind"}
    if not required.issubset(df.columns):
        raise DataError(f"{path}: feature table needs columns {sorted(required)}")
    out = []
    for row in df.itertuples(index=False):
        gene = getattr(row, "gene", "") or None
        out.append(FeatureInfo(id=row.id, kind=row.kind, gene=gene))
    return out


def read_drugs_tsv(path: str | Path) -> list[DrugInfo]:
    """Read drug metadata: columns id, name, group, targets (comma-separated)."""
    df = pd.read_csv(path, sep="\t", dtype=str).fillna("")
    required = {"id", "name", "group"}
    if not required.issubset(df.columns):
        raise DataError(f"{path}: drug table needs columns {sorted(required)}")
    out = []
    for row in df.itertuples(index=False):
        raw = getattr(row, "targets", "")
        targets = frozenset(t.strip() for t in raw.split(",") if t.strip())
        out.append(DrugInfo(id=row.id, name=row.name, group=row.group, targets=targets))
    return out


def write_features_tsv(path: str | Path, features: Sequence[FeatureInfo]) -> None:
    df = pd.DataFrame(
        {
            "id": [f.id for f in features],
            "kind": [f.kind for f in features],
            "gene": [f.gene or "" for f in features],
        }
    )
    df.to_csv(path, sep="\t", index=False)


def write_drugs_tsv(path: str | Path, drugs: Sequence[DrugInfo]) -> None:
    df = pd.DataFrame(
        {
            "id": [d.id for d in drugs],
            "name": [d.name for d in drugs],
            "group": [d.group for d in drugs],
            "targets": [",".join(sorted(d.targets)) for d in drugs],
        }
    )
    df.to_csv(path, sep="\t", index=False)


def load_dataset(
    data_path: str | Path,
    response_path: str | Path,
    features_path: str | Path | None = None,
    drugs_path: str | Path | None = None,
) -> Dataset:
    """Load raw TSV matrices plus optional metadata and standardize."""
    raw_X, feature_ids, sample_ids = read_matrix_tsv(data_path)
    raw_Y, drug_ids, sample_ids_y = read_matrix_tsv(response_path)
    if sample_ids != sample_ids_y:
        raise DataError("feature and response matrices disagree on sample ids")

    features = None
    if features_path is not None:
        features = read_features_tsv(features_path)
        by_id = {f.id: f for f in features}
        missing = [fid for fid in feature_ids if fid not in by_id]
        if missing:
            raise DataError(f"features missing from metadata: {missing[:5]}")
        features = [by_id[fid] for fid in feature_ids]
    drugs = None
    if drugs_path is not None:
        drugs = read_drugs_tsv(drugs_path)
        by_id = {d.id: d for d in drugs}
        missing = [did for did in drug_ids if did not in by_id]
        if missing:
            raise DataError(f"drugs missing from metadata: {missing[:5]}")
        drugs = [by_id[did] for did in drug_ids]

    return standardize(raw_X, raw_Y, features=features, drugs=drugs, sample_ids=sample_ids)
