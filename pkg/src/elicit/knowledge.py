"""Pathway and drug-target ingestion, and pair description vectors.

The bandit user model scores (drug, feature) pairs through a binary
description vector: one slot for the feature type, two for the pair's
relation to the drug's targets, and one membership slot per retained
pathway. Gene symbols are matched exactly, case-insensitively, after
trimming; alias resolution is out of scope.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .data import DataError, Dataset, DrugInfo, FeatureInfo

Pair = tuple[str, str]

FIXED_SLOTS = ("kind-is-mutation", "is-drug-target", "shares-pathway-with-target")


def _norm(symbol: str) -> str:
    return symbol.strip().upper()


@dataclass(frozen=True)
class GeneSet:
    name: str
    genes: frozenset[str]

    def __post_init__(self):
        if not self.genes:
            raise DataError(f"gene set {self.name!r} is empty")


@dataclass(frozen=True)
class DescriptionSchema:
    """Ordered slot names; the first three are fixed, the rest are pathways."""

    slots: tuple[str, ...]

    @property
    def length(self) -> int:
        return len(self.slots)

    @property
    def pathways(self) -> tuple[str, ...]:
        return self.slots[len(FIXED_SLOTS):]


@dataclass(frozen=True)
class DescriptionVector:
    pair: Pair
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise DataError(f"description vector for {self.pair} is not binary")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def parse_gmt(stream: IO[str] | Iterable[str]) -> list[GeneSet]:
    """Parse tab-separated gene sets, one per line: name, description, genes."""
    sets: list[GeneSet] = []
    seen: set[str] = set()
    for lineno, line in enumerate(stream, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise DataError(f"gene set line {lineno} has {len(fields)} fields, expected >= 3")
        name = fields[0].strip()
        if name in seen:
            raise DataError(f"duplicate gene set name {name!r} at line {lineno}")
        seen.add(name)
        genes = frozenset(_norm(g) for g in fields[2:] if g.strip())
        if not genes:
            raise DataError(f"gene set {name!r} at line {lineno} has no genes")
        sets.append(GeneSet(name=name, genes=genes))
    return sets


def parse_drug_targets(
    stream: IO[str] | Iterable[str], known_drugs: Sequence[str] | None = None
) -> dict[str, frozenset[str]]:
    """Parse a drug-target table with header columns drug_id and targets."""
    lines = [ln.rstrip("\n").rstrip("\r") for ln in stream]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        return {}
    header = [h.strip() for h in lines[0].split("\t")]
    try:
        id_col = header.index("drug_id")
        tgt_col = header.index("targets")
    except ValueError as exc:
        raise DataError(f"drug-target header must name drug_id and targets, got {header}") from exc
    out: dict[str, frozenset[str]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) <= max(id_col, tgt_col):
            raise DataError(f"drug-target line {lineno} has {len(fields)} fields")
        drug_id = fields[id_col].strip()
        if not drug_id:
            raise DataError(f"drug-target line {lineno} has an empty drug id")
        targets = frozenset(_norm(t) for t in fields[tgt_col].split(",") if t.strip())
        if drug_id in out:
            raise DataError(f"duplicate drug id {drug_id!r} at line {lineno}")
        if known_drugs is not None and drug_id not in set(known_drugs):
            warnings.warn(f"drug-target table names unknown drug {drug_id!r}", stacklevel=2)
        out[drug_id] = targets
    return out


def retained_pathways(
    gene_sets: Sequence[GeneSet],
    features: Sequence[FeatureInfo],
    targets: Mapping[str, frozenset[str]],
) -> list[GeneSet]:
    """Keep pathways containing at least one candidate or target gene."""
    included = {_norm(f.gene) for f in features if f.gene}
    for genes in targets.values():
        included.update(_norm(g) for g in genes)
    return [gs for gs in gene_sets if gs.genes & included]


def build_description_vectors(
    features: Sequence[FeatureInfo],
    drugs: Sequence[DrugInfo],
    gene_sets: Sequence[GeneSet],
    targets: Mapping[str, frozenset[str]] | None = None,
) -> tuple[DescriptionSchema, dict[Pair, DescriptionVector]]:
    """Binary descriptions for every (drug, feature) combination.

    Slots: feature kind is mutation; feature gene is a target of the
    drug; feature gene shares a retained pathway with any target gene;
    then one membership indicator per retained pathway.
    """
    if targets is None:
        targets = {d.id: frozenset(_norm(g) for g in d.targets) for d in drugs}
    else:
        targets = {k: frozenset(_norm(g) for g in v) for k, v in targets.items()}
    kept = retained_pathways(gene_sets, features, targets)
    schema = DescriptionSchema(slots=FIXED_SLOTS + tuple(gs.name for gs in kept))

    member = {}
    for f in features:
        gene = _norm(f.gene) if f.gene else None
        member[f.id] = np.array(
            [1.0 if (gene is not None and gene in gs.genes) else 0.0 for gs in kept]
        )

    vectors: dict[Pair, DescriptionVector] = {}
    for drug in drugs:
        tset = targets.get(drug.id, frozenset())
        # pathways containing at least one of this drug's target genes
        shared = np.array([1.0 if (gs.genes & tset) else 0.0 for gs in kept])
        for f in features:
            gene = _norm(f.gene) if f.gene else None
            vals = np.zeros(schema.length)
            vals[0] = 1.0 if f.kind == "mutation" else 0.0
            vals[1] = 1.0 if (gene is not None and gene in tset) else 0.0
            pth = member[f.id]
            vals[2] = 1.0 if np.any(pth * shared) else 0.0
            vals[len(FIXED_SLOTS):] = pth
            pair = (drug.id, f.id)
            vectors[pair] = DescriptionVector(pair=pair, values=vals)
    return schema, vectors


def raw_data_descriptions(
    dataset: Dataset, pairs: Sequence[Pair]
) -> dict[Pair, np.ndarray]:
    """Descriptor source built from the data alone, with no knowledge base.

    Per pair: feature kind indicator, the feature's raw occurrence
    frequency, and the absolute correlation between the feature column
    and the drug's response. Serves as the comparison arm when judging
    how much the curated descriptions help.
    """
    raw_x = dataset.x_transform.invert(dataset.X)
    out: dict[Pair, np.ndarray] = {}
    for drug_id, feature_id in pairs:
        k = dataset.feature_index(feature_id)
        j = dataset.drug_index(drug_id)
        x = dataset.X[:, k]
        y = dataset.Y[:, j]
        sx, sy = float(np.std(x)), float(np.std(y))
        corr = float(np.corrcoef(x, y)[0, 1]) if sx > 0 and sy > 0 else 0.0
        info = dataset.features[k]
        out[(drug_id, feature_id)] = np.array(
            [1.0 if info.kind == "mutation" else 0.0, float(np.mean(raw_x[:, k])), abs(corr)]
        )
    return out


def descriptions_to_csv(slots: Sequence[str], vectors: Mapping[Pair, "np.ndarray"]) -> str:
    """Description vectors as CSV, one row per pair, slot names as columns."""
    cols = ",".join(str(s) for s in slots)
    lines = [f"drug_id,feature_id,{cols}"]
    for (drug_id, feature_id), vec in vectors.items():
        arr = np.asarray(vec.values if isinstance(vec, DescriptionVector) else vec, dtype=float)
        if arr.shape != (len(slots),):
            raise DataError(f"vector for ({drug_id}, {feature_id}) has wrong length")
        lines.append(f"{drug_id},{feature_id}," + ",".join(f"{v:.17g}" for v in arr))
    return "\n".join(lines) + "\n"


def descriptions_from_csv(text: str) -> tuple[list[str], dict[Pair, np.ndarray]]:
    """Inverse of descriptions_to_csv; values are read as plain floats."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty description file")
    header = [h.strip() for h in lines[0].split(",")]
    if header[:2] != ["drug_id", "feature_id"]:
        raise DataError("description file must start with drug_id,feature_id columns")
    slots = header[2:]
    vectors: dict[Pair, np.ndarray] = {}
    for ln_no, ln in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in ln.split(",")]
        if len(cells) != len(header):
            raise DataError(f"description file line {ln_no}: expected {len(header)} columns")
        pair = (cells[0], cells[1])
        if pair in vectors:
            raise DataError(f"description file line {ln_no}: duplicate pair {pair}")
        try:
            vectors[pair] = np.array([float(c) for c in cells[2:]])
        except ValueError as exc:
            raise DataError(f"description file line {ln_no}: {exc}") from None
    return slots, vectors
