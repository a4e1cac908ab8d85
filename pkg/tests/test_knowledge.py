"""Pathway parsing, drug targets and pair description vectors."""

from __future__ import annotations

import io

import numpy as np
import pytest

from elicit.data import DataError, DrugInfo, FeatureInfo
from elicit.knowledge import (
    FIXED_SLOTS,
    DescriptionVector,
    GeneSet,
    build_description_vectors,
    descriptions_from_csv,
    descriptions_to_csv,
    parse_drug_targets,
    parse_gmt,
    raw_data_descriptions,
    retained_pathways,
)

from conftest import make_dataset

GMT = (
    "apoptosis\thttp://example.org/a\tTP53\tBAX\tCASP3\n"
    "kinase_signaling\tna\tFLT3\tKIT\tkras\n"
    "unrelated\tna\tZZZ1\tZZZ2\n"
)

FEATURES = [
    FeatureInfo(id="m_tp53", kind="mutation", gene="TP53"),
    FeatureInfo(id="m_flt3", kind="mutation", gene="flt3"),
    FeatureInfo(id="cg_del5q", kind="cytogenetic"),
]

DRUGS = [
    DrugInfo(id="dA", name="inhibitor-a", group="kinase", targets=frozenset({"FLT3"})),
    DrugInfo(id="dB", name="chemo-b", group="cytotoxic"),
]


def test_parse_gmt():
    sets = parse_gmt(io.StringIO(GMT))
    assert [s.name for s in sets] == ["apoptosis", "kinase_signaling", "unrelated"]
    # Symbols are upper-cased on the way in.
    assert "KRAS" in sets[1].genes
    assert sets[0].genes == frozenset({"TP53", "BAX", "CASP3"})


def test_parse_gmt_errors():
    with pytest.raises(DataError, match="line 1"):
        parse_gmt(io.StringIO("only_name\tdesc\n"))
    with pytest.raises(DataError, match="duplicate"):
        parse_gmt(io.StringIO("a\tx\tG1\na\tx\tG2\n"))
    with pytest.raises(DataError, match="no genes"):
        parse_gmt(io.StringIO("a\tx\t \t \n"))
    assert parse_gmt(io.StringIO("\n\n")) == []


def test_parse_drug_targets():
    table = "drug_id\ttargets\ndA\tFLT3, kit\ndB\t\n"
    out = parse_drug_targets(io.StringIO(table))
    assert out["dA"] == frozenset({"FLT3", "KIT"})
    assert out["dB"] == frozenset()
    with pytest.raises(DataError):
        parse_drug_targets(io.StringIO("drug\ttgt\nx\ty\n"))
    with pytest.raises(DataError, match="duplicate"):
        parse_drug_targets(io.StringIO("drug_id\ttargets\ndA\tX\ndA\tY\n"))
    with pytest.warns(UserWarning, match="unknown drug"):
        parse_drug_targets(io.StringIO("drug_id\ttargets\ndZ\tX\n"), known_drugs=["dA"])


def test_retained_pathways_drops_unrelated():
    sets = parse_gmt(io.StringIO(GMT))
    targets = {"dA": frozenset({"FLT3"})}
    kept = retained_pathways(sets, FEATURES, targets)
    assert [s.name for s in kept] == ["apoptosis", "kinase_signaling"]
    # Target genes alone can retain a pathway even without a matching feature.
    kept2 = retained_pathways(sets, [FEATURES[2]], {"d": frozenset({"ZZZ1"})})
    assert [s.name for s in kept2] == ["unrelated"]


def test_description_schema_and_vectors():
    sets = parse_gmt(io.StringIO(GMT))
    schema, vectors = build_description_vectors(FEATURES, DRUGS, sets)
    assert schema.slots[:3] == FIXED_SLOTS
    assert schema.pathways == ("apoptosis", "kinase_signaling")
    assert schema.length == 5
    assert len(vectors) == len(FEATURES) * len(DRUGS)

    # FLT3 mutation against the FLT3 inhibitor: mutation, direct target,
    # shares the kinase pathway, member of kinase_signaling only.
    v = vectors[("dA", "m_flt3")].values
    np.testing.assert_array_equal(v, [1, 1, 1, 0, 1])
    # TP53 mutation against the same drug: no target relation.
    v = vectors[("dA", "m_tp53")].values
    np.testing.assert_array_equal(v, [1, 0, 0, 1, 0])
    # Cytogenetic marker has no gene, so only the kind slot can be zero/one.
    v = vectors[("dB", "cg_del5q")].values
    np.testing.assert_array_equal(v, [0, 0, 0, 0, 0])
    # Untargeted drug never matches target slots.
    v = vectors[("dB", "m_flt3")].values
    np.testing.assert_array_equal(v, [1, 0, 0, 0, 1])


def test_description_vector_must_be_binary():
    with pytest.raises(DataError):
        DescriptionVector(pair=("d", "f"), values=np.array([0.5]))


def test_explicit_targets_override_metadata():
    sets = parse_gmt(io.StringIO(GMT))
    schema, vectors = build_description_vectors(
        FEATURES, DRUGS, sets, targets={"dA": frozenset({"TP53"})}
    )
    assert vectors[("dA", "m_tp53")].values[1] == 1.0
    assert vectors[("dA", "m_flt3")].values[1] == 0.0


def test_raw_data_descriptions():
    ds = make_dataset(n=10, m=3, d=2, seed=6)
    pairs = [(ds.drugs[0].id, f.id) for f in ds.features]
    out = raw_data_descriptions(ds, pairs)
    for pair, vec in out.items():
        assert vec.shape == (3,)
        assert vec[0] in (0.0, 1.0)
        assert 0.0 <= vec[1] <= 1.0  # binary feature frequency
        assert 0.0 <= vec[2] <= 1.0  # absolute correlation
    # The planted signal feature correlates hardest with the response.
    corrs = [out[p][2] for p in pairs]
    assert corrs[0] == max(corrs)


def test_descriptions_csv_round_trip():
    sets = parse_gmt(io.StringIO(GMT))
    schema, vectors = build_description_vectors(FEATURES, DRUGS, sets)
    text = descriptions_to_csv(schema.slots, vectors)
    slots, back = descriptions_from_csv(text)
    assert slots == list(schema.slots)
    assert set(back) == set(vectors)
    for pair in vectors:
        np.testing.assert_array_equal(back[pair], vectors[pair].values)


def test_descriptions_csv_accepts_plain_arrays():
    text = descriptions_to_csv(["a", "b"], {("d0", "f0"): np.array([0.25, 1.5])})
    slots, back = descriptions_from_csv(text)
    assert slots == ["a", "b"]
    np.testing.assert_array_equal(back[("d0", "f0")], [0.25, 1.5])
    with pytest.raises(DataError, match="wrong length"):
        descriptions_to_csv(["a"], {("d0", "f0"): np.array([1.0, 0.0])})


def test_descriptions_csv_errors():
    with pytest.raises(DataError):
        descriptions_from_csv("")
    with pytest.raises(DataError):
        descriptions_from_csv("x,y,a\n1,2,3\n")
    with pytest.raises(DataError, match="line 3"):
        descriptions_from_csv("drug_id,feature_id,a\nd0,f0,1\nd0,f1\n")
    with pytest.raises(DataError, match="duplicate"):
        descriptions_from_csv("drug_id,feature_id,a\nd0,f0,1\nd0,f0,0\n")
    with pytest.raises(DataError, match="line 2"):
        descriptions_from_csv("drug_id,feature_id,a\nd0,f0,notanumber\n")
