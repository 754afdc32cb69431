import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tumorquery.taxonomy import (
    BACKGROUND, DETECTION, DIAGNOSIS, CLINICAL_CONFIG, TOY_CONFIG, Taxonomy, TaxonomyError,
    build_taxonomy, clinical_taxonomy, toy_taxonomy,
)


def test_clinical_configuration_counts():
    t = clinical_taxonomy()
    assert len(t.organs) == 8
    assert len(t.tumors_flat) == 14
    assert len(t.organs) + len(t.tumors_flat) == 22
    assert len(t.majors) == 4
    assert len(t.subtypes) == 10
    assert len(t.shared) == 12
    assert [len(g) for g in t.subtype_groups] == [2, 4, 2, 2]
    assert t.n_detection == 4 + 12 + 1
    assert t.n_diagnosis == 10 + 12 + 1


def test_toy_configuration_counts():
    t = toy_taxonomy()
    assert len(t.shared) == 3
    assert t.n_detection == 5
    assert t.n_diagnosis == 6


def test_partition_is_disjoint():
    t = clinical_taxonomy()
    assert not set(t.shared) & set(t.majors)
    assert not set(t.subtypes) & set(t.shared)
    assert set(t.merge_map) == set(t.subtypes)
    assert set(t.merge_map.values()) == set(t.majors)


def test_background_is_zero_in_both_spaces():
    t = clinical_taxonomy()
    assert t.class_id(BACKGROUND, DETECTION) == 0
    assert t.class_id(BACKGROUND, DIAGNOSIS) == 0


@pytest.mark.parametrize("bad, match", [
    ({"organs": ["liver"], "tumors": [{"name": "liver tumor", "organ": "liver", "subtypes": ["HCC"]}]},
     "at least 2 subtypes"),
    ({"organs": ["liver", "liver"], "tumors": []}, "duplicate"),
    ({"organs": ["liver"], "tumors": [{"name": "HCC", "organ": "liver"},
                                      {"name": "x", "organ": "liver", "subtypes": ["HCC", "ICC"]}]}, "duplicate"),
    ({"organs": ["liver"], "tumors": [{"name": "lung cancer", "organ": "lung"}]}, "unknown organ"),
    ({"organs": [], "tumors": []}, "organ"),
])
def test_invalid_configs_rejected(bad, match):
    with pytest.raises(TaxonomyError, match=match):
        build_taxonomy(bad)


def test_subtype_to_major_examples():
    t = clinical_taxonomy()
    hcc = t.class_id("HCC", DIAGNOSIS)
    assert t.subtype_to_major(hcc) == t.class_id("liver tumor", DETECTION)
    assert t.subtype_to_major(0) == 0
    lung = t.class_id("lung cancer", DIAGNOSIS)
    assert t.class_name(t.subtype_to_major(lung), DETECTION) == "lung cancer"
    with pytest.raises(IndexError):
        t.subtype_to_major(t.n_diagnosis)


def test_subtype_to_major_total_and_surjective():
    t = clinical_taxonomy()
    image = {t.subtype_to_major(i) for i in range(t.n_diagnosis)}
    assert image == set(range(t.n_detection))


def test_merge_pancreas_subtypes():
    t = clinical_taxonomy()
    m = np.zeros((4, 4, 4), np.uint8)
    m[0, 0, 0] = t.class_id("PDAC")
    m[1, 1, 1] = t.class_id("nonPDAC")
    out = t.merge_labelmap(m)
    pan = t.class_id("pancreas tumor", DETECTION)
    assert out[0, 0, 0] == pan and out[1, 1, 1] == pan
    assert out.shape == m.shape
    assert (t.merge_labelmap(np.zeros((3, 3, 3), np.uint8)) == 0).all()


def test_merge_rejects_invalid_labels():
    t = toy_taxonomy()
    with pytest.raises(ValueError):
        t.merge_labelmap(np.full((2, 2, 2), 99, np.uint8))


def _loop_merge(t: Taxonomy, m):
    det = t.detection_classes
    out = np.empty_like(m)
    for idx in np.ndindex(m.shape):
        name = t.diagnosis_classes[m[idx]]
        out[idx] = det.index(t.merge_map.get(name, name))
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_merge_matches_per_voxel_loop(seed):
    t = clinical_taxonomy()
    m = np.random.default_rng(seed).integers(0, t.n_diagnosis, (5, 4, 3)).astype(np.uint8)
    np.testing.assert_array_equal(t.merge_labelmap(m), _loop_merge(t, m))


def test_merge_is_identity_on_shared_and_background():
    t = clinical_taxonomy()
    m = np.arange(len(t.shared) + 1, dtype=np.uint8).reshape(1, 1, -1)
    np.testing.assert_array_equal(t.merge_labelmap(m), m)


def test_serialization_is_deterministic_and_round_trips():
    a, b = build_taxonomy(CLINICAL_CONFIG), build_taxonomy(CLINICAL_CONFIG)
    assert a.to_json() == b.to_json()
    assert a.digest == b.digest
    c = Taxonomy.from_json(a.to_json())
    assert c.to_json() == a.to_json()
    assert c.detection_classes == a.detection_classes
    assert build_taxonomy(TOY_CONFIG).digest != a.digest
