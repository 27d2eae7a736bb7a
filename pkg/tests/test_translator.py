"""DSL translation and similar-case query building."""

from __future__ import annotations

import pytest

from mammofed.query import And, Cmp, DerivedCmp, normalize
from mammofed.records import PatientRecord
from mammofed.translator import (CHILDREN_BANDS, CriteriaError, DslParseError,
                                 ImageMatchCriteria, SimilarityCriteria, TermDictionary,
                                 TranslationError, build_similarity_query, children_band,
                                 load_default_dictionary, translate)

DICT = load_default_dictionary()


def conjuncts(q) -> list:
    assert isinstance(q.predicate, And)
    return list(q.predicate.children)


def test_age_band_query_shape():
    q = translate("find images where age between 50 and 55", DICT, "A")
    assert q.target == "images"
    assert q.predicate == Cmp("patient.age_years", "between", (50, 55))
    assert q.scope.hop_budget == 1
    assert q.projection is None


def test_hrt_query_shape():
    q = translate("find images where age over 50 and HRT = true", DICT, "A")
    assert q.predicate == And((Cmp("patient.age_years", ">", 50),
                               Cmp("patient.hrt", "=", True)))


def test_multiword_term_resolves():
    q = translate("find patients where HRT treatment = true", DICT, "A")
    assert q.predicate == Cmp("patient.hrt", "=", True)


def test_unknown_term_is_named_in_the_error():
    with pytest.raises(TranslationError, match='unknown term "bogus"'):
        translate("find images where bogus = 1", DICT, "A")


def test_grammar_error_carries_position():
    with pytest.raises(DslParseError) as err:
        translate("find images where age between 50", DICT, "A")
    assert err.value.pos == len("find images where age between 50")
    with pytest.raises(DslParseError):
        translate("images where age > 5", DICT, "A")


def test_local_keyword_sets_hop_zero():
    q = translate("find patients local where age > 40", DICT, "A")
    assert q.scope.hop_budget == 0
    assert q.scope.origin_site == "A"


def test_or_and_parentheses():
    q = translate('find images where (view = MLO or view = CC) and density > 0.5',
                  DICT, "A")
    top = q.predicate
    assert isinstance(top, And)
    assert top.children[1] == Cmp("image.mean_density", ">", 0.5)


def test_and_binds_tighter_than_or():
    q = translate("find patients where age > 60 or age < 40 and HRT = true", DICT, "A")
    # or(a, and(b, c))
    assert q.predicate.__class__.__name__ == "Or"
    assert q.predicate.children[1] == And((Cmp("patient.age_years", "<", 40),
                                           Cmp("patient.hrt", "=", True)))


def test_like_image_clause():
    q = translate("find images where similar like image I1 threshold 0.8 in MLO",
                  DICT, "A")
    assert q.predicate == DerivedCmp("find_one_like_it",
                                     {"reference": "I1", "views": ["MLO"]}, ">=", 0.8)
    q2 = translate("find images where find one like it like image I1 threshold 0.8",
                   DICT, "A")
    assert q2.predicate == DerivedCmp("find_one_like_it",
                                      {"reference": "I1", "views": ["CC", "MLO"]},
                                      ">=", 0.8)


def test_provider_threshold_comparison():
    q = translate("find studies where asymmetry > 0.2", DICT, "A")
    assert q.predicate == DerivedCmp("density_asymmetry", {}, ">", 0.2)


def test_string_and_date_literals():
    q = translate('find studies where diagnosis = cancer and study date > "2003-01-01"',
                  DICT, "A")
    assert Cmp("study.study_date", ">", "2003-01-01") in q.predicate.children


def test_translation_is_deterministic():
    text = "find images where age between 50 and 55 and HRT = true"
    a = normalize(translate(text, DICT, "A"))
    b = normalize(translate(text, DICT, "A"))
    assert a == b


def test_dictionary_conflicts_are_rejected():
    d = TermDictionary()
    d.add("age", "attribute", "patient.age_years")
    d.add("AGE", "attribute", "patient.age_years")  # same mapping is fine
    with pytest.raises(ValueError, match="conflicting"):
        d.add("Age", "provider", "find_one_like_it")
    with pytest.raises(ValueError, match="unknown path"):
        d.add("weird", "attribute", "patient.nope")


def test_default_dictionary_is_versioned():
    assert DICT.version == 1
    assert DICT.resolve("Find One Like It") == ("provider", "find_one_like_it")


# -- similar-case builder --

REF = PatientRecord("P1", 52, 2, 24, 28, True, None, "A")


def test_age_band_criterion():
    q = build_similarity_query(REF, SimilarityCriteria(age_band=3), "A")
    cs = conjuncts(q)
    assert Cmp("patient.age_years", "between", (49, 55)) in cs
    assert Cmp("patient.patient_id", "!=", "P1") in cs
    assert q.target == "patients"


def test_children_band_criterion():
    q = build_similarity_query(REF, SimilarityCriteria(match_children_band=True), "A")
    assert Cmp("patient.children_count", "between", (1, 2)) in conjuncts(q)

    none = PatientRecord("P2", 40, 0, None, None, False, None, "A")
    q0 = build_similarity_query(none, SimilarityCriteria(match_children_band=True), "A")
    assert Cmp("patient.children_count", "=", 0) in conjuncts(q0)

    many = PatientRecord("P3", 40, 7, 20, 30, False, None, "A")
    q7 = build_similarity_query(many, SimilarityCriteria(match_children_band=True), "A")
    assert Cmp("patient.children_count", ">=", 5) in conjuncts(q7)


def test_children_bands_partition_the_counts():
    for count in range(0, 1000):
        bands = [b for b in CHILDREN_BANDS
                 if count >= b[0] and (b[1] is None or count <= b[1])]
        assert len(bands) == 1
        assert children_band(count) == bands[0]


def test_image_match_criterion_switches_target_to_images():
    crit = SimilarityCriteria(image_match=ImageMatchCriteria("I1", 0.8, ("MLO",)))
    q = build_similarity_query(REF, crit, "A")
    assert q.target == "images"
    assert DerivedCmp("find_one_like_it", {"reference": "I1", "views": ["MLO"]},
                      ">=", 0.8) in conjuncts(q)


def test_pregnancy_band_requires_reference_fields():
    crit = SimilarityCriteria(match_pregnancy_ages_band=2)
    q = build_similarity_query(REF, crit, "A")
    assert Cmp("patient.age_first_pregnancy", "between", (22, 26)) in conjuncts(q)
    assert Cmp("patient.age_last_pregnancy", "between", (26, 30)) in conjuncts(q)

    childless = PatientRecord("P4", 45, 0, None, None, False, None, "A")
    with pytest.raises(CriteriaError):
        build_similarity_query(childless, crit, "A")


def test_bad_thresholds_and_views_are_rejected():
    with pytest.raises(CriteriaError):
        build_similarity_query(
            REF, SimilarityCriteria(image_match=ImageMatchCriteria("I1", 1.5)), "A")
    with pytest.raises(CriteriaError):
        build_similarity_query(
            REF, SimilarityCriteria(image_match=ImageMatchCriteria("I1", 0.5, ("XX",))), "A")
