import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from oracles import anova_bruteforce, chi2_bruteforce
from weakindex.features import (FeatureKind, FeatureMatrix, FeatureSpace, Method, SelectionError,
                                SelectorConfig, apply_tfidf, build_features, fit_idf,
                                score_features, select_top_k, selection_report, tfidf, tokenize)
from weakindex.ingest import Article, Corpus
from weakindex.recognizer import ConceptOccurrence, Source, build_dictionary, recognize_corpus
from weakindex.weaklabel import LabelKind, LabelMatrix, assign_weak_labels


def test_tokenize_examples():
    assert tokenize("Early-onset AD (PS1 mutation)") == ["early", "onset", "ad", "ps1", "mutation"]
    assert tokenize("") == []
    assert tokenize("β-amyloid") == ["β", "amyloid"]
    assert tokenize("a_b c") == ["a", "b", "c"]


def _corpus(texts):
    return Corpus([Article(f"p{i}", t, "", ("D",)) for i, t in enumerate(texts)], "D")


def _occ(pmid, cid):
    return ConceptOccurrence(pmid, cid, "", None, Source.IMPORTED)


def test_lexical_counts_and_binary_semantics():
    c = _corpus(["familial familial familial disease", "familial", ""])
    occ = [_occ("p0", "FAD")] + [_occ("p1", "X")] * 4
    space, raw = build_features(c, occ, min_token_df=1)
    row0 = raw.rows(["p0"]).values.toarray()[0]
    assert row0[space.index(FeatureKind.LEXICAL, "familial")] == 3
    assert row0[space.index(FeatureKind.SEMANTIC, "FAD")] == 1
    assert raw.rows(["p1"]).values.toarray()[0][space.index(FeatureKind.SEMANTIC, "X")] == 1
    assert raw.rows(["p2"]).values.nnz == 0
    assert not raw.weighted


def test_min_token_df_prunes_rare_tokens():
    c = _corpus(["alpha beta", "alpha gamma", "alpha"])
    space, _ = build_features(c, [], min_token_df=2)
    assert [f.key for f in space.features] == ["alpha"]


def test_projection_onto_existing_space():
    space, _ = build_features(_corpus(["alpha beta", "beta"]), [_occ("p0", "C")], 1)
    _, raw = build_features(_corpus(["beta delta beta"]), [_occ("p0", "Z")], space=space)
    assert raw.space == space
    assert raw.values.toarray().tolist() == [[0, 2, 0]]


def _raw(rows):
    space = FeatureSpace.from_keys([f"t{j}" for j in range(len(rows[0]))], [])
    return FeatureMatrix([f"p{i}" for i in range(len(rows))], space, sp.csr_matrix(np.array(rows, float)))


def test_tfidf_examples():
    assert tfidf(_raw([[1.0]])).values.toarray().tolist() == [[1.0]]
    assert fit_idf(_raw([[1, 0], [2, 0], [1, 1]]))[0] == 1.0
    w = tfidf(_raw([[3, 1], [1, 1]])).values.toarray()[0]
    np.testing.assert_allclose(w, np.array([3, 1]) / math.sqrt(10), rtol=1e-12)


def test_idf_formula():
    raw = _raw([[1, 0, 0], [1, 1, 0], [1, 0, 0], [0, 0, 0]])
    np.testing.assert_allclose(fit_idf(raw), [math.log(5 / 4) + 1, math.log(5 / 2) + 1, math.log(5) + 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_weighted_rows_unit_norm(seed):
    rng = np.random.default_rng(seed)
    dense = rng.integers(0, 4, (15, 8)) * (rng.random((15, 8)) < 0.4)
    w = tfidf(_raw(dense.tolist())).values.toarray()
    norms = np.linalg.norm(w, axis=1)
    nonzero = dense.any(axis=1)
    np.testing.assert_allclose(norms[nonzero], 1.0, atol=1e-9)
    assert np.all(norms[~nonzero] == 0)
    assert np.all(w >= 0)


def test_tfidf_rejects_weighted_input():
    with pytest.raises(ValueError):
        tfidf(tfidf(_raw([[1.0]])))


def _labels(ys, name="y"):
    ys = np.asarray(ys).reshape(-1, 1)
    return LabelMatrix([f"p{i}" for i in range(len(ys))], [name], ys, LabelKind.WEAK)


def test_chi2_constructed_case():
    s = score_features(_raw([[1], [1], [0], [0]]), _labels([1, 1, 0, 0]), ["y"], Method.CHI2)
    assert s.values[0, 0] == 2.0


def test_anova_constructed_cases():
    s = score_features(_raw([[1], [1], [0], [0]]), _labels([1, 1, 0, 0]), ["y"], Method.ANOVA_F)
    assert s.values[0, 0] == math.inf
    s = score_features(_raw([[2], [1], [2], [1]]), _labels([1, 1, 0, 0]), ["y"], Method.ANOVA_F)
    assert s.values[0, 0] == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_scores_match_bruteforce(seed):
    rng = np.random.default_rng(seed)
    dense = rng.random((20, 10)) * (rng.random((20, 10)) < 0.6)
    y = rng.integers(0, 2, 20)
    y[:2] = [0, 1]
    raw = _raw(dense.tolist())
    labels = _labels(y)
    chi = score_features(raw, labels, ["y"], Method.CHI2).values[:, 0]
    f = score_features(raw, labels, ["y"], Method.ANOVA_F).values[:, 0]
    for j in range(10):
        col = dense[:, j].tolist()
        assert chi[j] == pytest.approx(chi2_bruteforce(col, y.tolist()), rel=1e-9, abs=1e-12)
        assert f[j] == pytest.approx(anova_bruteforce(col, y.tolist()), rel=1e-9, abs=1e-12)


def test_single_class_label_is_degenerate():
    s = score_features(_raw([[1], [0], [1]]), _labels([1, 1, 1]), ["y"], Method.CHI2)
    assert s.degenerate_labels == ["y"]
    assert s.values[0, 0] == 0.0


def _scored(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    noise = rng.random((n, 5))
    dense = np.column_stack([noise, y])
    space = FeatureSpace.from_keys([f"t{j}" for j in range(5)], ["C1"])
    m = FeatureMatrix([f"p{i}" for i in range(n)], space, sp.csr_matrix(dense))
    return m, _labels(y, "C1"), space


def test_k1_picks_label_copy(ad):
    m, labels, space = _scored()
    for method in Method:
        s = score_features(m, labels, ["C1"], method)
        assert select_top_k(s, SelectorConfig(method, 1), space, ad) == [5]


def test_exclusion_and_lexical_only(ad):
    space = FeatureSpace.from_keys(["a", "b"], ["PD", "C0001"])
    from weakindex.features import FeatureScores
    scores = FeatureScores(Method.CHI2, ["PD"], np.array([[1.0], [2.0], [9.0], [8.0]]))
    assert select_top_k(scores, SelectorConfig(Method.CHI2, 2), space, ad) == [2, 3]
    assert select_top_k(scores, SelectorConfig(Method.CHI2, 2, exclude_ct_concepts=True),
                        space, ad) == [3, 1]
    assert select_top_k(scores, SelectorConfig(Method.CHI2, 2, lexical_only=True),
                        space, ad) == [1, 0]
    with pytest.raises(SelectionError):
        select_top_k(scores, SelectorConfig(Method.CHI2, 4, exclude_ct_concepts=True), space, ad)


def test_ties_broken_by_id_and_inf_first(ad):
    from weakindex.features import FeatureScores
    space = FeatureSpace.from_keys(["a", "b", "c", "d"], [])
    scores = FeatureScores(Method.ANOVA_F, ["x", "y"],
                           np.array([[1.0, 3.0], [3.0, 0.0], [0.0, np.inf], [3.0, 2.0]]))
    assert select_top_k(scores, SelectorConfig(Method.ANOVA_F, 4), space, ad) == [2, 0, 1, 3]
    per = select_top_k(scores, SelectorConfig(Method.ANOVA_F, 3, scope="per_label"), space, ad)
    assert per == [1, 2, 3]


def test_semantic_feature_equals_weak_label_column(ad):
    texts = ["presenile dementia study", "familial alzheimer disease and late onset alzheimer disease",
             "nothing", "early onset alzheimer disease cases", "alzheimer disease"]
    c = Corpus([Article(f"p{i}", t, "", ("D000544",)) for i, t in enumerate(texts)], "D000544")
    occ = recognize_corpus(c, build_dictionary(ad))
    weak = assign_weak_labels(c, occ, ad)
    space, raw = build_features(c, occ, min_token_df=1)
    for cid in ad.concept_ids:
        j = space.index(FeatureKind.SEMANTIC, cid)
        col = raw.values[:, j].toarray().ravel() if j is not None else np.zeros(len(texts))
        assert col.tolist() == weak.column(cid).tolist()


def test_ad_like_ranking_puts_concept_features_first(ad):
    # concept features equal the weak labels, so they separate perfectly
    rng = np.random.default_rng(5)
    n = 400
    targets = ["PD", "FAD", "EOAD", "LOAD"]
    y = (rng.random((n, 4)) < 0.2).astype(np.uint8)
    tokens = rng.poisson(0.5, (n, 40))
    space = FeatureSpace.from_keys([f"w{j:02d}" for j in range(40)], ["AD", *targets])
    dense = np.column_stack([tokens, rng.integers(0, 2, n), y])
    raw = FeatureMatrix([f"p{i}" for i in range(n)], space, sp.csr_matrix(dense.astype(float)))
    labels = LabelMatrix(raw.pmids, targets, y, LabelKind.WEAK)
    s = score_features(tfidf(raw), labels, targets, Method.ANOVA_F)
    top = select_top_k(s, SelectorConfig(Method.ANOVA_F, 30), space, ad)
    assert {space.features[f].key for f in top[:4]} == set(targets)
    assert all(space.features[f].kind is FeatureKind.SEMANTIC for f in top[:4])
    excl = select_top_k(s, SelectorConfig(Method.ANOVA_F, 30, exclude_ct_concepts=True), space, ad)
    assert not {space.features[f].key for f in excl if space.features[f].kind is FeatureKind.SEMANTIC} & set(ad.concept_ids)
    assert top == select_top_k(s, SelectorConfig(Method.ANOVA_F, 30), space, ad)


def test_selection_report_shape(ad):
    m, labels, space = _scored()
    s = score_features(m, labels, ["C1"], Method.ANOVA_F)
    ids = select_top_k(s, SelectorConfig(Method.ANOVA_F, 2), space, ad)
    lines = selection_report(s, ids, space).splitlines()
    assert lines[0] == "rank,kind,key,C1,aggregate"
    assert lines[1].startswith("1,S,C1,inf,inf")


def test_space_and_matrix_persistence(tmp_path):
    space, raw = build_features(_corpus(["alpha beta", "beta β"]), [_occ("p1", "C")], 1)
    raw.save(tmp_path / "m.npz")
    back = FeatureMatrix.load(tmp_path / "m.npz")
    assert back.space == space and back.pmids == raw.pmids
    assert (back.values != raw.values).nnz == 0
    assert FeatureSpace.from_json(space.to_json()).digest() == space.digest()


def test_columns_requires_raw():
    w = tfidf(_raw([[1, 2]]))
    with pytest.raises(ValueError):
        w.columns([0])
    sub = _raw([[1, 2, 3]]).columns([2, 0])
    assert [f.key for f in sub.space.features] == ["t2", "t0"]
    assert sub.values.toarray().tolist() == [[3, 1]]
    assert apply_tfidf(sub, np.ones(2)).weighted
