import json
import math

import numpy as np
import pytest
import scipy.sparse as sp

from helpers import labels, matrix, redundant_feature_data
from oracles import central_difference
from weakindex.learn import (BinaryModel, Classifier, OvrModel, Penalty, SpaceMismatchError,
                             TrainConfig, TrainingError, label_seed, loss_gradient, predict,
                             relabel_and_retrain, train)
from weakindex.learn.linear import fit_linear, objective, soft_threshold
from weakindex.learn.tree import Tree, build_forest, build_tree, forest_predict


# -- objective and gradient ------------------------------------------------------

def test_log_loss_at_zero_is_n_ln2():
    X = sp.csr_matrix(np.random.default_rng(0).random((8, 3)))
    y = np.array([0, 1] * 4)
    value, _ = loss_gradient(np.zeros(3), 0.0, X, y, loss="log", penalty="l2", C=1.0)
    assert value == pytest.approx(8 * math.log(2), rel=1e-12)


def test_penalty_only_gradient_is_w():
    X = sp.csr_matrix(np.ones((3, 2)))
    w = np.array([0.3, -1.2])
    _, g = loss_gradient(w, 0.0, X, [0, 1, 1], loss="log", penalty="l2", C=1e-300)
    np.testing.assert_allclose(g[:2], w, rtol=1e-12)


@pytest.mark.parametrize("loss", ["log", "hinge"])
def test_gradient_matches_finite_differences(loss):
    rng = np.random.default_rng(11)
    for _ in range(20):
        n, d = int(rng.integers(2, 21)), int(rng.integers(1, 11))
        X = sp.csr_matrix(rng.normal(size=(n, d)))
        y = rng.integers(0, 2, n)
        x = rng.normal(size=d + 1)
        C = float(rng.uniform(0.1, 5))

        def f(v):
            return loss_gradient(np.array(v[:d]), v[d], X, y, loss=loss, penalty="l2", C=C)[0]

        _, g = loss_gradient(x[:d], x[d], X, y, loss=loss, penalty="l2", C=C)
        fd = np.array(central_difference(f, list(x)))
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6)


def test_l1_gradient_excludes_penalty():
    rng = np.random.default_rng(2)
    X = sp.csr_matrix(rng.normal(size=(6, 3)))
    y = np.array([0, 1, 0, 1, 1, 0])
    w = np.array([0.5, -0.2, 0.1])
    v1, g1 = loss_gradient(w, 0.1, X, y, loss="log", penalty="l1", C=2.0)
    v0, g0 = loss_gradient(w, 0.1, X, y, loss="log", penalty="l2", C=2.0)
    np.testing.assert_allclose(g1[:3], g0[:3] - w)
    assert v1 - (v0 - 0.5 * w @ w) == pytest.approx(np.abs(w).sum())


def test_gradient_accepts_train_config():
    X = sp.csr_matrix(np.eye(2))
    cfg = TrainConfig(Classifier.LINEAR_SVM, Penalty.L2, 3.0, seed=0)
    assert loss_gradient(np.zeros(2), 0.0, X, [0, 1], cfg)[0] == pytest.approx(6.0)


def test_soft_threshold():
    np.testing.assert_allclose(soft_threshold(np.array([-2.0, -0.5, 0.5, 3.0]), 1.0), [-1, 0, 0, 2])


# -- linear fits ------------------------------------------------------------------

@pytest.mark.parametrize("classifier", [Classifier.LOGREG, Classifier.LINEAR_SVM])
@pytest.mark.parametrize("penalty", [Penalty.L1, Penalty.L2])
def test_separable_pair(classifier, penalty):
    X = sp.csr_matrix(np.array([[1.0], [-1.0]]))
    fit = fit_linear(X, [1, 0], "hinge" if classifier is Classifier.LINEAR_SVM else "log",
                     penalty.value, 10.0)
    pred = (X @ fit.weights + fit.intercept >= 0).astype(int)
    assert pred.tolist() == [1, 0]


def test_objective_not_worse_than_zero():
    rng = np.random.default_rng(4)
    for loss in ("log", "hinge"):
        for penalty in ("l1", "l2"):
            X = sp.csr_matrix(rng.random((40, 6)))
            y = rng.integers(0, 2, 40)
            fit = fit_linear(X, y, loss, penalty, 0.7)
            assert fit.objective <= objective(np.zeros(6), 0.0, X, y, loss, penalty, 0.7) + 1e-12


def test_l2_matches_reference_optimum():
    # the optimum of a strongly convex problem is unique; compare against a tight scipy solve
    import scipy.optimize
    rng = np.random.default_rng(9)
    X = sp.csr_matrix(rng.normal(size=(50, 4)))
    y = rng.integers(0, 2, 50)

    def f(v):
        val, g = loss_gradient(v[:4], v[4], X, y, loss="log", penalty="l2", C=2.0)
        return val, g

    ref = scipy.optimize.minimize(f, np.zeros(5), jac=True, method="BFGS", options={"gtol": 1e-10})
    fit = fit_linear(X, y, "log", "l2", 2.0)
    np.testing.assert_allclose(np.append(fit.weights, fit.intercept), ref.x, atol=1e-5)


def test_l2_norm_nondecreasing_in_c():
    m, lab = redundant_feature_data(3, n=300)
    y = lab.column("C1")
    norms = [np.linalg.norm(fit_linear(m.values, y, "log", "l2", C).weights)
             for C in (0.01, 0.15, 1, 10)]
    assert all(a <= b + 1e-9 for a, b in zip(norms, norms[1:]))


def test_tiny_c_collapses_to_intercept_class():
    m, lab = redundant_feature_data(1, n=300)
    y = lab.column("C1")
    fit = fit_linear(m.values, y, "log", "l2", 1e-6)
    assert np.linalg.norm(fit.weights) < 1e-4
    pred = (m.values @ fit.weights + fit.intercept >= 0)
    assert pred.all() or not pred.any()


def test_l1_concentrates_on_concept_feature():
    m, lab = redundant_feature_data(0)
    y = lab.column("C1")
    w1 = np.abs(fit_linear(m.values, y, "log", "l1", 1.0).weights)
    w2 = np.abs(fit_linear(m.values, y, "log", "l2", 1.0).weights)
    assert w1[-1] / w1.sum() >= 0.9
    assert w2[-1] / w2.sum() < 0.5


# -- one-vs-rest ------------------------------------------------------------------

def _multi(seed=0, n=120):
    rng = np.random.default_rng(seed)
    Y = (rng.random((n, 3)) < 0.4).astype(int)
    Y[0] = 0
    Y[1] = 1
    X = np.column_stack([Y + 0.3 * rng.random((n, 3)), rng.random((n, 4))])
    m = matrix(X)
    return m, labels({"A": Y[:, 0], "B": Y[:, 1], "C": Y[:, 2]}, m.pmids)


CONFIGS = [TrainConfig(Classifier.LOGREG, Penalty.L2, 1.0, seed=0),
           TrainConfig(Classifier.LOGREG, Penalty.L1, 1.0, seed=0),
           TrainConfig(Classifier.LINEAR_SVM, Penalty.L2, 1.0, seed=0),
           TrainConfig(Classifier.DECISION_TREE, seed=0),
           TrainConfig(Classifier.RANDOM_FOREST, n_trees=7, seed=3)]


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: c.classifier.value + c.penalty.value)
def test_training_is_deterministic_and_order_independent(cfg):
    m, y = _multi()
    a = train(m, y, ["A", "B", "C"], cfg)
    b = train(m, y, ["A", "B", "C"], cfg)
    assert a.dumps() == b.dumps()
    c = train(m, y, ["C", "A", "B"], cfg, workers=3)
    for t in "ABC":
        assert json.dumps(a.model(t).to_json()) == json.dumps(c.model(t).to_json())
    pred = predict(a, m)
    assert pred.label_ids == ["A", "B", "C"]


def test_model_round_trip(tmp_path):
    m, y = _multi()
    for cfg in CONFIGS:
        model = train(m, y, ["A", "B"], cfg)
        model.save(tmp_path / "m.json")
        back = OvrModel.load(tmp_path / "m.json")
        assert back.dumps() == model.dumps()
        assert predict(back, m) == predict(model, m)


def test_sparse_weights_serialized_sparsely():
    bm = BinaryModel("A", np.array([0.0, 0.0, 0.0, 1.5]), 0.2)
    obj = bm.to_json()
    assert obj["weights"] == {"size": 4, "indices": [3], "values": [1.5]}
    assert np.array_equal(BinaryModel.from_json(obj).weights, bm.weights)


def test_single_class_label_rejected():
    m, y = _multi()
    y2 = labels({"A": y.column("A"), "Z": np.zeros(len(m.pmids), int)}, m.pmids)
    with pytest.raises(TrainingError) as e:
        train(m, y2, ["A", "Z"], CONFIGS[0])
    assert e.value.labels == ["Z"]


def test_space_mismatch_is_hard_error():
    m, y = _multi()
    model = train(m, y, ["A"], CONFIGS[0])
    other = matrix(np.ones((2, 8)))
    with pytest.raises(SpaceMismatchError):
        predict(model, other)


def test_zero_row_with_negative_intercept_predicts_nothing():
    m = matrix([[0.0, 0.0]])
    bm = BinaryModel("A", np.array([1.0, 2.0]), -0.5)
    model = OvrModel(["A"], [bm], m.space, CONFIGS[0])
    assert predict(model, m).cells.tolist() == [[0]]


def test_nonconvergence_is_a_warning():
    m, y = _multi()
    model = train(m, y, ["A"], TrainConfig(Classifier.LOGREG, Penalty.L1, 50.0, seed=0, max_iters=2))
    assert model.warnings and "without converging" in model.warnings[0]


def test_label_seed_is_order_free():
    assert label_seed(1, "A").random() == label_seed(1, "A").random()
    assert label_seed(1, "A").random() != label_seed(1, "B").random()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(C=0)
    with pytest.raises(ValueError):
        TrainConfig(n_trees=0)
    cfg = TrainConfig.from_json(CONFIGS[4].to_json())
    assert cfg == CONFIGS[4]


# -- trees ------------------------------------------------------------------------

def _gini_split_bruteforce(X, y):
    best = None
    n = len(y)
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f]))
        for a, b in zip(vals, vals[1:]):
            thr = (a + b) / 2
            left = y[X[:, f] <= thr]
            right = y[X[:, f] > thr]
            imp = sum(len(s) * 2 * s.mean() * (1 - s.mean()) for s in (left, right))
            if best is None or imp < best[0] - 1e-12:
                best = (imp, f, thr)
    return best


def test_root_split_matches_bruteforce():
    rng = np.random.default_rng(6)
    for _ in range(10):
        X = rng.integers(0, 4, (30, 5)).astype(float)
        y = rng.integers(0, 2, 30)
        tree = build_tree(X, y, max_depth=1)
        ref = _gini_split_bruteforce(X, y)
        if ref is None:
            continue
        assert tree.feature[0] == ref[1]
        assert tree.threshold[0] == pytest.approx(ref[2])


def test_unlimited_tree_fits_training_data():
    rng = np.random.default_rng(7)
    X = rng.random((50, 4))
    y = rng.integers(0, 2, 50)
    assert build_tree(X, y).predict(X).tolist() == y.tolist()


def test_min_leaf_and_depth_respected():
    rng = np.random.default_rng(8)
    X = rng.random((60, 3))
    y = rng.integers(0, 2, 60)
    t = build_tree(X, y, min_leaf=7, max_depth=3)
    leaves = t.feature == -1
    assert t.counts[leaves].sum(axis=1).min() >= 7
    depth = {0: 0}
    for i in range(len(t.feature)):
        if t.feature[i] >= 0:
            depth[t.left[i]] = depth[t.right[i]] = depth[i] + 1
    assert max(depth.values()) <= 3


def test_forest_tie_goes_negative():
    yes = Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([[0, 3]]))
    no = Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([[3, 0]]))
    X = sp.csr_matrix(np.zeros((2, 1)))
    assert forest_predict([yes, no], X).tolist() == [0, 0]
    assert forest_predict([yes, yes, no], X).tolist() == [1, 1]


def test_forest_seeded():
    rng_data = np.random.default_rng(1)
    X = rng_data.random((40, 9))
    y = (X[:, 0] > 0.5).astype(int)
    a = build_forest(X, y, n_trees=5, rng=np.random.default_rng(3))
    b = build_forest(X, y, n_trees=5, rng=np.random.default_rng(3))
    assert [t.to_json() for t in a] == [t.to_json() for t in b]
    assert (forest_predict(a, X) == y).mean() > 0.9


def test_tree_json_round_trip():
    X = np.random.default_rng(2).random((20, 3))
    t = build_tree(X, (X[:, 1] > 0.4).astype(int))
    assert Tree.from_json(json.loads(json.dumps(t.to_json()))).to_json() == t.to_json()


# -- relabel and retrain ----------------------------------------------------------

def test_relabel_fixed_point():
    X = np.array([[1.0, 0], [0.9, 0], [0, 1.0], [0, 0.8]])
    m = matrix(X)
    y = labels({"A": [1, 1, 0, 0]}, m.pmids)
    cfg = CONFIGS[0]
    model = train(m, y, ["A"], cfg)
    res = relabel_and_retrain(model, m, y, cfg)
    assert res.relabeled.cells.tolist() == y.cells.tolist()
    assert res.retrained.dumps() == model.dumps()
    assert res.original_labels == y and res.initial is model


def test_relabel_recovers_planted_false_negatives():
    rng = np.random.default_rng(0)
    n = 300
    truth = (rng.random(n) < 0.4).astype(int)
    cue = truth
    weak = truth.copy()
    missed = np.flatnonzero(truth)[:20]
    weak[missed] = 0
    X = np.column_stack([cue, rng.random((n, 3)) * 0.1]).astype(float)
    m = matrix(X)
    y = labels({"A": weak}, m.pmids)
    cfg = TrainConfig(Classifier.LOGREG, Penalty.L2, 10.0, seed=0)
    res = relabel_and_retrain(train(m, y, ["A"], cfg), m, y, cfg)
    changed = np.flatnonzero(res.relabeled.column("A") != y.column("A"))
    assert sorted(changed.tolist()) == sorted(missed.tolist())


def test_relabel_skips_label_with_empty_prediction():
    m = matrix(np.eye(4))
    y = labels({"A": [1, 0, 0, 0], "B": [1, 1, 0, 0]}, m.pmids)
    cfg = TrainConfig(Classifier.LOGREG, Penalty.L2, 0.01, seed=0)
    model = train(m, y, ["A", "B"], cfg)
    assert not predict(model, m).column("A").any()
    y_b = predict(model, m).column("B")
    if y_b.min() == y_b.max():
        with pytest.raises(TrainingError):
            relabel_and_retrain(model, m, y, cfg)
    else:
        res = relabel_and_retrain(model, m, y, cfg)
        assert res.skipped == ["A"]
        assert res.retrained.label_ids == ["B"]
        assert any("skipped" in w for w in res.retrained.warnings)
