import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.linear_model import LogisticRegression

from cvss_predict.classifier import (CvssEmbeddingClassifier, IllegalLabel, ModelBundle,
                                     SoftmaxRegression, loss_and_grad, predict_component,
                                     predict_embeddings, predict_vector_embeddings,
                                     softmax_proba, train_component)
from cvss_predict.cvss import COMPONENTS, LABELS, CvssVector, enumerate_all_vectors
from cvss_predict.embeddings import DimensionMismatch, FeatureLayout
from synthetic import gaussian_blobs


def numeric_grad(W, X, y, l2, eps=1e-6):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        up, down = W.copy(), W.copy()
        up[idx] += eps
        down[idx] -= eps
        g[idx] = (loss_and_grad(up, X, y, l2)[0] - loss_and_grad(down, X, y, l2)[0]) / (2 * eps)
    return g


class TestLoss:
    @pytest.mark.parametrize("case", range(24))
    def test_gradient_matches_finite_differences(self, case):
        rng = np.random.default_rng(case)
        n, d, k = rng.integers(3, 12), rng.integers(1, 6), rng.integers(2, 5)
        X = rng.standard_normal((n, d))
        y = rng.integers(0, k, size=n)
        W = rng.standard_normal((k, d + 1))
        l2 = [0.0, 1e-3, 0.1][case % 3]
        _, g = loss_and_grad(W, X, y, l2)
        num = numeric_grad(W, X, y, l2)
        assert np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12) < 1e-4

    def test_zero_weights_balanced_two_class(self):
        X = np.array([[1.0, 2.0], [-1.0, 0.5], [3.0, 3.0], [0.0, -2.0]])
        loss, _ = loss_and_grad(np.zeros((2, 3)), X, [0, 1, 0, 1], l2=0.5)
        assert abs(loss - math.log(2)) < 1e-12

    def test_l2_term(self):
        rng = np.random.default_rng(0)
        X, y, W = rng.standard_normal((6, 3)), rng.integers(0, 3, 6), rng.standard_normal((3, 4))
        plain, g0 = loss_and_grad(W, X, y, 0.0)
        reg, g1 = loss_and_grad(W, X, y, 0.3)
        assert reg - plain == pytest.approx(0.3 * np.sum(W[:, :-1] ** 2), abs=1e-12)
        assert np.allclose(g1 - g0, np.hstack([0.6 * W[:, :-1], np.zeros((3, 1))]))

    def test_probabilities_valid(self):
        rng = np.random.default_rng(1)
        p = softmax_proba(rng.standard_normal((4, 6)) * 50, rng.standard_normal((30, 5)) * 50)
        assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1, atol=1e-9)


class TestSoftmaxRegression:
    def test_gaussian_accuracy_and_determinism(self):
        Xtr, ytr, Xte, yte = gaussian_blobs(seed=0)
        a = SoftmaxRegression(seed=11, epochs=50).fit(Xtr, ytr)
        b = SoftmaxRegression(seed=11, epochs=50).fit(Xtr, ytr)
        assert a.score(Xte, yte) >= 0.95
        assert a.coef_.tobytes() == b.coef_.tobytes()

    def test_comparable_to_sklearn(self):
        Xtr, ytr, Xte, yte = gaussian_blobs(seed=3)
        ours = SoftmaxRegression(epochs=50).fit(Xtr, ytr).score(Xte, yte)
        ref = LogisticRegression(max_iter=1000).fit(Xtr, ytr).score(Xte, yte)
        assert ours >= ref - 0.02

    def test_loss_monotone(self):
        Xtr, ytr, _, _ = gaussian_blobs(n_train=200, seed=4)
        clf = SoftmaxRegression(lr=20.0, l2=0.05, epochs=40, batch_size=16).fit(Xtr, ytr)
        h = clf.loss_history_
        assert len(h) == 41
        assert all(b <= a for a, b in zip(h, h[1:]))
        assert clf.final_lr_ < 20.0  # the big step size forced at least one revert

    def test_permutation_reaches_same_optimum(self):
        Xtr, ytr, _, _ = gaussian_blobs(n_train=120, seed=1)
        Xtr = Xtr * 0.3
        params = dict(l2=1e-2, lr=0.5, epochs=800, batch_size=len(ytr), seed=0)
        a = SoftmaxRegression(**params).fit(Xtr, ytr)
        p = np.random.default_rng(5).permutation(len(ytr))
        b = SoftmaxRegression(**params).fit(Xtr[p], ytr[p])
        assert abs(a.final_loss_ - b.final_loss_) < 1e-6

    def test_degenerate(self):
        X = np.random.default_rng(0).standard_normal((5, 3))
        clf = train_component(X, ["N"] * 5, "AV")
        assert clf.degenerate_
        label, proba = predict_component(clf, np.full(3, 100.0))
        assert label == "N" and proba.tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_tie_goes_to_earlier_class(self):
        clf = train_component(np.eye(2), ["N", "L"], "AV")
        clf.coef_ = np.zeros_like(clf.coef_)
        clf.coef_[3, -1] = clf.coef_[2, -1] = 1.0  # L and P tie (order N, A, L, P)
        label, proba = predict_component(clf, [0.3, 0.7])
        assert label == "L"
        assert proba.sum() == pytest.approx(1, abs=1e-9)

    def test_fixed_class_order(self):
        clf = train_component(np.eye(3), ["H", "N", "H"], "PR")
        assert list(clf.classes_) == list(LABELS["PR"])

    def test_illegal_label(self):
        with pytest.raises(IllegalLabel):
            train_component(np.eye(2), ["N", "Q"], "AV")

    def test_width_mismatch(self):
        clf = SoftmaxRegression(epochs=2).fit(np.eye(3), ["a", "b", "c"])
        with pytest.raises(DimensionMismatch):
            clf.predict(np.zeros((1, 4)))

    def test_balanced_weights(self):
        X = np.vstack([np.zeros((18, 1)), np.ones((2, 1))])
        y = ["N"] * 18 + ["H"] * 2
        plain = SoftmaxRegression(epochs=20, class_weight=None).fit(X, y)
        balanced = SoftmaxRegression(epochs=20, class_weight="balanced").fit(X, y)
        assert balanced.predict_proba([[1.0]])[0, 0] > plain.predict_proba([[1.0]])[0, 0]

    def test_sklearn_protocol(self):
        clf = SoftmaxRegression(l2=0.5, epochs=3)
        assert clone(clf).get_params() == clf.get_params()
        assert clf.set_params(lr=0.01).lr == 0.01

    def test_json_round_trip(self):
        Xtr, ytr, Xte, _ = gaussian_blobs(n_train=90, seed=2)
        clf = SoftmaxRegression(epochs=10).fit(Xtr, ytr)
        back = SoftmaxRegression.from_json(clf.to_json())
        assert np.array_equal(back.predict_proba(Xte), clf.predict_proba(Xte))


def vector_dataset(n=160, seed=0):
    """Features that encode each label as a one-hot block, with noise."""
    rng = np.random.default_rng(seed)
    pool = list(enumerate_all_vectors())
    vectors = [pool[i] for i in rng.integers(0, len(pool), n)]
    width = sum(len(LABELS[c]) for c in COMPONENTS)
    X = np.zeros((n, width))
    for row, v in enumerate(vectors):
        offset = 0
        for c in COMPONENTS:
            X[row, offset + LABELS[c].index(v[c])] = 3.0
            offset += len(LABELS[c])
    return X + 0.3 * rng.standard_normal(X.shape), vectors


class TestEmbeddingClassifier:
    def test_fit_predict(self):
        X, vectors = vector_dataset()
        model = CvssEmbeddingClassifier(SoftmaxRegression(epochs=60)).fit(X[:120], vectors[:120])
        assert model.score(X[120:], vectors[120:]) >= 0.95
        assert isinstance(model.predict_vectors(X[:2])[0], CvssVector)
        assert model.predict(X[:5]).shape == (5, 8)

    def test_other_base_estimator(self):
        X, vectors = vector_dataset()
        model = CvssEmbeddingClassifier(LogisticRegression(max_iter=500)).fit(X, vectors)
        assert model.score(X, vectors) > 0.9

    def test_bundle_round_trip(self, tmp_path):
        X, vectors = vector_dataset(80)
        model = CvssEmbeddingClassifier(SoftmaxRegression(epochs=20)).fit(X, vectors)
        layout = FeatureLayout((("description", 0, X.shape[1]),))
        bundle = ModelBundle(model, layout, "mini", "desc", {"n_train": 80})
        bundle.save(tmp_path / "a.json")
        loaded = ModelBundle.load(tmp_path / "a.json")
        assert np.array_equal(loaded.model.predict(X), model.predict(X))
        loaded.save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_retrain_is_byte_identical(self, tmp_path):
        X, vectors = vector_dataset(80)
        layout = FeatureLayout((("description", 0, X.shape[1]),))
        for name in ("a", "b"):
            model = CvssEmbeddingClassifier(SoftmaxRegression(epochs=20, seed=9)).fit(X, vectors)
            ModelBundle(model, layout, "mini", "desc").save(tmp_path / f"{name}.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_bundle_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            ModelBundle.load(tmp_path / "x.json")

    def test_predict_helpers(self):
        X, vectors = vector_dataset(80)
        model = CvssEmbeddingClassifier(SoftmaxRegression(epochs=30)).fit(X, vectors)
        bundle = ModelBundle(model, FeatureLayout((("description", 0, X.shape[1]),)), "m", "desc")
        one = predict_vector_embeddings(bundle, "CVE-1", X[0])
        many = predict_embeddings(bundle, ["CVE-1", "CVE-2"], X[:2])
        assert one == many[0]
        assert all(one[c].provenance == "embedding" for c in COMPONENTS)
        with pytest.raises(DimensionMismatch):
            predict_vector_embeddings(bundle, "CVE-1", X[0, :-1])
