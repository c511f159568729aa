"""Per-component softmax classifiers over embedding features."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cvss import COMPONENTS, LABELS, CvssVector
from .embeddings import DimensionMismatch, FeatureLayout
from .hybrid import ComponentPrediction, PredictedVector

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = "cvss-predict-bundle"
BUNDLE_VERSION = 1


class IllegalLabel(ValueError):
    pass


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _loss_grad(W, Xb, y, l2, sample_weight=None):
    logits = Xb @ W.T
    logits -= logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    log_p = logits - log_norm
    rows = np.arange(Xb.shape[0])
    w = np.ones(Xb.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    total = w.sum()
    loss = -(w * log_p[rows, y]).sum() / total
    resid = np.exp(log_p)
    resid[rows, y] -= 1.0
    grad = (resid * w[:, None]).T @ Xb / total
    core = W[:, :-1]
    loss += l2 * np.sum(core * core)
    grad[:, :-1] += 2.0 * l2 * core
    return loss, grad


def loss_and_grad(W, X, y, l2: float = 0.0, sample_weight=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus ``l2 * ||W||^2`` (bias column excluded) and its gradient.

    ``W`` has shape ``(n_classes, n_features + 1)`` with the bias in the last
    column; ``y`` holds class indices.
    """
    X = np.asarray(X, dtype=float)
    return _loss_grad(np.asarray(W, dtype=float), _augment(X), np.asarray(y), l2, sample_weight)


def softmax_proba(W, X) -> np.ndarray:
    logits = _augment(np.asarray(X, dtype=float)) @ W.T
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


class SoftmaxRegression(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by seeded mini-batch gradient descent.

    Each epoch shuffles with a generator seeded by ``seed``, takes one step per
    batch, then evaluates the full training loss. If the loss went up, the
    epoch is undone and the learning rate halved, so ``loss_history_`` never
    increases.

    ``classes`` fixes the class order (and admits classes absent from the
    training data); ties in :meth:`predict` go to the earlier class. When every
    training label is identical the model is a constant predictor and
    ``degenerate_`` is set.
    """

    def __init__(self, classes=None, l2=1e-4, lr=0.1, epochs=200, batch_size=64, seed=42,
                 class_weight=None):
        self.classes = classes
        self.l2 = l2
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.class_weight = class_weight

    def _sample_weight(self, y_idx):
        if self.class_weight is None:
            return None
        if self.class_weight != "balanced":
            raise ValueError(f"class_weight must be None or 'balanced', got {self.class_weight!r}")
        counts = np.bincount(y_idx, minlength=len(self.classes_))
        present = np.count_nonzero(counts)
        per_class = np.where(counts > 0, len(y_idx) / (present * np.maximum(counts, 1)), 0.0)
        return per_class[y_idx]

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, ensure_min_samples=2)
        if self.classes is not None:
            self.classes_ = np.asarray(self.classes, dtype=object)
        else:
            self.classes_ = np.unique(y).astype(object)
        index = {c: i for i, c in enumerate(self.classes_)}
        bad = sorted({str(v) for v in y if v not in index})
        if bad:
            raise IllegalLabel(f"labels {bad} not in classes {list(self.classes_)}")
        y_idx = np.array([index[v] for v in y])
        n, d = X.shape
        self.n_features_in_ = d
        W = np.zeros((len(self.classes_), d + 1))
        self.degenerate_ = len(np.unique(y_idx)) == 1
        if self.degenerate_:
            self.constant_ = int(y_idx[0])
            self.coef_ = W
            self.loss_history_ = [0.0]
            self.final_loss_ = 0.0
            return self

        Xb = _augment(X)
        sw = self._sample_weight(y_idx)
        rng = np.random.default_rng(self.seed)
        lr = float(self.lr)
        batch = max(1, int(self.batch_size))
        loss, _ = _loss_grad(W, Xb, y_idx, self.l2, sw)
        history = [float(loss)]
        for _ in range(int(self.epochs)):
            prev = W.copy()
            order = rng.permutation(n)
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                _, grad = _loss_grad(W, Xb[idx], y_idx[idx], self.l2,
                                     None if sw is None else sw[idx])
                W -= lr * grad
            new_loss, _ = _loss_grad(W, Xb, y_idx, self.l2, sw)
            if not np.isfinite(new_loss) or new_loss > loss:
                W = prev
                lr /= 2.0
            else:
                loss = new_loss
            history.append(float(loss))
        self.coef_ = W
        self.loss_history_ = history
        self.final_loss_ = float(loss)
        self.final_lr_ = lr
        return self

    def _check_X(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def predict_proba(self, X):
        X = self._check_X(X)
        if self.degenerate_:
            p = np.zeros((X.shape[0], len(self.classes_)))
            p[:, self.constant_] = 1.0
            return p
        return softmax_proba(self.coef_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def loss_and_grad(self, X, y):
        """Regularized loss and gradient of the fitted weights on a labelled batch."""
        check_is_fitted(self, "coef_")
        index = {c: i for i, c in enumerate(self.classes_)}
        return loss_and_grad(self.coef_, X, [index[v] for v in y], self.l2)

    def to_json(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "params": {k: v for k, v in self.get_params().items() if k != "classes"},
            "classes": [str(c) for c in self.classes_],
            "weights": self.coef_.tolist(),
            "degenerate": bool(self.degenerate_),
            "constant": getattr(self, "constant_", None),
            "final_loss": self.final_loss_,
            "n_features": self.n_features_in_,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SoftmaxRegression":
        est = cls(classes=list(data["classes"]), **data["params"])
        est.classes_ = np.asarray(data["classes"], dtype=object)
        est.coef_ = np.asarray(data["weights"], dtype=float)
        est.degenerate_ = data["degenerate"]
        if est.degenerate_:
            est.constant_ = data["constant"]
        est.final_loss_ = data["final_loss"]
        est.n_features_in_ = data["n_features"]
        return est


def train_component(features, labels, component: str, hyperparams: dict | None = None
                    ) -> SoftmaxRegression:
    """Fit one classifier whose classes are the component's legal labels in legend order."""
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}")
    if len(features) != len(labels) or len(labels) < 2:
        raise ValueError("need matching features and labels, at least 2 rows")
    illegal = sorted({lab for lab in labels if lab not in LABELS[component]})
    if illegal:
        raise IllegalLabel(f"{component} labels {illegal} are not legal")
    est = SoftmaxRegression(classes=list(LABELS[component]), **(hyperparams or {}))
    est.fit(features, labels)
    if est.degenerate_:
        logger.warning("%s: all training labels are %r; using a constant classifier", component,
                       labels[0])
    return est


def predict_component(classifier, feature) -> tuple[str, np.ndarray]:
    """Label and class probabilities for a single feature row."""
    proba = classifier.predict_proba(np.asarray(feature, dtype=float).reshape(1, -1))[0]
    return str(classifier.classes_[int(np.argmax(proba))]), proba


def _label_matrix(Y) -> np.ndarray:
    rows = [y.labels() if isinstance(y, CvssVector) else tuple(y) for y in Y]
    return np.array(rows, dtype=object).reshape(len(rows), len(COMPONENTS))


class CvssEmbeddingClassifier(ClassifierMixin, BaseEstimator):
    """One classifier per CVSS metric, fitted on shared features.

    ``base_estimator`` is cloned for every component; any scikit-learn
    classifier with ``predict_proba`` can stand in for the default
    :class:`SoftmaxRegression` (only the default can be saved to a bundle).
    ``y`` is a sequence of :class:`CvssVector` or an ``(n, 8)`` label array.
    """

    def __init__(self, base_estimator=None):
        self.base_estimator = base_estimator

    def fit(self, X, Y):
        X = check_array(X, dtype=float)
        labels = _label_matrix(Y)
        if labels.shape[0] != X.shape[0]:
            raise ValueError(f"{X.shape[0]} feature rows but {labels.shape[0]} label rows")
        base = self.base_estimator if self.base_estimator is not None else SoftmaxRegression()
        self.estimators_ = {}
        for j, comp in enumerate(COMPONENTS):
            est = clone(base)
            if isinstance(est, SoftmaxRegression):
                est = train_component(X, list(labels[:, j]), comp, {
                    k: v for k, v in est.get_params().items() if k != "classes"})
            else:
                est.fit(X, list(labels[:, j]))
            self.estimators_[comp] = est
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "estimators_")
        X = check_array(X, dtype=float)
        return np.column_stack([self.estimators_[c].predict(X).astype(object) for c in COMPONENTS])

    def predict_vectors(self, X) -> list[CvssVector]:
        return [CvssVector(*row) for row in self.predict(X)]

    def score(self, X, Y, sample_weight=None):
        """Mean of the eight per-component accuracies."""
        pred = self.predict(X)
        truth = _label_matrix(Y)
        return float(np.mean([(pred[:, j] == truth[:, j]).mean() for j in range(len(COMPONENTS))]))


@dataclass
class ModelBundle:
    model: CvssEmbeddingClassifier
    layout: FeatureLayout
    embed_model: str
    feature_mode: str
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        check_is_fitted(self.model, "estimators_")
        if set(self.model.estimators_) != set(COMPONENTS):
            raise ValueError("bundle needs exactly one classifier per component")

    def to_json(self) -> dict:
        for comp, est in self.model.estimators_.items():
            if not isinstance(est, SoftmaxRegression):
                raise TypeError(f"{comp}: only SoftmaxRegression classifiers can be serialized")
        return {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "embed_model": self.embed_model,
            "feature_mode": self.feature_mode,
            "layout": self.layout.to_json(),
            "manifest": self.manifest,
            "classifiers": {c: self.model.estimators_[c].to_json() for c in COMPONENTS},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelBundle":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("format") != BUNDLE_FORMAT or data.get("version") != BUNDLE_VERSION:
            raise ValueError(f"{path}: not a version {BUNDLE_VERSION} model bundle")
        model = CvssEmbeddingClassifier()
        model.estimators_ = {c: SoftmaxRegression.from_json(data["classifiers"][c])
                             for c in COMPONENTS}
        layout = FeatureLayout.from_json(data["layout"])
        model.n_features_in_ = layout.size
        return cls(model, layout, data["embed_model"], data["feature_mode"], data["manifest"])


def predict_vector_embeddings(bundle: ModelBundle, cve_id: str, feature) -> PredictedVector:
    feature = np.asarray(feature, dtype=float)
    if feature.shape[-1] != bundle.layout.size:
        raise DimensionMismatch(f"feature has {feature.shape[-1]} values, layout expects "
                                f"{bundle.layout.size}")
    labels = {c: predict_component(bundle.model.estimators_[c], feature)[0] for c in COMPONENTS}
    return PredictedVector(cve_id, {c: ComponentPrediction(labels[c], "embedding")
                                    for c in COMPONENTS})


def predict_embeddings(bundle: ModelBundle, cve_ids, X) -> list[PredictedVector]:
    """Batch version of :func:`predict_vector_embeddings`."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] != bundle.layout.size:
        raise DimensionMismatch(f"features have {X.shape[1]} columns, layout expects "
                                f"{bundle.layout.size}")
    labels = bundle.model.predict(X)
    return [PredictedVector(cid, {c: ComponentPrediction(str(row[j]), "embedding")
                                  for j, c in enumerate(COMPONENTS)})
            for cid, row in zip(cve_ids, labels)]
