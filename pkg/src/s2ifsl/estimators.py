"""scikit-learn style wrappers around the cosine model.

``CosineBaseClassifier`` pre-trains the extractor and base weights on
labelled base data and exposes ``transform`` for features.
``IncrementalEpisodeClassifier`` takes a fitted base classifier, imprints
prototypes for new classes from a support set, optionally refines them with
unlabeled samples, and predicts over the union of base and new classes.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .model import IncrementalCosineModel, compute_prototypes, cosine_classify
from .refinement import RefinementConfig, refine_prototypes
from .training import TrainConfig, pretrain
from .types import DatasetBundle, Split, ValidationError

__all__ = ["CosineBaseClassifier", "IncrementalEpisodeClassifier"]


class CosineBaseClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Cosine-similarity classifier over base classes with a learned MLP extractor."""

    def __init__(self, hidden=(64, 64), d=16, activation="elu", gamma_init=10.0, epochs=30, lr=0.05,
                 momentum=0.9, batch_size=64, random_state=0):
        self.hidden = hidden
        self.d = d
        self.activation = activation
        self.gamma_init = gamma_init
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two base classes")
        self.n_features_in_ = X.shape[1]
        seed = 0 if self.random_state is None else int(self.random_state)
        model = IncrementalCosineModel(X.shape[1], len(self.classes_), hidden=tuple(self.hidden), d=self.d,
                                       activation=self.activation, gamma_init=self.gamma_init, seed=seed)
        # Only base_train is read by pre-training; the other splits are placeholders.
        empty = Split(np.zeros((0, X.shape[1])), np.zeros(0, dtype=np.int64), classes=set())
        bundle = DatasetBundle(Split(X, codes + 1), empty, empty, empty, empty, empty)
        cfg = TrainConfig(eta1=self.lr, eta2=self.lr, steps=self.epochs, batch_size=self.batch_size,
                          momentum=self.momentum, seed=seed)
        self.loss_curve_ = pretrain(model, bundle, cfg)
        self.model_ = model.eval()
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        X = self._check(X)
        with torch.no_grad():
            return self.model_(X).numpy()

    def predict_proba(self, X):
        X = self._check(X)
        with torch.no_grad():
            return cosine_classify(self.model_(X), self.model_.base_weight, self.model_.gamma).numpy()

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class IncrementalEpisodeClassifier(ClassifierMixin, BaseEstimator):
    """Extend a fitted :class:`CosineBaseClassifier` with new classes from a support set.

    ``fit(X_support, y_support, X_unlabeled=None)``; new class labels must not
    collide with the base classes. ``classes_`` lists base classes first.
    """

    def __init__(self, base_estimator=None, refine_steps=1, alpha=1.0):
        self.base_estimator = base_estimator
        self.refine_steps = refine_steps
        self.alpha = alpha

    def fit(self, X, y, X_unlabeled=None):
        if self.base_estimator is None:
            raise ValueError("base_estimator must be a fitted CosineBaseClassifier")
        check_is_fitted(self.base_estimator, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        base = self.base_estimator
        if X.shape[1] != base.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {base.n_features_in_}")
        novel = np.unique(y)
        clash = np.intersect1d(novel, base.classes_)
        if len(clash):
            raise ValidationError(f"support labels {clash.tolist()} are base classes")
        model = base.model_
        n_base = len(base.classes_)
        labels = n_base + 1 + np.searchsorted(novel, y)
        cfg = RefinementConfig(n_steps=self.refine_steps, alpha=self.alpha)
        with torch.no_grad():
            sup = model(X)
            protos = compute_prototypes(sup, labels, n_base, len(novel))
            if X_unlabeled is not None and len(X_unlabeled) and cfg.n_steps > 0:
                U = check_array(X_unlabeled, dtype=np.float64)
                protos = refine_prototypes(model.base_weight, protos, model(U), sup, labels, model.gamma, cfg)
        self.novel_classes_ = novel
        self.classes_ = np.concatenate([base.classes_, novel])
        self.weights_ = torch.cat([model.base_weight.detach(), protos], dim=1)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        model = self.base_estimator.model_
        with torch.no_grad():
            return cosine_classify(model(X), self.weights_, model.gamma).numpy()

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
