"""scikit-learn front end: a sparse MLP classifier found by iterative magnitude pruning."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from implab.data import Dataset
from implab.imp import ImpConfig, run_imp
from implab.model import ModelSpec, Network
from implab.train import DenseBaseline, TrainSchedule


class SparseMLPClassifier(ClassifierMixin, BaseEstimator):
    """MLP trained with SGD, then pruned by IMP with weight rewinding.

    ``prune_levels=0`` gives a plain dense network.  With pruning, the
    returned weights are the sparsest level whose validation error stays
    within ``tolerance`` of the dense level (or the dense level if none do).
    """

    def __init__(self, hidden_layer_sizes=(64, 64), activation="relu", total_steps=2000, lr=0.05,
                 batch_size=32, momentum=0.9, weight_decay=1e-4, schedule="step", rewind_step=0,
                 prune_levels=0, prune_ratio=0.2, tolerance=0.01, validation_fraction=0.2,
                 random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.total_steps = total_steps
        self.lr = lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.rewind_step = rewind_step
        self.prune_levels = prune_levels
        self.prune_ratio = prune_ratio
        self.tolerance = tolerance
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _schedule(self) -> TrainSchedule:
        T = int(self.total_steps)
        return TrainSchedule(total_steps=T, lr=float(self.lr), kind=self.schedule, milestones=(T // 2, 3 * T // 4),
                             momentum=float(self.momentum), weight_decay=float(self.weight_decay),
                             batch_size=int(self.batch_size))

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        yi = self._encoder.transform(y)
        seed = int(self.random_state or 0)
        if self.prune_levels and self.validation_fraction:
            Xtr, Xva, ytr, yva = train_test_split(X, yi, test_size=self.validation_fraction, random_state=seed,
                                                  stratify=yi)
        else:
            Xtr, Xva, ytr, yva = X, X, yi, yi
        ds = Dataset(Xtr, ytr, Xva, yva, self.classes_.size)
        spec = ModelSpec(input_shape=(X.shape[1],), widths=tuple(self.hidden_layer_sizes),
                         activation=self.activation, n_classes=self.classes_.size, seed=seed)
        self.network_ = Network(spec)
        cfg = ImpConfig(self._schedule(), tau=int(self.rewind_step), ratio=float(self.prune_ratio),
                        max_levels=int(self.prune_levels), seed=seed)
        self.records_ = run_imp(self.network_, ds, cfg)
        dense_error = self.records_[0].test_error
        baseline = DenseBaseline(dense_error, float(self.tolerance), [dense_error], [seed])
        chosen = self.records_[0]
        for rec in self.records_:
            if rec.test_error <= baseline.threshold and not rec.diverged:
                chosen = rec
        self.params_ = chosen.params
        self.mask_ = chosen.mask
        self.sparsity_ = chosen.sparsity
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.network_.predict_proba(self.params_, X)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
