"""scikit-learn wrappers: a telemetry scaler and the MTPS classifier over (n, T, 63) windows."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .data import fit_normalization, normalize
from .model import MtpsConfig, MTPSModel
from .schema import CLASS_NAMES
from .training import TrainConfig, train


def check_windows(X, n_features: int | None = None) -> np.ndarray:
    """Validate a (n, T, F) float array: finite, non-empty, expected feature width."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected (n_windows, T, n_features), got shape {X.shape}")
    if 0 in X.shape:
        raise ValueError(f"empty dimension in input of shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinite values; impute first")
    if n_features is not None and X.shape[2] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[2]}")
    return X


class TelemetryScaler(TransformerMixin, BaseEstimator):
    """Per-feature scaling fitted on every timestep of the training windows."""

    def __init__(self, mode="schema"):
        self.mode = mode

    def fit(self, X, y=None):
        X = check_windows(X)
        self.stats_ = fit_normalization(X, mode=self.mode)
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return normalize(check_windows(X, self.n_features_in_), self.stats_)


class MTPSClassifier(ClassifierMixin, BaseEstimator):
    """Fits the Conv/attention/SE network on integer labels 0=HTP, 1=LTP, 2=NTP."""

    def __init__(self, learning_rate=1e-3, batch_size=64, max_epochs=50, dropout=0.2,
                 early_stop_patience=5, lr_plateau_patience=3, variant="full", seed=0, val_fraction=0.1):
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.dropout = dropout
        self.early_stop_patience = early_stop_patience
        self.lr_plateau_patience = lr_plateau_patience
        self.variant = variant
        self.seed = seed
        self.val_fraction = val_fraction

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=self.max_epochs,
            dropout=self.dropout, early_stop_patience=self.early_stop_patience,
            lr_plateau_patience=self.lr_plateau_patience, variant=self.variant, seed=self.seed,
            val_fraction=self.val_fraction,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_windows(X)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        self.classes_ = np.arange(3)
        base = MtpsConfig(n_features=X.shape[2])
        self.model_, self.log_ = train(self._train_config(), X, y, X_val, y_val, model_config=base)
        self.n_features_in_ = X.shape[2]
        return self

    def _model(self) -> MTPSModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("MTPSClassifier is not fitted yet")
        return self.model_

    def predict_proba(self, X):
        return self._model().predict_proba(check_windows(X, self.n_features_in_))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    @property
    def class_names_(self):
        return CLASS_NAMES
