"""scikit-learn style wrappers: a pretraining feature extractor and a linear probe.

``make_pipeline(StoPPretrainer(), LinearProbe())`` pretrains on the images
passed to ``fit`` (labels are ignored by the first stage) and fits the probe
on the frozen features.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import data as D
from . import evaluation as E
from . import trainer
from .config import RunConfig
from .errors import ConfigError


def _as_images(X):
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ConfigError(f"expected images [n, H, W] or [n, H, W, C], got shape {X.shape}")
    return X


class StoPPretrainer(BaseEstimator, TransformerMixin):
    """Masked-prediction pretraining; ``transform`` returns pooled target-encoder features.

    Parameters mirror the most used config keys.  ``config`` takes any other
    ``key: value`` overrides from the flat run configuration.
    """

    def __init__(self, sigma=0.25, embed_kind="stop", noise_target="masked_only", steps=2000, batch=64, lr=1e-3,
                 patch=8, seed=0, feature_source="last_layer", config=None):
        self.sigma = sigma
        self.embed_kind = embed_kind
        self.noise_target = noise_target
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.patch = patch
        self.seed = seed
        self.feature_source = feature_source
        self.config = config

    def _run_config(self):
        values = dict(self.config or {})
        values.update({
            "stop.sigma": self.sigma,
            "stop.embed_kind": self.embed_kind,
            "stop.noise_target": self.noise_target,
            "train.steps": self.steps,
            "optim.batch": self.batch,
            "optim.lr": self.lr,
            "data.patch": self.patch,
            "train.seed": self.seed,
        })
        return RunConfig(values)

    def fit(self, X, y=None):
        images = _as_images(X)
        self.config_ = self._run_config()
        runner = trainer.Pretrainer(self.config_, dataset=D.ImageBatch(images))
        self.state_, self.metrics_ = runner.run()
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        images = _as_images(X)
        return E.extract_features(self.state_, images, self.feature_source, patch=self.patch)


class LinearProbe(BaseEstimator, ClassifierMixin):
    """Softmax regression on standardized features, trained by full-batch gradient descent."""

    def __init__(self, epochs=300, lr=0.5, l2=0.0):
        self.epochs = epochs
        self.lr = lr
        self.l2 = l2

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.model_ = E.SoftmaxRegression(self.epochs, self.lr, self.l2).fit(X, y)
        self.classes_ = self.model_.classes_
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(check_array(X))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_array(X))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_array(X))
