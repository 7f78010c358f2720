"""Frozen-feature extraction and linear probing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as D
from . import model as M
from .errors import ConfigError

FEATURE_SOURCES = ("last_layer", "last4_concat")


@dataclass
class ProbeReport:
    variant: str
    train_acc: float
    test_acc: float
    n_train: int
    n_test: int
    source: str


def extract_features(state, images, source="last_layer", patch=None, batch_size=256):
    """Average-pooled target-encoder features, one row per image.

    ``images`` is an :class:`~stoplab.data.ImageBatch`, an image array
    ``[n, H, W, C]`` (needs ``patch``), or pre-computed patches ``[n, K, P]``.
    ``last_layer`` gives ``d_e`` features; ``last4_concat`` concatenates the
    pooled outputs of the last four blocks (``4 * d_e``).  No masking and no
    positional noise are involved.
    """
    if source not in FEATURE_SOURCES:
        raise ConfigError(f"feature source must be one of {FEATURE_SOURCES}, got {source!r}")
    if isinstance(images, D.ImageBatch) or np.ndim(images) == 4:
        arr = images.images if isinstance(images, D.ImageBatch) else np.asarray(images)
        if patch is None:
            patch = int(round(np.sqrt(state.config.patch_dim / arr.shape[-1])))
        patches = D.patchify(arr, patch).patches
    else:
        patches = np.asarray(images)
    if source == "last4_concat" and state.config.enc_depth < 4:
        raise ConfigError(f"last4_concat needs an encoder with >= 4 blocks, got {state.config.enc_depth}")
    feats = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size].astype(state.dtype, copy=False)
        out, blocks = M.target_features(state, chunk, collect=source == "last4_concat")
        if source == "last_layer":
            feats.append(out.data.mean(axis=1))
        else:
            pooled = [M.final_norm(b, state.target, "encoder").data.mean(axis=1) for b in blocks[-4:]]
            feats.append(np.concatenate(pooled, axis=1))
    if not feats:
        width = state.config.d_e * (4 if source == "last4_concat" else 1)
        return np.zeros((0, width), dtype=state.dtype)
    return np.concatenate(feats, axis=0)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class SoftmaxRegression:
    """Multinomial logistic regression trained by full-batch gradient descent.

    Features are standardized with the training split's mean and std.
    Weights start at zero, so a fit is fully deterministic.
    """

    def __init__(self, epochs=300, lr=0.5, l2=0.0):
        self.epochs = epochs
        self.lr = lr
        self.l2 = l2

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ConfigError("linear probe needs at least two classes in the training split")
        self.mean_ = X.mean(axis=0)
        self.std_ = X.std(axis=0) + 1e-8
        Z = (X - self.mean_) / self.std_
        targets = (y[:, None] == self.classes_[None, :]).astype(np.float64)
        n, d = Z.shape
        W = np.zeros((d, len(self.classes_)))
        b = np.zeros(len(self.classes_))
        for _ in range(self.epochs):
            P = _softmax(Z @ W + b)
            G = (P - targets) / n
            W -= self.lr * (Z.T @ G + self.l2 * W)
            b -= self.lr * G.sum(axis=0)
        self.coef_, self.intercept_ = W, b
        return self

    def decision_function(self, X):
        Z = (np.asarray(X, dtype=np.float64) - self.mean_) / self.std_
        return Z @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def loss(self, X, y):
        P = self.predict_proba(X)
        idx = np.searchsorted(self.classes_, y)
        return float(-np.mean(np.log(P[np.arange(len(y)), idx] + 1e-300)))


def linear_probe(features_train, labels_train, features_test, labels_test, epochs=300, lr=0.5, l2=0.0,
                 variant="", source="last_layer"):
    """Fit a softmax probe on frozen features and report train/test accuracy."""
    labels_train = np.asarray(labels_train)
    labels_test = np.asarray(labels_test)
    missing = np.setdiff1d(np.unique(labels_test), np.unique(labels_train))
    if missing.size:
        raise ConfigError(f"classes {missing.tolist()} appear in the test split but not in the train split")
    clf = SoftmaxRegression(epochs=epochs, lr=lr, l2=l2).fit(features_train, labels_train)
    train_acc = float(np.mean(clf.predict(features_train) == labels_train))
    test_acc = float(np.mean(clf.predict(features_test) == labels_test)) if len(labels_test) else float("nan")
    return ProbeReport(variant, train_acc, test_acc, len(labels_train), len(labels_test), source)


def probe_state(state, cfg, train, test, variant=""):
    """Probe every available feature source of ``state``; returns ``{source: ProbeReport}``."""
    if train.labels is None or test.labels is None:
        raise ConfigError("probing needs labelled train and test splits")
    patch = cfg["data.patch"]
    sources = ["last_layer"] + (["last4_concat"] if state.config.enc_depth >= 4 else [])
    reports = {}
    for source in sources:
        f_train = extract_features(state, train, source, patch=patch)
        f_test = extract_features(state, test, source, patch=patch)
        reports[source] = linear_probe(
            f_train, train.labels, f_test, test.labels,
            epochs=cfg["eval.epochs"], lr=cfg["eval.lr"], l2=cfg["eval.l2"], variant=variant, source=source,
        )
    return reports
