"""scikit-learn compatible front ends: a preprocessing transformer and the
multimodal classifier.

``X`` is always a sequence of :class:`~mmfusion.data.MultimodalSample`.

    >>> clf = MultimodalClassifier(max_epochs=50).fit(train, eval_set=val)
    >>> clf.score(test)
"""
from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import MultimodalSample, collate, pad_or_truncate, standardize
from .errors import LabelOutOfRange, NumericFailure
from .fusion import BRANCHES, ModelConfig, MultimodalModel
from .training import TrainConfig, train


def _check_samples(X) -> list[MultimodalSample]:
    X = list(X)
    if not X:
        raise ValueError("empty sample list")
    if not all(isinstance(s, MultimodalSample) for s in X):
        raise TypeError("X must be a sequence of MultimodalSample")
    return X


def _with_labels(X, y):
    if y is None:
        return X
    y = np.asarray(y)
    if len(y) != len(X):
        raise ValueError("X and y lengths differ")
    return [replace(s, label=int(lbl)) for s, lbl in zip(X, y)]


class MultimodalScaler(TransformerMixin, BaseEstimator):
    """Per-pixel and per-feature standardization plus token padding.

    Statistics come from ``fit`` data only and are reused for every later
    ``transform``.
    """

    def __init__(self, max_len: int = 8):
        self.max_len = max_len

    def fit(self, X, y=None):
        X = _check_samples(X)
        if X[0].image is not None:
            _, self.image_stats_ = standardize(np.stack([s.image.ravel() for s in X]))
        else:
            self.image_stats_ = None
        if X[0].structured is not None:
            _, self.structured_stats_ = standardize(np.stack([s.structured for s in X]))
        else:
            self.structured_stats_ = None
        return self

    def transform(self, X):
        check_is_fitted(self, "image_stats_")
        out = []
        for s in _check_samples(X):
            image = s.image
            if image is not None and self.image_stats_ is not None:
                image = standardize(image.ravel(), self.image_stats_)[0].reshape(image.shape)
            structured = s.structured
            if structured is not None and self.structured_stats_ is not None:
                structured = standardize(structured, self.structured_stats_)[0]
            tokens = None if s.tokens is None else pad_or_truncate(s.tokens, self.max_len)
            out.append(MultimodalSample(image, tokens, structured, s.label))
        return out

    def stats_tensors(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "image_stats_")
        out = {}
        for prefix, stats in (("image", self.image_stats_), ("structured", self.structured_stats_)):
            if stats is not None:
                out[f"prep.{prefix}_mean"], out[f"prep.{prefix}_std"] = stats
        return out


class MultimodalClassifier(ClassifierMixin, BaseEstimator):
    """CNN/RNN/ViT/FCN fusion classifier trained with Adam and early stopping.

    ``fit`` standardizes with statistics from the training samples, trains on
    them and uses ``eval_set`` (if given) for early stopping and the
    restore-best snapshot. Labels are read from the samples unless ``y`` is
    passed.
    """

    def __init__(self, fusion_mode="attention", branches=BRANCHES, d_f=16, conv_channels=8,
                 cnn_pool=2, embed_dim=16, rnn_hidden=32, d_model=8, depth=1, fcn_hidden=16,
                 classifier_hidden=8, projection_activation="tanh", n_classes=None, max_len=8, vocab_size=16,
                 lr=0.001, batch_size=32, patience=10, lr_decay_factor=0.5,
                 lr_decay_every=20, max_epochs=200, seed=0, augment=(), standardize=True):
        self.fusion_mode = fusion_mode
        self.branches = branches
        self.d_f = d_f
        self.conv_channels = conv_channels
        self.cnn_pool = cnn_pool
        self.embed_dim = embed_dim
        self.rnn_hidden = rnn_hidden
        self.d_model = d_model
        self.depth = depth
        self.fcn_hidden = fcn_hidden
        self.classifier_hidden = classifier_hidden
        self.projection_activation = projection_activation
        self.n_classes = n_classes
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.max_epochs = max_epochs
        self.seed = seed
        self.augment = augment
        self.standardize = standardize

    def model_config(self, X: Sequence[MultimodalSample]) -> ModelConfig:
        first = X[0]
        n_classes = self.n_classes or int(max(s.label for s in X)) + 1
        return ModelConfig(
            n_classes=n_classes,
            image_size=first.image.shape[0] if first.image is not None else 6,
            max_len=self.max_len, vocab_size=self.vocab_size,
            d_s=len(first.structured) if first.structured is not None else 4,
            branches=tuple(self.branches), fusion_mode=self.fusion_mode, d_f=self.d_f,
            conv_channels=self.conv_channels, cnn_pool=self.cnn_pool,
            embed_dim=self.embed_dim, rnn_hidden=self.rnn_hidden, d_model=self.d_model,
            depth=self.depth, fcn_hidden=self.fcn_hidden,
            classifier_hidden=self.classifier_hidden,
            projection_activation=self.projection_activation)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, patience=self.patience,
                           lr_decay_factor=self.lr_decay_factor,
                           lr_decay_every=self.lr_decay_every, max_epochs=self.max_epochs,
                           seed=self.seed)

    def _prep(self, X):
        return self.scaler_.transform(X) if self.scaler_ is not None else list(X)

    def fit(self, X, y=None, eval_set=None):
        X = _with_labels(_check_samples(X), y)
        config = self.model_config(X)
        if any(not 0 <= s.label < config.n_classes for s in X):
            raise LabelOutOfRange("label outside [0, n_classes)")
        self.classes_ = np.arange(config.n_classes)
        self.scaler_ = MultimodalScaler(self.max_len).fit(X) if self.standardize else None
        val = []
        if eval_set is not None:
            val = self._prep(eval_set[0] if isinstance(eval_set, tuple) else eval_set)
        self.model_ = MultimodalModel(config, seed=self.seed)
        self.report_ = train(self.model_, self._prep(X), val, self.train_config(),
                             tuple(self.augment))
        return self

    def predict_proba(self, X, chunk: int = 256) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._prep(_check_samples(X))
        parts = [self.model_.predict_proba(collate(X[i:i + chunk], self.max_len))
                 for i in range(0, len(X), chunk)]
        probs = np.concatenate(parts)
        if not np.all(np.isfinite(probs)):
            raise NumericFailure("non-finite class probabilities")
        return probs

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def score(self, X, y=None, sample_weight=None):
        X = _check_samples(X)
        y = np.array([s.label for s in X]) if y is None else y
        return super().score(X, y, sample_weight)

    def checkpoint_params(self) -> dict[str, np.ndarray]:
        """Model parameters followed by the preprocessing statistics."""
        check_is_fitted(self, "model_")
        params = dict(self.model_.params)
        if self.scaler_ is not None:
            params.update(self.scaler_.stats_tensors())
        return params
