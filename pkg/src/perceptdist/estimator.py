"""scikit-learn style wrappers around the perceptual distances.

``X`` for the pair-based methods is either an ``(n, 2, 3, h, w)`` array or a
``(ref, dist)`` tuple of ``(n, 3, h, w)`` arrays; ``y`` holds mean opinion
scores.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import evaluator
from .baselines import NlapdGdnModel
from .data import PairArrays, dissimilarity_from_mos
from .model import PerceptNet, PerceptNetConfig
from .tensor import Tensor
from .trainer import TrainConfig, predict_distances, train
from .validation import check_images, check_pairs, check_scores


class _CorrelationFitMixin:
    """Shared fit/predict/score for models trained with the correlation loss."""

    _divisible_by = 1

    def _build_model(self):
        raise NotImplementedError

    def fit(self, X, y, X_val=None, y_val=None):
        ref, dist = check_pairs(X, self._divisible_by)
        y = check_scores(y, len(ref))
        lo, hi = self.mos_range if self.mos_range is not None else (y.min(), y.max())
        dis = self._dissimilarity(y, lo, hi)
        heldout = None
        if X_val is not None:
            vr, vd = check_pairs(X_val, self._divisible_by)
            yv = check_scores(y_val, len(vr))
            heldout = PairArrays(vr, vd, self._dissimilarity(yv, lo, hi), yv)
        config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                             learning_rate=self.learning_rate, seed=self.random_state,
                             crop=self.crop, eval_every=1)
        self.model_, self.train_log_ = train(self._build_model(), PairArrays(ref, dist, dis, y),
                                             config, heldout=heldout)
        return self

    def _dissimilarity(self, y, lo, hi):
        dis = dissimilarity_from_mos(y, lo, hi)
        return dis if self.higher_is_better else 1.0 - dis

    def predict(self, X) -> np.ndarray:
        """Distance between each reference and its distorted image."""
        check_is_fitted(self, "model_")
        ref, dist = check_pairs(X, self._divisible_by)
        src = PairArrays(ref, dist, np.zeros(len(ref)))
        return predict_distances(self.model_, src, batch_size=self.batch_size)

    def score(self, X, y) -> float:
        """|Spearman| between predicted distances and opinion scores."""
        d = self.predict(X)
        return abs(evaluator.spearman(d, check_scores(y, len(d))))


class PerceptNetDistance(_CorrelationFitMixin, TransformerMixin, BaseEstimator):
    """PerceptNet trained to correlate feature distance with human scores.

    Parameters
    ----------
    epochs, batch_size, learning_rate : training schedule for Adam.
    random_state : int
        Seeds initialization, shuffling and crops.
    crop : int or None
        Random aligned crop size used while training.
    mos_range : (float, float) or None
        Declared score range; defaults to the observed range of ``y``.
    higher_is_better : bool
        Whether larger scores mean better quality (MOS) or worse (DMOS).
    """

    _divisible_by = 4

    def __init__(self, epochs=10, batch_size=16, learning_rate=1e-3, random_state=0,
                 crop=None, mos_range=None, higher_is_better=True):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.crop = crop
        self.mos_range = mos_range
        self.higher_is_better = higher_is_better

    def _build_model(self):
        return PerceptNet(PerceptNetConfig(), self.random_state)

    def transform(self, X) -> np.ndarray:
        """Perceptual representation ``f(x)`` of each image, shape (n, 128, h/4, w/4)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self._divisible_by)
        return np.concatenate([self.model_.forward(Tensor(X[i:i + self.batch_size])).data
                               for i in range(0, len(X), self.batch_size)])


class NlapdDistance(_CorrelationFitMixin, BaseEstimator):
    """Normalized Laplacian pyramid distance with trainable divisive normalization."""

    def __init__(self, levels=6, epochs=10, batch_size=16, learning_rate=1e-3,
                 random_state=0, crop=None, mos_range=None, higher_is_better=True):
        self.levels = levels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.crop = crop
        self.mos_range = mos_range
        self.higher_is_better = higher_is_better

    def _build_model(self):
        return NlapdGdnModel(self.levels, self.random_state)


class ClassicalDistance(BaseEstimator):
    """Untrained full-reference metric (mse, l2, ssim, msssim, nlapd) behind the same API."""

    def __init__(self, metric="ssim"):
        self.metric = metric

    def fit(self, X=None, y=None):
        self.metric_ = evaluator.get_metric(self.metric)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "metric_")
        ref, dist = check_pairs(X)
        return np.array([self.metric_(r, d) for r, d in zip(ref, dist)])

    def score(self, X, y) -> float:
        d = self.predict(X)
        return abs(evaluator.spearman(d, check_scores(y, len(d))))
