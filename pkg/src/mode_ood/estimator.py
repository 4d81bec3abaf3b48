"""Scikit-learn style wrapper around train -> fit-bank -> score.

``X`` is an (n, H, W, E) array of feature maps. Following the outlier-
detection convention, ``score_samples`` returns negated distances (higher
means more ID-like) and ``predict`` returns +1 for ID, -1 for OOD.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin

from . import detector, trainer
from .detector import ScaleMode
from .errors import ContractError
from .features import FeatureDataset, FeatureMap


def _as_dataset(X, y, class_count=None) -> FeatureDataset:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ContractError(f"X must be (n, H, W, E), got shape {X.shape}")
    labels = np.full(len(X), -1) if y is None else np.asarray(y, dtype=np.int64)
    if len(labels) != len(X):
        raise ContractError("y length must match X")
    if class_count is None:
        class_count = int(labels.max()) + 1 if (labels >= 0).any() else 1
    maps = [FeatureMap(x, int(lbl)) for x, lbl in zip(X, labels)]
    return FeatureDataset(maps, class_count, shape=X.shape[1:])


class MultiScaleOODDetector(OutlierMixin, BaseEstimator):
    """Multi-scale k-NN OOD detector with optional contrastive training.

    Parameters mirror the pipeline defaults: ``k`` nearest neighbor rank,
    ``alpha`` percent of training examples kept in the bank, ``scale_mode``
    one of "global", "local", "local++", "global+local++". With
    ``epochs=0`` the encoder stays at identity (no training).
    """

    def __init__(self, scale_mode="global+local++", k=detector.DEFAULT_K,
                 alpha=100.0, train_mode=trainer.MODE_F, epochs=0, lr=0.1,
                 lam=1.0, tau=0.1, e_dim=16, batch_n=8, view_noise_sigma=None,
                 tpr_target=0.95, seed=0):
        self.scale_mode = scale_mode
        self.k = k
        self.alpha = alpha
        self.train_mode = train_mode
        self.epochs = epochs
        self.lr = lr
        self.lam = lam
        self.tau = tau
        self.e_dim = e_dim
        self.batch_n = batch_n
        self.view_noise_sigma = view_noise_sigma
        self.tpr_target = tpr_target
        self.seed = seed

    def fit(self, X, y):
        """Train (if epochs > 0), build the bank, and pick the threshold."""
        dataset = _as_dataset(X, y)
        mode = ScaleMode.parse(self.scale_mode)
        e_raw = dataset.shape[2]
        init = trainer.init_model(e_raw, e_raw, self.e_dim, self.seed)
        if self.epochs > 0:
            cfg = trainer.TrainConfig(
                mode=self.train_mode, lam=self.lam, lr=self.lr,
                epochs=self.epochs, batch_n=self.batch_n, tau=self.tau,
                e_dim=self.e_dim, view_noise_sigma=self.view_noise_sigma,
                seed=self.seed,
            )
            self.model_ = trainer.train(
                dataset, cfg, init=init if self.train_mode == trainer.MODE_F else None
            )
        else:
            self.model_ = init
        self.bank_ = detector.fit_bank(dataset, self.model_, mode,
                                       alpha=self.alpha, seed=self.seed)
        self.scale_mode_ = mode
        fit_scores = [s.score for s in detector.score_dataset(
            dataset, self.model_, self.bank_, min(self.k, len(self.bank_)), mode)]
        self.threshold_ = detector.select_threshold(fit_scores, self.tpr_target)
        return self

    def _distances(self, X) -> np.ndarray:
        dataset = _as_dataset(X, None, class_count=1)
        k = min(self.k, len(self.bank_))
        return np.array([s.score for s in detector.score_dataset(
            dataset, self.model_, self.bank_, k, self.scale_mode_)])

    def score_samples(self, X) -> np.ndarray:
        return -self._distances(X)

    def decision_function(self, X) -> np.ndarray:
        return self.threshold_ - self._distances(X)

    def predict(self, X) -> np.ndarray:
        return np.where(self._distances(X) < self.threshold_, 1, -1)
