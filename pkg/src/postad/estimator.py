"""scikit-learn style detector wrapping normalization, windowing, training and scoring."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import checkpoint, trainer
from .config import TrainConfig
from .datastore import NormStats, fit_norm_stats, normalize, train_val_split
from .errors import CheckpointCorruptError, DataError, DimensionMismatchError
from .scoring import (SPATIOTEMPORAL, TIMEWISE, SpatialStats, calibrate_threshold, spatial_stats_from_values,
                      spatiotemporal_from_parts, timewise_from_parts, window_parts)

logger = logging.getLogger(__name__)

_CONFIG_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def cover_windows(x: np.ndarray, n: int):
    """Non-overlapping windows plus, when T is not a multiple of n, one end-aligned
    window whose last ``T % n`` rows supply scores for the tail."""
    t = len(x)
    if t < n:
        raise DataError(f"series of length {t} is shorter than the window {n}")
    count = t // n
    windows = [x[i * n:(i + 1) * n] for i in range(count)]
    tail = t - count * n
    if tail:
        windows.append(x[t - n:])
    return np.stack(windows), tail


def uncover(per_window: np.ndarray, t: int, tail: int) -> np.ndarray:
    n = per_window.shape[1]
    if not tail:
        return per_window.reshape((-1,) + per_window.shape[2:])
    body = per_window[:-1].reshape((-1,) + per_window.shape[2:])
    return np.concatenate([body, per_window[-1][n - tail:]])[:t]


class POSTDetector(BaseEstimator):
    """Spatio-temporal association anomaly detector for multivariate series.

    ``fit`` takes a normal training series ``(T, D0)``; scores are higher for
    more anomalous steps. ``predict`` returns 0/1 labels thresholded so that
    ``ratio`` percent of validation scores are flagged. ``score_channels`` and
    ``predict_channels`` give the ``(T, D0)`` joint criterion.
    """

    def __init__(self, window=100, d_model=512, n_layers=3, n_heads=8, d_ff=512,
                 alpha=0.8, beta=0.02, gamma=0.002, xi=1.0, lam=0.7, margin=0.1,
                 inner_iters=5, lr=1e-5, graph_lr=None, batch_size=64, epochs=10, patience=3,
                 ratio=1.0, val_fraction=0.2, knn_k=3, sparsity="prox", rec_reduction="window",
                 disable_saga=False, freeze_graph=False, disable_assdis_s=False,
                 identity_init=False, ape_on_input=False, standardize=True,
                 dtype="float32", random_state=0):
        self.window = window
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.xi = xi
        self.lam = lam
        self.margin = margin
        self.inner_iters = inner_iters
        self.lr = lr
        self.graph_lr = graph_lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.ratio = ratio
        self.val_fraction = val_fraction
        self.knn_k = knn_k
        self.sparsity = sparsity
        self.rec_reduction = rec_reduction
        self.disable_saga = disable_saga
        self.freeze_graph = freeze_graph
        self.disable_assdis_s = disable_assdis_s
        self.identity_init = identity_init
        self.ape_on_input = ape_on_input
        self.standardize = standardize
        self.dtype = dtype
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        params = {k: v for k, v in self.get_params().items() if k in _CONFIG_FIELDS}
        return TrainConfig(seed=int(self.random_state or 0), **params)

    @classmethod
    def from_config(cls, config: TrainConfig, **extra) -> "POSTDetector":
        params = {k: v for k, v in config.to_dict().items() if k in cls._get_param_names()}
        return cls(random_state=config.seed, **params, **extra)

    def _prepare(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        if hasattr(self, "n_features_in_") and X.shape[1] != self.n_features_in_:
            raise DimensionMismatchError(f"X has {X.shape[1]} channels, detector was fit on {self.n_features_in_}")
        return normalize(X, self.norm_stats_) if self.norm_stats_ is not None else X

    def fit(self, X, y=None, callback=None):
        """Train on the normal series ``X``; ``callback`` receives every training-log record."""
        X = check_array(X, dtype=np.float64)
        config = self.train_config()
        self.n_features_in_ = X.shape[1]
        self.norm_stats_ = fit_norm_stats(X) if self.standardize else None
        Xn = normalize(X, self.norm_stats_) if self.norm_stats_ is not None else X
        train_part, val_part = train_val_split(Xn, config.val_fraction)
        n = config.window
        train_w = train_part[: len(train_part) // n * n].reshape(-1, n, X.shape[1])
        val_w = val_part[: len(val_part) // n * n].reshape(-1, n, X.shape[1])
        if len(train_w) < 2:
            raise DataError("training split yields fewer than 2 windows")
        self.state_ = trainer.init_state(X.shape[1], config, train_part)
        trainer.fit(self.state_, train_w, val_w if len(val_w) else None, callback=callback)
        self.training_log_ = self.state_.log
        self._calibrate(train_w, val_w if len(val_w) else train_w)
        return self

    def _calibrate(self, train_w, val_w) -> None:
        model = self.state_.model
        train_parts = window_parts(model, train_w)
        self.spatial_stats_ = (spatial_stats_from_values(train_parts.assdis_s)
                               if train_parts.assdis_s is not None else None)
        val_parts = window_parts(model, val_w)
        self.val_scores_ = timewise_from_parts(val_parts.assdis_t, val_parts.residual).ravel()
        if self.spatial_stats_ is not None:
            self.val_channel_scores_ = spatiotemporal_from_parts(
                val_parts.assdis_t, self.spatial_stats_.zscore(val_parts.assdis_s), val_parts.residual
            ).reshape(-1, self.n_features_in_)
        else:
            self.val_channel_scores_ = None
        self.set_ratio(self.ratio)

    def set_ratio(self, ratio: float) -> "POSTDetector":
        """Recalibrate both thresholds so ``ratio`` percent of validation scores are flagged."""
        check_is_fitted(self, "val_scores_")
        self.ratio = ratio
        self.threshold_ = calibrate_threshold(self.val_scores_, ratio)
        self.channel_threshold_ = (calibrate_threshold(self.val_channel_scores_, ratio)
                                   if self.val_channel_scores_ is not None else None)
        return self

    def save(self, path) -> None:
        """Checkpoint the trained state together with normalization and calibration data."""
        check_is_fitted(self, "state_")
        extra = {
            "detector": {k: v for k, v in self.get_params().items()
                         if k not in _CONFIG_FIELDS and k != "random_state"},
            "n_features_in": self.n_features_in_,
            "normalization": self.norm_stats_.to_dict() if self.norm_stats_ is not None else None,
            "spatial_stats": self.spatial_stats_.to_dict() if self.spatial_stats_ is not None else None,
            "val_scores": self.val_scores_.tolist(),
            "val_channel_scores": (self.val_channel_scores_.tolist()
                                   if self.val_channel_scores_ is not None else None),
        }
        checkpoint.save(self.state_, path, extra=extra)

    @classmethod
    def load(cls, path, expect_channels=None) -> "POSTDetector":
        state = checkpoint.load(path, expect_channels)
        extra = state.extra
        if "detector" not in extra:
            raise CheckpointCorruptError(f"{path}: checkpoint carries no detector calibration")
        det = cls.from_config(state.config, **extra["detector"])
        det.state_ = state
        det.n_features_in_ = extra["n_features_in"]
        norm = extra["normalization"]
        det.norm_stats_ = (NormStats(np.asarray(norm["mean"]), np.asarray(norm["std"]))
                           if norm is not None else None)
        spatial = extra["spatial_stats"]
        det.spatial_stats_ = (SpatialStats(np.asarray(spatial["mean"]), np.asarray(spatial["std"]))
                              if spatial is not None else None)
        det.val_scores_ = np.asarray(extra["val_scores"], dtype=np.float64)
        det.val_channel_scores_ = (np.asarray(extra["val_channel_scores"], dtype=np.float64)
                                   if extra["val_channel_scores"] is not None else None)
        det.training_log_ = []
        return det.set_ratio(det.ratio)

    @property
    def model_(self):
        return self.state_.model

    def _parts(self, X):
        check_is_fitted(self, "state_")
        Xn = self._prepare(X)
        windows, tail = cover_windows(Xn, self.state_.config.window)
        return window_parts(self.state_.model, windows), len(Xn), tail

    def score_samples(self, X) -> np.ndarray:
        """Time-wise anomaly scores, shape ``(T,)``."""
        parts, t, tail = self._parts(X)
        return uncover(timewise_from_parts(parts.assdis_t, parts.residual), t, tail)

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self.threshold_

    def predict(self, X) -> np.ndarray:
        return (self.score_samples(X) > self.threshold_).astype(np.int8)

    def score_channels(self, X, activation: str = "sigmoid") -> np.ndarray:
        """Joint spatio-temporal scores, shape ``(T, D0)``."""
        parts, t, tail = self._parts(X)
        if parts.assdis_s is None:
            raise DataError("the spatial module is disabled; channel scores are unavailable")
        joint = spatiotemporal_from_parts(parts.assdis_t, self.spatial_stats_.zscore(parts.assdis_s),
                                          parts.residual, activation)
        return uncover(joint, t, tail)

    def predict_channels(self, X) -> np.ndarray:
        return (self.score_channels(X) > self.channel_threshold_).astype(np.int8)

    def scores(self, X, protocol: str = TIMEWISE) -> np.ndarray:
        if protocol == TIMEWISE:
            return self.score_samples(X)
        if protocol == SPATIOTEMPORAL:
            return self.score_channels(X)
        raise ValueError(f"unknown protocol {protocol!r}")
