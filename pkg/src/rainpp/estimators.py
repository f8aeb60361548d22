"""scikit-learn compatible wrappers around the data, labeling and training layers.

Arrays follow the library layout: grids are ``[N, C, H, W]`` and QPE fields are
``[N, H, W]``.  Predictions are per pixel, so ``predict`` returns ``[N, H, W]``
class maps and ``score`` is pixel accuracy against hard labels.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import no_grad
from .grid import DEFAULT_THRESHOLDS, GridDataset, NormStats, compute_stats, default_variable_names
from .labeling import ThresholdSet, classify, hard_field, smooth_field
from .model import TINY_MODEL, ModelConfig, encode, masked_input
from .runtime import execution
from .training import PRESETS, Checkpoint, finetune, predict_proba, pretrain
from .validation import check_grid_array, check_qpe


def _as_dataset(x: np.ndarray, qpe: np.ndarray | None = None) -> GridDataset:
    if qpe is None:
        qpe = np.zeros((x.shape[0],) + x.shape[2:], dtype=np.float32)
    return GridDataset(x, qpe, default_variable_names(x.shape[1]))


def _model_config(model, n_channels: int) -> ModelConfig:
    if model is None or model == "tiny":
        base = TINY_MODEL
    elif model == "default":
        base = ModelConfig()
    elif isinstance(model, ModelConfig):
        base = model
    else:
        base = ModelConfig.from_dict(dict(model))
    return replace(base, in_channels=n_channels)


class GridScaler(TransformerMixin, BaseEstimator):
    """Per-channel standardization over samples and pixels."""

    def fit(self, X, y=None):
        x = check_grid_array(X)
        self.stats_ = compute_stats(_as_dataset(x))
        self.n_channels_ = x.shape[1]
        return self

    def _params(self):
        check_is_fitted(self, "stats_")
        return (self.stats_.mean[None, :, None, None], self.stats_.std[None, :, None, None])

    def transform(self, X):
        mean, std = self._params()
        return (check_grid_array(X, self.n_channels_) - mean) / std

    def inverse_transform(self, X):
        mean, std = self._params()
        return check_grid_array(X, self.n_channels_) * std + mean

    @classmethod
    def from_stats(cls, stats: NormStats) -> "GridScaler":
        scaler = cls()
        scaler.stats_ = stats
        scaler.n_channels_ = stats.mean.size
        return scaler


class ContinuousLabeler(TransformerMixin, BaseEstimator):
    """Turn QPE fields into per-class target planes ``[N, m, H, W]``."""

    def __init__(self, thresholds=DEFAULT_THRESHOLDS, smooth: bool = True):
        self.thresholds = thresholds
        self.smooth = smooth

    def fit(self, X, y=None):
        self.thresholds_ = ThresholdSet(tuple(self.thresholds))
        self.n_classes_ = self.thresholds_.n_classes
        return self

    def transform(self, X):
        check_is_fitted(self, "thresholds_")
        qpe = check_qpe(X)
        return (smooth_field if self.smooth else hard_field)(qpe, self.thresholds_)


class MaskedPretrainer(TransformerMixin, BaseEstimator):
    """Masked-reconstruction pre-training; ``transform`` yields the latent vector."""

    def __init__(self, model="tiny", lr=1.6e-3, iterations=300, mask_ratio=0.9, batch_size=4,
                 warmup=0.1, seed=0):
        self.model = model
        self.lr = lr
        self.iterations = iterations
        self.mask_ratio = mask_ratio
        self.batch_size = batch_size
        self.warmup = warmup
        self.seed = seed

    def fit(self, X, y=None):
        x = check_grid_array(X)
        phase = replace(PRESETS["tiny-pretrain"], lr=self.lr, iterations=self.iterations,
                        mask_ratio=self.mask_ratio, batch_size=self.batch_size,
                        warmup=self.warmup, seed=self.seed)
        with execution():
            self.checkpoint_ = pretrain(phase, _as_dataset(x), _model_config(self.model, x.shape[1]))
        self.history_ = self.checkpoint_.history["loss"]
        self.n_channels_ = x.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "checkpoint_")
        x = check_grid_array(X, self.n_channels_)
        ck = self.checkpoint_
        with execution(), no_grad():
            xr, _ = masked_input(x.astype(ck.store["embed.proj.w"].dtype), ck.store, ck.model)
            _, z = encode(xr, ck.store, ck.model)
        return z.data


class PrecipitationSegmenter(ClassifierMixin, BaseEstimator):
    """Frozen-encoder precipitation classifier.

    ``fit(X, qpe)`` fine-tunes the segmentation head.  Pass a pre-training
    ``Checkpoint`` (or a fitted ``MaskedPretrainer``) as ``pretrained``; without
    one the encoder stays at its random initialization.
    """

    def __init__(self, pretrained=None, model="tiny", thresholds=DEFAULT_THRESHOLDS, lr=3e-3,
                 iterations=500, mask_ratio=0.25, batch_size=4, warmup=0.1,
                 label_mode="continuous", class_weighting="inverse-frequency", seed=0):
        self.pretrained = pretrained
        self.model = model
        self.thresholds = thresholds
        self.lr = lr
        self.iterations = iterations
        self.mask_ratio = mask_ratio
        self.batch_size = batch_size
        self.warmup = warmup
        self.label_mode = label_mode
        self.class_weighting = class_weighting
        self.seed = seed

    def _pretrained_checkpoint(self) -> Checkpoint | None:
        p = self.pretrained
        if isinstance(p, MaskedPretrainer):
            check_is_fitted(p, "checkpoint_")
            return p.checkpoint_
        return p

    def fit(self, X, y):
        x = check_grid_array(X)
        qpe = check_qpe(y, like=x)
        gamma = ThresholdSet(tuple(self.thresholds))
        phase = replace(PRESETS["tiny-finetune"], lr=self.lr, iterations=self.iterations,
                        mask_ratio=self.mask_ratio, batch_size=self.batch_size,
                        warmup=self.warmup, label_mode=self.label_mode,
                        class_weighting=self.class_weighting, seed=self.seed,
                        thresholds=gamma.values)
        pre = self._pretrained_checkpoint()
        model = None if pre is not None else replace(
            _model_config(self.model, x.shape[1]), n_classes=gamma.n_classes)
        with execution():
            self.checkpoint_ = finetune(phase, _as_dataset(x, qpe), pre, model)
        self.classes_ = np.arange(gamma.n_classes)
        self.thresholds_ = gamma
        self.n_channels_ = x.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "checkpoint_")
        x = check_grid_array(X, self.n_channels_)
        with execution():
            return predict_proba(self.checkpoint_.store, self.checkpoint_.model, x)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y, sample_weight=None):
        """Pixel accuracy of ``predict(X)`` against the hard classes of QPE ``y``."""
        pred = self.predict(X)
        truth = classify(check_qpe(y, like=pred[:, None]), self.thresholds_)
        return float(np.mean(pred == truth))
