"""scikit-learn style wrapper around the training and inference code."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig, TrainConfig
from .data import Sample, normalize
from .evaluation import DscTable, evaluate_subsets, predict_probs, region_dsc, THRESHOLD
from .modality import MODALITIES, ModalityMask, coerce_mask
from .network import ModelParams
from .train import train_loop


def check_volumes(X, extent: Optional[int] = None) -> np.ndarray:
    """Validate ``[n, 4, D, H, W]`` (or a single ``[4, D, H, W]``) image input."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[1] != len(MODALITIES):
        raise ValueError(f"expected volumes shaped [n, {len(MODALITIES)}, D, H, W], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no samples given")
    if not np.all(np.isfinite(X)):
        raise ValueError("volumes contain NaN or Inf")
    if extent is not None and X.shape[2:] != (extent,) * 3:
        raise ValueError(f"volumes have extent {X.shape[2:]}, model expects {(extent,) * 3}")
    return X


def check_labels(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[None]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"labels shaped {y.shape} do not match volumes {X.shape}")
    if not np.isin(y, (0, 1, 2, 3)).all():
        raise ValueError("labels must use codes 0..3")
    return y.astype(np.uint8)


def regions_to_labels(probs: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    """Collapse ``[3, ...]`` (wt, tc, et) probabilities to label codes 0..3.

    Inner regions take precedence, so the result is always nested.
    """
    on = probs > threshold
    labels = np.zeros(probs.shape[1:], dtype=np.uint8)
    labels[on[0]] = 1
    labels[on[1]] = 2
    labels[on[2]] = 3
    return labels


class MMFormerSegmenter(BaseEstimator):
    """Brain-tumor-style segmenter robust to missing input modalities.

    ``fit`` takes volumes ``X`` of shape ``[n, 4, D, H, W]`` in canonical
    modality order (FLAIR, T1c, T1, T2) and integer labels ``y`` of shape
    ``[n, D, H, W]``. ``predict`` and ``predict_proba`` accept an optional
    ``mask`` naming the modalities available at inference.
    """

    def __init__(
        self,
        extent: int = 32,
        channels=(8, 16, 32, 64, 128),
        token_dim: int = 128,
        heads: int = 8,
        groups: int = 8,
        use_intra: bool = True,
        use_inter: bool = True,
        use_aux: bool = True,
        lr: float = 2e-4,
        epochs: int = 1,
        steps_per_epoch: Optional[int] = None,
        mask_policy: str = "uniform",
        augment: bool = True,
        seed: int = 0,
    ):
        self.extent = extent
        self.channels = channels
        self.token_dim = token_dim
        self.heads = heads
        self.groups = groups
        self.use_intra = use_intra
        self.use_inter = use_inter
        self.use_aux = use_aux
        self.lr = lr
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.mask_policy = mask_policy
        self.augment = augment
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            extent=self.extent, channels=tuple(self.channels), token_dim=self.token_dim, heads=self.heads,
            groups=self.groups, use_intra=self.use_intra, use_inter=self.use_inter, use_aux=self.use_aux,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, epochs=self.epochs, steps_per_epoch=self.steps_per_epoch,
            mask_policy=self.mask_policy, augment=self.augment, seed=self.seed,
        )

    def fit(self, X, y, params: Optional[ModelParams] = None):
        cfg = self._model_config()
        X = check_volumes(X, cfg.extent)
        y = check_labels(y, X)
        samples = [Sample(x, lab) for x, lab in zip(X, y)]
        result = train_loop(samples, cfg, self._train_config(), params=params)
        self.model_config_ = cfg
        self.params_ = result.params
        self.history_ = result.history
        self.n_features_in_ = len(MODALITIES)
        return self

    def _probs(self, X, mask) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        X = check_volumes(X, self.model_config_.extent)
        mask = ModalityMask.full() if mask is None else coerce_mask(mask)
        mask.require_nonempty()
        return [predict_probs(self.params_, self.model_config_, normalize(Sample(x, np.zeros(x.shape[1:]))), [mask])[0] for x in X]

    def predict_proba(self, X, mask=None) -> np.ndarray:
        """Sigmoid region probabilities ``[n, 3, D, H, W]`` in (wt, tc, et) order."""
        return np.stack(self._probs(X, mask)).astype(np.float32)

    def predict(self, X, mask=None) -> np.ndarray:
        return np.stack([regions_to_labels(p) for p in self._probs(X, mask)])

    def score(self, X, y, mask=None) -> float:
        """Mean of the ET, TC and WT DSC (percent), averaged over samples."""
        X = check_volumes(X)
        y = check_labels(y, X)
        scores = [np.mean(region_dsc(p, Sample(x, lab))) for p, x, lab in zip(self._probs(X, mask), X, y)]
        return float(np.mean(scores))

    def evaluate(self, X, y, masks=None) -> DscTable:
        """Per-subset DSC table over all 15 modality subsets (or ``masks``)."""
        check_is_fitted(self, "params_")
        X = check_volumes(X, self.model_config_.extent)
        y = check_labels(y, X)
        samples = [Sample(x, lab) for x, lab in zip(X, y)]
        return evaluate_subsets(self.params_, samples, self.model_config_, masks)
