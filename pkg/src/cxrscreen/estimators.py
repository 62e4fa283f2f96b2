"""scikit-learn style wrappers around the screening pipeline.

``CXRPreprocessor`` and ``CXRAugmenter`` are stateless transformers;
``CXRScreeningClassifier`` owns a spec-built network and the training loop.
All three follow the usual conventions (``get_params``/``set_params``,
``fit`` returning self, trailing-underscore fitted attributes), so they
compose with ``sklearn.pipeline.Pipeline`` and ``clone``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import preprocessing
from .architecture import ArchSpec, build_model, forward, resolve_spec
from .augmentation import AugmentConfig, augment_indexed
from .training import TrainConfig, fit_arrays


def _as_image_list(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 3:
        return [X[i] for i in range(X.shape[0])]
    images = [np.asarray(img, dtype=np.float64) for img in X]
    for img in images:
        if img.ndim != 2:
            raise ValueError(f"each sample must be a 2-D image, got shape {img.shape}")
    if not images:
        raise ValueError("X must contain at least one image")
    return images


class CXRPreprocessor(TransformerMixin, BaseEstimator):
    """Deterministic crop/resize/normalize on raw [0, 255] grayscale images."""

    def __init__(self, crop_fraction: float = 0.08, side: int = 480):
        self.crop_fraction = crop_fraction
        self.side = side

    def fit(self, X, y=None):
        _as_image_list(X)
        return self

    def transform(self, X) -> np.ndarray:
        images = _as_image_list(X)
        out = np.empty((len(images), self.side, self.side), dtype=np.float32)
        for i, img in enumerate(images):
            out[i] = preprocessing.preprocess(img, self.crop_fraction, self.side)
        return out


class CXRAugmenter(TransformerMixin, BaseEstimator):
    """Seeded augmentation over a stack of normalized images.

    Sample i is transformed with the generator keyed by (seed, i), so a given
    stack always augments the same way for a given seed.
    """

    def __init__(
        self,
        translate_frac: float = 0.10,
        rotate_deg: float = 10.0,
        hflip: bool = True,
        zoom_frac: float = 0.15,
        intensity_frac: float = 0.10,
        seed: int = 0,
    ):
        self.translate_frac = translate_frac
        self.rotate_deg = rotate_deg
        self.hflip = hflip
        self.zoom_frac = zoom_frac
        self.intensity_frac = intensity_frac
        self.seed = seed

    def _config(self) -> AugmentConfig:
        return AugmentConfig(
            translate_frac=self.translate_frac,
            rotate_deg=self.rotate_deg,
            hflip=self.hflip,
            zoom_frac=self.zoom_frac,
            intensity_frac=self.intensity_frac,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        self._config()
        return self

    def transform(self, X) -> np.ndarray:
        cfg = self._config()
        images = _as_image_list(X)
        out = np.empty((len(images),) + images[0].shape, dtype=np.float32)
        for i, img in enumerate(images):
            out[i] = augment_indexed(img, cfg, i)
        return out


class CXRScreeningClassifier(ClassifierMixin, BaseEstimator):
    """Binary screening classifier over preprocessed image stacks.

    ``fit`` expects X of shape (N, side, side) with values in [0, 1] matching
    the architecture's input size. Validation data drives early stopping;
    when none is passed the training stack itself is scored, which suits the
    small overfit-style runs this estimator is for.
    """

    def __init__(
        self,
        arch: str | ArchSpec = "cxr2-tiny",
        learning_rate: float = 1e-5,
        batch_size: int = 8,
        epochs: int = 40,
        patience: int = 5,
        seed: int = 0,
        rebalance: bool = True,
        threshold: float = 0.5,
        augment: AugmentConfig | None = None,
        max_steps: int | None = None,
    ):
        self.arch = arch
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.rebalance = rebalance
        self.threshold = threshold
        self.augment = augment
        self.max_steps = max_steps

    def _spec(self) -> ArchSpec:
        if isinstance(self.arch, ArchSpec):
            return self.arch
        return resolve_spec(self.arch)

    def _check_x(self, X, spec: ArchSpec) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        _, h, w = spec.input_shape
        if X.ndim != 3 or X.shape[1:] != (h, w):
            raise ValueError(f"X must have shape (N, {h}, {w}), got {X.shape}")
        return X

    def fit(self, X, y, validation: tuple[np.ndarray, np.ndarray] | None = None):
        spec = self._spec()
        X = self._check_x(X, spec)
        y = np.asarray(y).astype(np.int64).ravel()
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("y must contain only 0 and 1")

        if validation is None:
            x_val, y_val = X, y
        else:
            x_val = self._check_x(validation[0], spec)
            y_val = np.asarray(validation[1]).astype(np.int64).ravel()

        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            seed=self.seed,
            rebalance=self.rebalance,
            threshold=self.threshold,
            augment=self.augment,
            max_steps=self.max_steps,
        )
        model = build_model(spec, seed=self.seed)
        self.model_, self.history_ = fit_arrays(model, X, y, x_val, y_val, cfg)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check_x(X, self.model_.spec)
        positive = forward(self.model_, X)
        return np.column_stack([1.0 - positive, positive])

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return (proba[:, 1] >= self.threshold).astype(np.int64)
