"""scikit-learn adapters around the trainer and feature pipeline.

KeywordSpotter is a classifier over (n, 76, 64) feature windows (a
flattened (n, 4864) matrix is accepted for pipeline friendliness); it
standardizes inputs with statistics fitted on the training windows, so
raw or pre-scaled features both work. LogMelTransformer turns 1 s
waveforms into those windows. Both follow the usual conventions:
constructor arguments are stored verbatim, fitted state lives in
trailing-underscore attributes, and clone()/get_params() round-trip.

The lowest label in ``classes_`` plays the negative (background) role
in the detection metrics, mirroring the dataset convention that class
0 is the non-keyword class.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import InvalidInput, ShapeError
from .features import (
    NUM_MEL,
    WINDOW_FRAMES,
    FeatureDataset,
    SplitFeatures,
    compute_stats,
    lfbe64,
    pad_or_trim,
    window76,
)
from .model import ModelSpec, desk_spec
from .quantizers import FakeQuantConfig
from .trainer import TrainConfig, predict_posteriors, train

_WINDOW_SIZE = WINDOW_FRAMES * NUM_MEL


def _as_windows(X) -> np.ndarray:
    """Coerce (n, 76, 64) or (n, 4864) input into window form."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] == _WINDOW_SIZE:
        X = X.reshape(X.shape[0], WINDOW_FRAMES, NUM_MEL)
    if X.ndim != 3 or X.shape[1:] != (WINDOW_FRAMES, NUM_MEL):
        raise ShapeError(
            f"expected (n, {WINDOW_FRAMES}, {NUM_MEL}) windows or a "
            f"flattened (n, {_WINDOW_SIZE}) matrix, got {X.shape}")
    return X


class KeywordSpotter(ClassifierMixin, BaseEstimator):
    """Convolutional keyword classifier with optional fake quantization.

    With ``quantized=False`` this trains the floating-point baseline;
    with ``quantized=True`` the forward pass snaps weights and
    activations to the configured fixed-point grids and the fitted
    model can be exported to pure-integer form.
    """

    def __init__(self, spec: ModelSpec | None = None, quantized: bool = False,
                 method: str = "none", weight_bits: int = 8, act_bits: int = 8,
                 input_bits: int = 8, activation_clip: float = 8.0,
                 lambda_reg: float | None = None, total_steps: int = 1000,
                 batch_size: int = 32, peak_lr: float = 1e-3,
                 final_lr: float = 1e-5, validation_fraction: float = 0.0,
                 seed: int = 0, log_path: str | None = None):
        self.spec = spec
        self.quantized = quantized
        self.method = method
        self.weight_bits = weight_bits
        self.act_bits = act_bits
        self.input_bits = input_bits
        self.activation_clip = activation_clip
        self.lambda_reg = lambda_reg
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.final_lr = final_lr
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.log_path = log_path

    def _fake_quant(self) -> FakeQuantConfig:
        if not self.quantized:
            return FakeQuantConfig(enabled=False, method=self.method)
        return FakeQuantConfig(enabled=True, b_w=self.weight_bits,
                               b_a=self.act_bits, b_in=self.input_bits,
                               c_a=self.activation_clip, method=self.method,
                               lambda_reg=self.lambda_reg)

    def fit(self, X, y) -> "KeywordSpotter":
        windows = _as_windows(X)
        y = np.asarray(y)
        if y.shape != (windows.shape[0],):
            raise ShapeError("one label per window required")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise InvalidInput("need at least 2 classes to fit")
        indices = np.searchsorted(self.classes_, y).astype(np.int64)
        if self.spec is not None:
            if self.spec.num_classes != self.classes_.size:
                raise InvalidInput(
                    f"spec has {self.spec.num_classes} classes, "
                    f"y has {self.classes_.size}")
            spec = self.spec
        else:
            spec = desk_spec(int(self.classes_.size))
        self.stats_ = compute_stats(windows)
        scaled = self.stats_.apply(windows)
        train_split, val_split = self._split(scaled, indices)
        dataset = FeatureDataset(
            train=train_split, val=val_split, test=val_split,
            stats=self.stats_,
            label_names=[str(c) for c in self.classes_])
        cfg = TrainConfig(
            total_steps=self.total_steps, batch_size=self.batch_size,
            peak_lr=self.peak_lr, final_lr=self.final_lr,
            fq=self._fake_quant(), seed=self.seed,
            log_path=self.log_path,
            eval_every=0 if self.validation_fraction == 0.0 else 1000)
        self.model_ = train(spec, dataset, cfg)
        self.spec_ = spec
        self.n_features_in_ = _WINDOW_SIZE
        return self

    def _split(self, windows: np.ndarray, labels: np.ndarray):
        n = windows.shape[0]
        frac = self.validation_fraction
        if not 0.0 <= frac < 1.0:
            raise InvalidInput("validation_fraction must lie in [0, 1)")
        if frac == 0.0:
            split = SplitFeatures(windows, labels)
            return split, split
        n_val = min(max(int(round(frac * n)), 1), n - 1)
        order = np.random.default_rng([self.seed, 303]).permutation(n)
        val_idx, train_idx = order[:n_val], order[n_val:]
        return (SplitFeatures(windows[train_idx], labels[train_idx]),
                SplitFeatures(windows[val_idx], labels[val_idx]))

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        windows = self.stats_.apply(_as_windows(X))
        return predict_posteriors(self.model_, windows)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def export_fixed_point(self):
        """Integer-form model for the fixed-point engine."""
        check_is_fitted(self, "model_")
        from .engine import export_model

        return export_model(self.model_)


class LogMelTransformer(TransformerMixin, BaseEstimator):
    """Waveforms to standardized (n, 76, 64) log-mel feature windows.

    Accepts an iterable of 1-D float waveforms (any length; padded or
    center-cropped to 1 s) or a 2-D (n, samples) array. Standardization
    statistics are fitted per mel bin on the training waveforms and
    frozen for transform.
    """

    def __init__(self, standardize: bool = True):
        self.standardize = standardize

    @staticmethod
    def _featurize(X) -> np.ndarray:
        waves = [np.asarray(w, dtype=np.float64).ravel() for w in X]
        if not waves:
            raise InvalidInput("no waveforms given")
        return np.stack([window76(lfbe64(pad_or_trim(w))) for w in waves])

    def fit(self, X, y=None) -> "LogMelTransformer":
        windows = self._featurize(X)
        self.stats_ = compute_stats(windows) if self.standardize else None
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "stats_")
        windows = self._featurize(X)
        if self.stats_ is None:
            return windows
        return self.stats_.apply(windows)
