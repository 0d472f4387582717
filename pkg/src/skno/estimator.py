"""scikit-learn style wrapper around :class:`~skno.model.SknoModel` training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .adjoint import rel_l2_per_sample
from .datasets import Dataset
from .exceptions import UsageError
from .model import ArchConfig, SknoModel, forward
from .training import TrainConfig, fit_normaliser, train


def check_field_batch(X, d: int, name: str = "X") -> np.ndarray:
    """Return ``X`` as float64 ``(samples, *spatial, channels)``.

    A missing channel axis (``X.ndim == d + 1``) is added.
    """
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64,
                    input_name=name)
    if X.ndim == d + 1:
        X = X[..., None]
    if X.ndim != d + 2:
        raise UsageError(f"{name} must have shape (samples, {'x, ' * d}[channels]); got {X.shape}")
    if X.shape[0] == 0:
        raise UsageError(f"{name} holds no samples")
    return X


def check_pair(X, y, d: int):
    X = check_field_batch(X, d, "X")
    y = check_field_batch(y, d, "y")
    if X.shape[:-1] != y.shape[:-1]:
        raise UsageError(f"X and y disagree on samples/grid: {X.shape[:-1]} vs {y.shape[:-1]}")
    return X, y


class SKNORegressor(RegressorMixin, BaseEstimator):
    """Operator regression from input fields ``X`` to output fields ``y``.

    ``X`` and ``y`` are arrays of shape ``(samples, *grid, channels)`` on a
    uniform periodic grid; the channel axis may be dropped for scalar fields.
    A fitted estimator predicts at any grid resolution of at least
    ``2 * modes`` points per axis.
    """

    def __init__(self, d=1, n_layers=1, modes=2, n_p=4, lift_kind="linear",
                 recover_kind="linear", a_tilde_form="diag", with_a_tilde=True,
                 with_bias_b=True, with_linear_residual=True, with_nonlinear_residual=True,
                 with_local_propagator=False, with_global_propagators=True,
                 with_positional_features=False, activation="gelu", normalise=False,
                 epochs=100, batch_size=20, lr0=1e-3, clip_norm=10.0, seed=0,
                 validation_fraction=0.1):
        self.d = d
        self.n_layers = n_layers
        self.modes = modes
        self.n_p = n_p
        self.lift_kind = lift_kind
        self.recover_kind = recover_kind
        self.a_tilde_form = a_tilde_form
        self.with_a_tilde = with_a_tilde
        self.with_bias_b = with_bias_b
        self.with_linear_residual = with_linear_residual
        self.with_nonlinear_residual = with_nonlinear_residual
        self.with_local_propagator = with_local_propagator
        self.with_global_propagators = with_global_propagators
        self.with_positional_features = with_positional_features
        self.activation = activation
        self.normalise = normalise
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.clip_norm = clip_norm
        self.seed = seed
        self.validation_fraction = validation_fraction

    _ARCH_KEYS = ("d", "n_layers", "modes", "n_p", "lift_kind", "recover_kind", "a_tilde_form",
                  "with_a_tilde", "with_bias_b", "with_linear_residual", "with_nonlinear_residual",
                  "with_local_propagator", "with_global_propagators",
                  "with_positional_features", "activation")

    def _arch(self) -> ArchConfig:
        return ArchConfig(**{k: getattr(self, k) for k in self._ARCH_KEYS})

    def fit(self, X, y):
        squeeze = np.ndim(y) == self.d + 1
        X, y = check_pair(X, y, self.d)
        arch = self._arch()
        if not 0 <= self.validation_fraction < 1:
            raise UsageError("validation_fraction must lie in [0, 1)")
        n = X.shape[0]
        order = np.random.default_rng([self.seed, 4]).permutation(n)
        n_val = int(round(self.validation_fraction * n)) if n > 1 else 0
        val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        train_ds = Dataset(X[tr_idx], y[tr_idx])
        # without a held-out split, best-checkpoint tracking falls back to the training set
        val_ds = Dataset(X[val_idx], y[val_idx]) if n_val else train_ds
        if self.normalise:
            arch = fit_normaliser(arch, train_ds)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr0,
                          seed=self.seed, clip_norm=self.clip_norm)
        model = SknoModel(arch, X.shape[-1], y.shape[-1], seed=self.seed)
        result = train(model, train_ds, val_ds, cfg)
        self.model_ = result.model
        self.history_ = result.metrics
        self.n_features_in_ = X.shape[-1]
        self.n_outputs_ = y.shape[-1]
        self.squeeze_output_ = squeeze
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("SKNORegressor is not fitted yet; call fit first")

    def predict(self, X):
        self._check_fitted()
        X = check_field_batch(X, self.d)
        if X.shape[-1] != self.n_features_in_:
            raise UsageError(f"X has {X.shape[-1]} channels, estimator was fitted on {self.n_features_in_}")
        out = forward(self.model_, X, training=False)
        return out[..., 0] if self.squeeze_output_ else out

    def score(self, X, y, sample_weight=None):
        """``1 - mean relative L2 error`` (higher is better, 1 is exact)."""
        X, y = check_pair(X, y, self.d)
        pred = self.predict(X)
        errs = rel_l2_per_sample(pred.reshape(y.shape), y)
        return float(1.0 - np.average(errs, weights=sample_weight))

