"""scikit-learn style wrappers.

Inputs follow one convention: ``X`` is an ``(N, d)`` array of observations in
time order (1-D input is one feature), and ``t`` the matching timestamps,
defaulting to ``0, 1, ..., N-1``. No scaling happens inside the estimators;
use :class:`MinMaxSeriesScaler` or any sklearn scaler beforehand.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import NormStats, TimeSeries, make_windows
from .errors import DataError
from .neuralcode import NeuralCodeModel, TrainConfig, reconstruction_mse, train_neural_code
from .nn import DynamicsNet
from .odesolve import SolverConfig
from .recurrent import (
    ArchSpec,
    RecurrentTrainConfig,
    build_arch,
    evaluate_windows,
    parse_model_name,
    task_direction,
    train_on_windows,
)


def check_series(X, t=None) -> TimeSeries:
    """Validate ``(X, t)`` and pack them into a :class:`TimeSeries`."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    X = check_array(X, dtype=np.float64, ensure_min_samples=2)
    if t is None:
        t = np.arange(len(X), dtype=float)
    t = check_array(np.asarray(t, dtype=float).reshape(-1, 1), dtype=np.float64).ravel()
    if len(t) != len(X):
        raise DataError(f"{len(t)} timestamps for {len(X)} observations")
    return TimeSeries(t, X)


class MinMaxSeriesScaler(TransformerMixin, BaseEstimator):
    """Per-feature min-max scaling fitted on training data only; no clipping."""

    def fit(self, X, y=None):
        self.stats_ = NormStats.fit(check_series(X))
        self.n_features_in_ = len(self.stats_.minimum)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return self.stats_.transform(check_series(X)).values

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return self.stats_.inverse_values(check_array(np.asarray(X, dtype=float).reshape(len(X), -1)))


class NeuralCODERegressor(RegressorMixin, BaseEstimator):
    """Learned vector field fitted with forward and (weighted) backward losses.

    ``fvp_weight=0`` gives the plain Neural ODE. ``predict`` reconstructs a
    series from one boundary observation: the first row for
    ``direction='forward'``, the last row for ``'backward'``.
    """

    def __init__(self, width=50, activation="tanh", fvp_weight=1.0, max_iter=2000, lr=1e-3, batch_size=1,
                 seq_len=10, method="rk4", substeps=10, direction="forward", random_state=0):
        self.width = width
        self.activation = activation
        self.fvp_weight = fvp_weight
        self.max_iter = max_iter
        self.lr = lr
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.method = method
        self.substeps = substeps
        self.direction = direction
        self.random_state = random_state

    def fit(self, X, t=None):
        series = check_series(X, t)
        rng = np.random.default_rng(self.random_state)
        net = DynamicsNet.create(series.dim, self.width, rng, activation=self.activation)
        self.model_ = NeuralCodeModel(net, SolverConfig(self.method, self.substeps))
        cfg = TrainConfig(self.max_iter, self.lr, self.batch_size, self.seq_len, self.random_state)
        _, self.history_ = train_neural_code(self.model_, series, cfg, self.fvp_weight)
        self.n_features_in_ = series.dim
        return self

    def predict(self, X, t=None):
        check_is_fitted(self, "model_")
        return reconstruction_mse(self.model_, check_series(X, t), self.direction)[1]

    def score(self, X, t=None):
        """Negative reconstruction MSE (higher is better)."""
        check_is_fitted(self, "model_")
        return -reconstruction_mse(self.model_, check_series(X, t), self.direction)[0]


class NeuralODERegressor(NeuralCODERegressor):
    """Forward loss only."""

    def __init__(self, width=50, activation="tanh", max_iter=2000, lr=1e-3, batch_size=1, seq_len=10,
                 method="rk4", substeps=10, direction="forward", random_state=0):
        super().__init__(width, activation, 0.0, max_iter, lr, batch_size, seq_len, method, substeps, direction,
                         random_state)


class RecurrentRegressor(RegressorMixin, BaseEstimator):
    """Any of the nine ODE-driven recurrent models, trained on task windows.

    ``seen`` and ``predict_len`` size the extrapolation windows. ``predict``
    returns one row per target point of the task windows cut from ``X``, in
    window order; ``predict_windows`` also gives their indices.
    """

    def __init__(self, model="code-birnn-rnn", hidden_dim=8, width=32, activation="tanh", task="impute", seen=7,
                 predict_len=7, stride=None, epochs=20, lr=5e-4, substeps=5, backward_order="reversed",
                 random_state=0):
        self.model = model
        self.hidden_dim = hidden_dim
        self.width = width
        self.activation = activation
        self.task = task
        self.seen = seen
        self.predict_len = predict_len
        self.stride = stride
        self.epochs = epochs
        self.lr = lr
        self.substeps = substeps
        self.backward_order = backward_order
        self.random_state = random_state

    def _windows(self, series):
        return make_windows(len(series), self.task, self.seen, self.predict_len, self.stride)

    def fit(self, X, t=None):
        series = check_series(X, t)
        fam, cell = parse_model_name(self.model)
        rng = np.random.default_rng(self.random_state)
        self.model_ = build_arch(ArchSpec(fam, cell, self.hidden_dim, series.dim), rng, self.width,
                                 self.activation, self.substeps, backward_order=self.backward_order)
        cfg = RecurrentTrainConfig(self.epochs, self.lr, self.random_state)
        _, self.history_ = train_on_windows(self.model_, series, self._windows(series), cfg)
        self.n_features_in_ = series.dim
        return self

    def predict_windows(self, X, t=None):
        """``(indices, predictions)`` for every target point."""
        check_is_fitted(self, "model_")
        series = check_series(X, t)
        windows = self._windows(series)
        _, rows = evaluate_windows(self.model_, series, windows, task_direction(windows.task))
        return np.array([i for i, _ in rows]), np.array([p for _, p in rows])

    def predict(self, X, t=None):
        return self.predict_windows(X, t)[1]

    def score(self, X, t=None):
        """Negative MSE over the task's target points."""
        check_is_fitted(self, "model_")
        series = check_series(X, t)
        return -evaluate_windows(self.model_, series, self._windows(series))[0]
