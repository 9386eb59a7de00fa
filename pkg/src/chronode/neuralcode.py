"""Neural ODE and Neural CODE: a learned vector field fitted on windows.

Neural ODE fits the field with the forward (initial value) reconstruction
loss only. Neural CODE adds the backward (final value) reconstruction of the
same window, so the field is trained to be right in both time directions.
Gradients come from backpropagating through the unrolled solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TimeSeries
from .errors import ContractError, DimensionError, DivergenceError
from .nn import Adam, DynamicsNet
from .odesolve import SolverConfig, Trajectory, solve_fvp, solve_ivp
from .tensor import Var


@dataclass
class TrainConfig:
    max_iter: int = 2000
    lr: float = 1e-3
    batch_size: int = 1
    seq_len: int = 10
    seed: int = 0
    loss_log_every: int = 20
    patience: int | None = None

    def __post_init__(self):
        for name in ("max_iter", "batch_size", "seq_len", "loss_log_every"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ContractError("lr must be positive")


@dataclass
class LossRecord:
    iteration: int
    forward_mse: float
    backward_mse: float | None
    total: float


@dataclass
class NeuralCodeModel:
    dynamics: DynamicsNet
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.dynamics.state_dim < 1:
            raise ContractError("state dimension must be positive")

    @property
    def state_dim(self):
        return self.dynamics.state_dim

    def parameters(self):
        return self.dynamics.parameters()


def _column(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1, 1)


def trajectory_mse(states: list, targets: np.ndarray) -> Var:
    """Mean squared error of a trajectory against row-wise targets."""
    if len(states) != len(targets):
        raise DimensionError(f"{len(states)} states for {len(targets)} targets")
    terms = [T.mse(s, _column(y)) for s, y in zip(states, targets)]
    return T.lincomb([1.0 / len(terms)] * len(terms), terms)


def code_loss_terms(model: NeuralCodeModel, times, targets_fwd, targets_bwd=None, with_backward=True):
    """``(forward_mse, backward_mse)`` on one window.

    The forward solve starts from the first observation, the backward solve
    from the last one. ``targets_bwd`` defaults to ``targets_fwd`` reversed.
    """
    times = np.asarray(times, dtype=float)
    targets_fwd = np.asarray(targets_fwd, dtype=float)
    if targets_fwd.ndim == 1:
        targets_fwd = targets_fwd.reshape(-1, 1)
    if len(times) != len(targets_fwd):
        raise DimensionError(f"{len(times)} times for {len(targets_fwd)} targets")
    f = model.dynamics
    fwd = solve_ivp(f, T.constant(_column(targets_fwd[0])), times, model.solver)
    forward = trajectory_mse(fwd.states, targets_fwd)
    if not with_backward:
        return forward, None
    targets_bwd = targets_fwd[::-1] if targets_bwd is None else np.asarray(targets_bwd, dtype=float).reshape(targets_fwd.shape)
    if len(targets_bwd) != len(times):
        raise DimensionError(f"{len(times)} times for {len(targets_bwd)} backward targets")
    bwd = solve_fvp(f, T.constant(_column(targets_bwd[0])), times[::-1], model.solver)
    backward = trajectory_mse(bwd.states, targets_bwd)
    return forward, backward


def code_total_loss(model: NeuralCodeModel, batch) -> Var:
    """Forward plus backward reconstruction MSE on ``(times, targets_fwd, targets_bwd)``."""
    times, targets_fwd, targets_bwd = batch
    forward, backward = code_loss_terms(model, times, targets_fwd, targets_bwd)
    return T.add(forward, backward)


def _train(model: NeuralCodeModel, series: TimeSeries, cfg: TrainConfig, fvp_weight: float):
    if len(series) < cfg.seq_len:
        raise ContractError(f"series has {len(series)} points, fewer than seq_len={cfg.seq_len}")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    history = []
    best = np.inf
    stale = 0
    n_starts = len(series) - cfg.seq_len + 1
    use_backward = fvp_weight != 0.0
    for k in range(cfg.max_iter):
        opt.zero_grad()
        fwd_sum = bwd_sum = total_sum = 0.0
        for _ in range(cfg.batch_size):
            start = int(rng.integers(n_starts))
            window = slice(start, start + cfg.seq_len)
            forward, backward = code_loss_terms(model, series.times[window], series.values[window], with_backward=use_backward)
            if use_backward:
                loss = T.lincomb([1.0, fvp_weight], [forward, backward])
                bwd_sum += float(backward.value[0, 0])
            else:
                loss = forward
            fwd_sum += float(forward.value[0, 0])
            total_sum += float(loss.value[0, 0])
            T.backward(T.scale(loss, 1.0 / cfg.batch_size))
        b = cfg.batch_size
        if not np.isfinite(total_sum):
            raise DivergenceError(f"non-finite training loss at iteration {k}", iteration=k)
        if k % cfg.loss_log_every == 0:
            history.append(LossRecord(k, fwd_sum / b, bwd_sum / b if use_backward else None, total_sum / b))
        opt.step()
        if cfg.patience is not None:
            if total_sum < best:
                best, stale = total_sum, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return model.dynamics.state_dict(), history


def train_neural_code(model: NeuralCodeModel, series: TimeSeries, cfg: TrainConfig, fvp_weight: float = 1.0):
    """Fit on random contiguous windows with the forward + backward loss.

    Returns the trained parameter dict and the loss history sampled every
    ``cfg.loss_log_every`` iterations.
    """
    return _train(model, series, cfg, fvp_weight)


def train_neural_ode(model: NeuralCodeModel, series: TimeSeries, cfg: TrainConfig):
    """Same loop with the forward term only."""
    return _train(model, series, cfg, 0.0)


def predict_future(model: NeuralCodeModel, h0, grid) -> Trajectory:
    """Solve forward from ``h0`` at ``grid[0]``; the states are the predictions."""
    f = model.dynamics.numpy_field()
    return solve_ivp(f, _column(h0), grid, model.solver)


def predict_past(model: NeuralCodeModel, hf, grid_desc) -> Trajectory:
    """Solve backward from ``hf`` at ``grid_desc[0]`` along the decreasing grid."""
    f = model.dynamics.numpy_field()
    return solve_fvp(f, _column(hf), grid_desc, model.solver)


def reconstruction_mse(model: NeuralCodeModel, series: TimeSeries, direction: str = "forward") -> tuple[float, np.ndarray]:
    """Reconstruct a whole series from one boundary observation.

    ``forward`` starts at the first point, ``backward`` at the last point.
    Returns the MSE (``inf`` if the solve blew up) and the predictions in
    the series' own time order.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        if direction == "forward":
            pred = predict_future(model, series.values[0], series.times).as_array()
        elif direction == "backward":
            pred = predict_past(model, series.values[-1], series.times[::-1]).as_array()[::-1]
        else:
            raise ContractError(f"direction must be 'forward' or 'backward', got {direction!r}")
        err = float(np.mean((pred - series.values) ** 2))
    return (err if np.isfinite(err) else float("inf")), pred
