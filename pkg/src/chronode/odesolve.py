"""Explicit Runge-Kutta integration of a vector field, forwards and backwards.

A field is any callable ``f(h, t)``. When ``h`` is a :class:`~chronode.tensor.Var`
every stage is recorded so gradients flow to the initial state and to the
field's parameters. Plain numpy arrays are also accepted, which is what data
generation and closed-form checks use.

Final value problems are reduced to initial value problems with the
substitution ``H(s) = h(t_f - s)``, giving ``dH/ds = -f(H, t_f - s)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, StepLimitError, StiffnessError
from .tensor import Var

# Dormand-Prince 5(4) tableau
DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
DP_E = tuple(b5 - b4 for b5, b4 in zip(DP_B5, DP_B4))

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
# PI controller exponents for an order-5 pair
PI_ALPHA = 0.7 / 5
PI_BETA = 0.4 / 5

Field = Callable[[object, float], object]


@dataclass
class SolverConfig:
    """``steps`` is the number of RK4 substeps per grid interval."""

    method: str = "rk4"
    steps: int = 10
    rtol: float = 1e-7
    atol: float = 1e-9
    max_steps: int = 100_000
    dense_output: bool = False

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ContractError(f"unknown solver method {self.method!r}; expected 'rk4' or 'dopri5'")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise ContractError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ContractError("max_steps must be >= 1")


@dataclass
class Trajectory:
    times: np.ndarray
    states: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.states):
            raise ContractError("trajectory needs one state per time")

    def __len__(self):
        return len(self.states)

    def values(self) -> list[np.ndarray]:
        return [s.value if isinstance(s, Var) else T.as_tensor(s) for s in self.states]

    def as_array(self) -> np.ndarray:
        """States as rows: shape ``(len, state_dim)`` for column states."""
        return np.stack([v[:, 0] for v in self.values()])

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation between stored states (no gradient)."""
        times = self.times
        order = np.argsort(times)
        ts = times[order]
        if not ts[0] <= t <= ts[-1]:
            raise ContractError(f"t={t} lies outside the trajectory span [{ts[0]}, {ts[-1]}]")
        vals = [self.values()[i] for i in order]
        j = int(np.searchsorted(ts, t, side="right")) - 1
        j = min(max(j, 0), len(ts) - 2)
        w = (t - ts[j]) / (ts[j + 1] - ts[j])
        return (1 - w) * vals[j] + w * vals[j + 1]


def _comb(coeffs: Sequence[float], terms: Sequence):
    if isinstance(terms[0], Var):
        return T.lincomb(coeffs, terms)
    out = coeffs[0] * np.asarray(terms[0], dtype=float)
    for c, k in zip(coeffs[1:], terms[1:]):
        if c != 0.0:
            out = out + c * k
    return out


def _raw(h) -> np.ndarray:
    return h.value if isinstance(h, Var) else np.asarray(h, dtype=float)


def rk4_step(f: Field, h, t: float, dt: float):
    k1 = f(h, t)
    k2 = f(_comb((1.0, dt / 2), (h, k1)), t + dt / 2)
    k3 = f(_comb((1.0, dt / 2), (h, k2)), t + dt / 2)
    k4 = f(_comb((1.0, dt), (h, k3)), t + dt)
    return _comb((1.0, dt / 6, dt / 3, dt / 3, dt / 6), (h, k1, k2, k3, k4))


def _error_norm(err: np.ndarray, h: np.ndarray, h_new: np.ndarray, rtol: float, atol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(h), np.abs(h_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _dopri5_attempt(f: Field, h, t, dt, k1=None):
    ks = [f(h, t) if k1 is None else k1]
    for i in range(1, 6):
        stage = _comb((1.0,) + tuple(dt * a for a in DP_A[i]), (h, *ks))
        ks.append(f(stage, t + DP_C[i] * dt))
    h_next = _comb((1.0,) + tuple(dt * b for b in DP_B5[:6]), (h, *ks))
    ks.append(f(h_next, t + dt))
    err = dt * sum(e * _raw(k) for e, k in zip(DP_E, ks))
    return h_next, err, ks[-1]


def dopri5_step(f: Field, h, t: float, dt: float, rtol: float, atol: float, err_prev: float = 1.0):
    """One embedded 5(4) step.

    Returns ``(h_next, dt_next, err_est)`` where ``err_est <= 1`` means the
    step is acceptable. ``dt_next`` comes from a PI controller (``err_prev``
    is the previous accepted error; 1.0 reduces it to a plain I controller),
    with the growth factor clipped to [0.2, 5].
    """
    if dt == 0:
        raise ContractError("dopri5_step needs a nonzero dt")
    h_next, err, _ = _dopri5_attempt(f, h, t, dt)
    err_est = _error_norm(err, _raw(h), _raw(h_next), rtol, atol)
    return h_next, dt * _step_factor(err_est, err_prev), err_est


def _step_factor(err_est: float, err_prev: float) -> float:
    if err_est == 0.0:
        return MAX_FACTOR
    factor = SAFETY * err_est ** (-PI_ALPHA) * max(err_prev, 1e-4) ** PI_BETA
    return float(min(MAX_FACTOR, max(MIN_FACTOR, factor)))


def _initial_step(f: Field, h, t, span, rtol, atol) -> float:
    """Hairer-Wanner starting step estimate, computed without gradients."""
    with T.no_grad():
        h0 = T.constant(_raw(h)) if isinstance(h, Var) else _raw(h)
        y = _raw(h0)
        f0 = _raw(f(h0, t))
        scale = atol + rtol * np.abs(y)
        d0 = np.sqrt(np.mean((y / scale) ** 2))
        d1 = np.sqrt(np.mean((f0 / scale) ** 2))
        first = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        first = min(first, span)
        y1 = y + first * f0
        f1 = _raw(f(T.constant(y1) if isinstance(h, Var) else y1, t + first))
        d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / first
        if max(d1, d2) <= 1e-15:
            second = max(1e-6, first * 1e-3)
        else:
            second = (0.01 / max(d1, d2)) ** (1 / 5)
        return float(min(100 * first, second, span))


def _dopri5_interval(f: Field, h, t0: float, t1: float, cfg: SolverConfig, state: dict):
    span = t1 - t0
    dt = state.get("dt") or _initial_step(f, h, t0, span, cfg.rtol, cfg.atol)
    err_prev = state.get("err_prev", 1.0)
    t = t0
    while t < t1:
        if state["n_steps"] >= cfg.max_steps:
            raise StepLimitError(f"dopri5 exceeded {cfg.max_steps} steps on interval [{t0}, {t1}]")
        if dt < 1e-12 * abs(span):
            raise StiffnessError(f"dopri5 step size underflow (dt={dt:.3e}) at t={t} on interval [{t0}, {t1}]")
        last = t + dt >= t1
        step = t1 - t if last else dt
        h_next, err = _dopri5_attempt(f, h, t, step)[:2]
        err_est = _error_norm(err, _raw(h), _raw(h_next), cfg.rtol, cfg.atol)
        state["n_steps"] += 1
        if not np.isfinite(err_est):
            err_est = np.inf
        if err_est <= 1.0:
            h = h_next
            t = t1 if last else t + step
            dt = step * _step_factor(err_est, err_prev)
            err_prev = err_est
            state["accepted"] += 1
        else:
            dt = step * max(MIN_FACTOR, SAFETY * err_est ** (-1 / 5)) if np.isfinite(err_est) else step * MIN_FACTOR
    state["dt"] = dt
    state["err_prev"] = err_prev
    return h


def _check_grid(t_grid, increasing: bool) -> np.ndarray:
    ts = np.asarray(t_grid, dtype=float).ravel()
    if len(ts) < 2:
        raise ContractError("time grid needs at least two points")
    d = np.diff(ts)
    if increasing and not np.all(d > 0):
        raise ContractError("time grid must be strictly increasing")
    if not increasing and not np.all(d < 0):
        raise ContractError("time grid must be strictly decreasing")
    return ts


def _march(f: Field, h0, ts: np.ndarray, cfg: SolverConfig) -> list:
    states = [h0]
    h = h0
    state = {"n_steps": 0, "accepted": 0}
    for a, b in zip(ts[:-1], ts[1:]):
        if cfg.method == "rk4":
            dt = (b - a) / cfg.steps
            for j in range(cfg.steps):
                h = rk4_step(f, h, a + j * dt, dt)
        else:
            h = _dopri5_interval(f, h, a, b, cfg, state)
        states.append(h)
    return states


def solve_ivp(f: Field, h0, t_grid, cfg: SolverConfig | None = None) -> Trajectory:
    """Integrate ``dh/dt = f(h, t)`` from ``h(t_grid[0]) = h0`` across the grid."""
    cfg = cfg or SolverConfig()
    ts = _check_grid(t_grid, increasing=True)
    return Trajectory(ts, _march(f, h0, ts, cfg))


def reversed_field(f: Field, t_final: float) -> Field:
    """The field of ``H(s) = h(t_final - s)``."""

    def g(H, s):
        out = f(H, t_final - s)
        return T.scale(out, -1.0) if isinstance(out, Var) else -np.asarray(out)

    return g


def solve_fvp(f: Field, hf, t_grid_desc, cfg: SolverConfig | None = None) -> Trajectory:
    """Integrate backwards from ``h(t_grid_desc[0]) = hf`` along a decreasing grid."""
    cfg = cfg or SolverConfig()
    ts = _check_grid(t_grid_desc, increasing=False)
    t_final = ts[0]
    s_grid = t_final - ts
    states = _march(reversed_field(f, t_final), hf, s_grid, cfg)
    return Trajectory(ts, states)


def integrate(f: Field, h, t_from: float, t_to: float, cfg: SolverConfig | None = None):
    """State at ``t_to`` starting from ``h`` at ``t_from``, in either direction."""
    if t_to == t_from:
        return h
    if t_to > t_from:
        return solve_ivp(f, h, (t_from, t_to), cfg).states[-1]
    return solve_fvp(f, h, (t_from, t_to), cfg).states[-1]
