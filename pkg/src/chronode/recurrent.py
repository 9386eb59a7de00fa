"""Recurrent models whose hidden state evolves by a learned ODE between observations.

Three families share the same pieces (one dynamics net, one or two cells, an
identity output layer):

``ode_rnn``
    integrate the hidden state forward across each gap, then apply the cell.
``code_rnn``
    carry two intermediate states, one integrated forward and one backward
    across the gap; their concatenation feeds a single cell whose output is
    used for the prediction only. The intermediate states are what recurs,
    so observations never reach later steps.
``code_birnn``
    two independent sweeps (forward and backward in time), each with its own
    cell whose post-cell state recurs; predictions read the concatenation.

A sequence is given as times, an observation matrix and a boolean mask of
which rows are observed. At an unobserved row the cell update is skipped
(``code_rnn`` instead applies its cell to a zero input, since its cell is the
only map from the widened state back to ``n`` dimensions).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TimeSeries, TaskWindowSet
from .errors import ConfigError, ContractError, DimensionError, DivergenceError
from .nn import Adam, DynamicsNet, LayerParams, Module, init_params, output_layer
from .odesolve import SolverConfig, integrate
from .tensor import Var

FAMILIES = ("ode_rnn", "code_rnn", "code_birnn")
CELL_KINDS = ("rnn", "gru", "lstm")
DIRECTIONS = ("future", "past")
BACKWARD_ORDERS = ("reversed", "literal")

_GATES = {"rnn": ("",), "gru": ("r", "z", "n"), "lstm": ("i", "f", "g", "o")}

# display names of the nine architectures, keyed by (family, cell)
ARCH_NAMES = {
    ("ode_rnn", "rnn"): "ODE-RNN",
    ("ode_rnn", "gru"): "ODE-GRU",
    ("ode_rnn", "lstm"): "ODE-LSTM",
    ("code_rnn", "rnn"): "CODE-RNN",
    ("code_rnn", "gru"): "CODE-GRU",
    ("code_rnn", "lstm"): "CODE-LSTM",
    ("code_birnn", "rnn"): "CODE-BiRNN",
    ("code_birnn", "gru"): "CODE-BiGRU",
    ("code_birnn", "lstm"): "CODE-BiLSTM",
}


@dataclass(frozen=True)
class ArchSpec:
    family: str
    cell: str
    hidden_dim: int = 8
    state_dim: int = 1
    merge: str = "concat"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"unknown cell {self.cell!r}; expected one of {CELL_KINDS}")
        if self.merge != "concat":
            raise ConfigError("concat is the only supported merge")
        if self.hidden_dim < 1 or self.state_dim < 1:
            raise ConfigError("hidden_dim and state_dim must be >= 1")

    @property
    def name(self) -> str:
        return f"{self.family.replace('_', '-')}-{self.cell}"


def canonical_model_names() -> list[str]:
    return [f"{fam.replace('_', '-')}-{cell}" for fam in FAMILIES for cell in CELL_KINDS]


def _model_aliases() -> dict[str, tuple[str, str]]:
    table = {}
    for fam in FAMILIES:
        for cell in CELL_KINDS:
            table[f"{fam.replace('_', '-')}-{cell}"] = (fam, cell)
    for cell in CELL_KINDS:
        table[f"ode-{cell}"] = ("ode_rnn", cell)
        table[f"code-{cell}"] = ("code_rnn", cell)
        table[f"code-bi{cell}"] = ("code_birnn", cell)
    return table


def parse_model_name(name: str) -> tuple[str, str]:
    """``'code-birnn-gru'`` or ``'code-bigru'`` -> ``('code_birnn', 'gru')``."""
    key = name.strip().lower().replace("_", "-")
    table = _model_aliases()
    if key not in table:
        raise ConfigError(f"unknown model {name!r}; valid models: {', '.join(canonical_model_names())}")
    return table[key]


@dataclass
class HiddenState:
    h: Var
    c: Var | None = None


@dataclass
class Cell(Module):
    """Weights of one RNN, GRU or LSTM cell.

    ``state_width`` is the width of the hidden state the cell reads (``2n``
    for the CODE-RNN cell, ``n`` otherwise); its output always has ``n`` rows.
    """

    kind: str
    hidden_dim: int
    state_width: int
    input_dim: int
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, kind, hidden_dim, state_width, input_dim, rng, scheme="glorot"):
        if kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {kind!r}")
        n, m, d = hidden_dim, state_width, input_dim
        params = {}
        for g in _GATES[kind]:
            params[f"W_h{g}"] = T.parameter(init_params((n, m), rng, scheme))
            params[f"W_x{g}"] = T.parameter(init_params((n, d), rng, scheme))
            params[f"b{'_' + g if g else ''}"] = T.parameter(np.zeros((n, 1)))
        if kind == "gru":
            params["b_hn"] = T.parameter(np.zeros((n, 1)))
            if m != n:
                params["P"] = T.parameter(init_params((n, m), rng, scheme))
        return cls(kind, n, m, d, params)

    def named_parameters(self):
        return list(self.params.items())

    def gate(self, g: str, h: Var, x: Var, kind: str) -> Var:
        p = self.params
        bias = p[f"b_{g}"] if g else p["b"]
        return T.dense_sum([(p[f"W_h{g}"], h), (p[f"W_x{g}"], x)], bias, kind)


def cell_param_count(kind: str, n: int, m: int, d: int) -> int:
    per_gate = n * m + n * d + n
    if kind == "rnn":
        return per_gate
    if kind == "gru":
        return 3 * per_gate + n + (n * m if m != n else 0)
    return 4 * per_gate


def cell_step(cell: Cell, prev: HiddenState, x: Var) -> HiddenState:
    """One discrete update of ``cell`` on hidden state ``prev`` and input ``x``."""
    if prev.h.rows != cell.state_width:
        raise DimensionError(f"{cell.kind} cell reads a {cell.state_width}-row state, got {prev.h.rows}")
    if x.rows != cell.input_dim:
        raise DimensionError(f"{cell.kind} cell reads a {cell.input_dim}-row input, got {x.rows}")
    h = prev.h
    if cell.kind == "rnn":
        return HiddenState(cell.gate("", h, x, "tanh"))
    if cell.kind == "gru":
        p = cell.params
        r = cell.gate("r", h, x, "sigmoid")
        z = cell.gate("z", h, x, "sigmoid")
        recur = T.dense(p["W_hn"], h, p["b_hn"])
        cand = T.tanh(T.add(T.dense(p["W_xn"], x, p["b_n"]), T.hadamard(r, recur)))
        carried = T.matmul(p["P"], h) if "P" in p else h
        # z = 1 gives the candidate, z = 0 keeps the (projected) previous state
        return HiddenState(T.add(carried, T.hadamard(z, T.sub(cand, carried))))
    i = cell.gate("i", h, x, "sigmoid")
    f = cell.gate("f", h, x, "sigmoid")
    g = cell.gate("g", h, x, "tanh")
    o = cell.gate("o", h, x, "sigmoid")
    c_prev = prev.c if prev.c is not None else T.constant(np.zeros((cell.hidden_dim, 1)))
    c = T.add(T.hadamard(f, c_prev), T.hadamard(i, g))
    return HiddenState(T.hadamard(o, T.tanh(c)), c)


class RecurrentModel(Module):
    def __init__(self, spec: ArchSpec, dynamics: DynamicsNet, cells: list[Cell], output: LayerParams,
                 solver: SolverConfig | None = None, backward_order: str = "reversed"):
        self.spec = spec
        self.dynamics = dynamics
        self.cells = list(cells)
        self.output = output
        self.solver = solver or SolverConfig("rk4", steps=10)
        if backward_order not in BACKWARD_ORDERS:
            raise ConfigError(f"backward_order must be one of {BACKWARD_ORDERS}")
        self.backward_order = backward_order
        n = spec.hidden_dim
        if dynamics.state_dim != n:
            raise DimensionError(f"dynamics net acts on {dynamics.state_dim} dims, hidden_dim is {n}")
        expected = 2 if spec.family == "code_birnn" else 1
        if len(self.cells) != expected:
            raise DimensionError(f"{spec.family} needs {expected} cell(s), got {len(self.cells)}")
        width = 2 * n if spec.family == "code_rnn" else n
        for c in self.cells:
            if (c.kind, c.hidden_dim, c.state_width, c.input_dim) != (spec.cell, n, width, spec.state_dim):
                raise DimensionError(f"cell shape does not fit {spec.name}")
        out_in = 2 * n if spec.family == "code_birnn" else n
        if (output.n_in, output.n_out) != (out_in, spec.state_dim):
            raise DimensionError(f"output layer must map {out_in} -> {spec.state_dim}")

    @property
    def family(self):
        return self.spec.family

    @property
    def name(self):
        return self.spec.name

    def named_parameters(self):
        out = [(f"dynamics.{k}", p) for k, p in self.dynamics.named_parameters()]
        tags = ["fwd", "bwd"] if self.family == "code_birnn" else ["cell"]
        for tag, cell in zip(tags, self.cells):
            out += [(f"{tag}.{k}", p) for k, p in cell.named_parameters()]
        out += [(f"output.{k}", p) for k, p in self.output.named_parameters()]
        return out

    def zero_state(self) -> HiddenState:
        n = self.spec.hidden_dim
        c = T.constant(np.zeros((n, 1))) if self.spec.cell == "lstm" else None
        return HiddenState(T.constant(np.zeros((n, 1))), c)

    def evolve(self, h: Var, t_from: float, t_to: float) -> Var:
        return integrate(self.dynamics, h, float(t_from), float(t_to), self.solver)


def build_arch(spec: ArchSpec, rng, dynamics_width: int = 32, activation: str = "tanh", substeps: int = 5,
               scheme: str = "glorot", backward_order: str = "reversed") -> RecurrentModel:
    """Allocate a model for ``spec`` with freshly initialized parameters."""
    n, d = spec.hidden_dim, spec.state_dim
    dynamics = DynamicsNet.create(n, dynamics_width, rng, activation=activation, scheme=scheme)
    if spec.family == "code_birnn":
        cells = [Cell.create(spec.cell, n, n, d, rng, scheme) for _ in range(2)]
        out_in = 2 * n
    else:
        width = 2 * n if spec.family == "code_rnn" else n
        cells = [Cell.create(spec.cell, n, width, d, rng, scheme)]
        out_in = n
    output = LayerParams.create(d, out_in, rng, "identity", scheme)
    return RecurrentModel(spec, dynamics, cells, output, SolverConfig("rk4", steps=substeps), backward_order)


def arch_param_count(family: str, cell: str, n: int, d: int, width: int) -> int:
    """Closed-form parameter count of ``build_arch`` (single dynamics hidden layer)."""
    dyn = width * (n + 1) + width + n * width + n
    if family == "ode_rnn":
        cells = cell_param_count(cell, n, n, d)
        out = d * n + d
    elif family == "code_rnn":
        cells = cell_param_count(cell, n, 2 * n, d)
        out = d * n + d
    else:
        cells = 2 * cell_param_count(cell, n, n, d)
        out = d * 2 * n + d
    return dyn + cells + out


# -- single steps ---------------------------------------------------------


def ode_rnn_step(model: RecurrentModel, h_prev: HiddenState, x_i: Var | None, t_prev: float, t_i: float) -> HiddenState:
    """Integrate across ``(t_prev, t_i)`` and, if ``x_i`` is given, apply the cell."""
    h_mid = HiddenState(model.evolve(h_prev.h, t_prev, t_i), h_prev.c)
    if x_i is None:
        return h_mid
    return cell_step(model.cells[0], h_mid, x_i)


def code_rnn_step(model: RecurrentModel, fwd_prev: Var, bwd_prev: Var, x_i: Var | None, t_prev: float, t_i: float):
    """Returns ``(h_i, fwd_next, bwd_next)``.

    The forward intermediate is integrated from ``t_prev`` to ``t_i``; the
    backward one is taken as the value at ``t_i`` and integrated back to
    ``t_prev``. Only these two intermediates recur, ``h_i`` is emitted.
    """
    fwd = model.evolve(fwd_prev, t_prev, t_i)
    bwd = model.evolve(bwd_prev, t_i, t_prev)
    merged = T.concat_rows(fwd, bwd)
    cell = model.cells[0]
    if x_i is None:
        x_i = T.constant(np.zeros((cell.input_dim, 1)))
    h_i = cell_step(cell, HiddenState(merged), x_i)
    return h_i.h, fwd, bwd


def _birnn_step(model, which, h_prev: HiddenState, x_i, t_a, t_b) -> HiddenState:
    h_mid = HiddenState(model.evolve(h_prev.h, t_a, t_b), h_prev.c)
    if x_i is None:
        return h_mid
    return cell_step(model.cells[which], h_mid, x_i)


def code_birnn_step_fwd(model: RecurrentModel, h_prev: HiddenState, x_i: Var | None, t_a: float, t_b: float) -> HiddenState:
    """Forward-sweep update: integrate from ``t_a`` to ``t_b``, then the forward cell."""
    return _birnn_step(model, 0, h_prev, x_i, t_a, t_b)


def code_birnn_step_bwd(model: RecurrentModel, h_prev: HiddenState, x_i: Var | None, t_a: float, t_b: float) -> HiddenState:
    """Backward-sweep update with the second, independent cell."""
    return _birnn_step(model, 1, h_prev, x_i, t_a, t_b)


# -- sweeps -----------------------------------------------------------------


def _inputs(xs: np.ndarray, observed: np.ndarray):
    return [T.constant(xs[i].reshape(-1, 1)) if observed[i] else None for i in range(len(xs))]


def _check_sequence(model, times, xs, observed):
    times = np.asarray(times, dtype=float).ravel()
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs.reshape(-1, 1)
    if len(times) != len(xs):
        raise DimensionError(f"{len(times)} times for {len(xs)} observations")
    if len(times) == 0:
        raise ContractError("empty sequence")
    if xs.shape[1] != model.spec.state_dim:
        raise DimensionError(f"model reads {model.spec.state_dim} features, got {xs.shape[1]}")
    if len(times) > 1 and not np.all(np.diff(times) > 0):
        raise ContractError("times must be strictly increasing (use direction='past' to sweep backwards)")
    observed = np.ones(len(times), bool) if observed is None else np.asarray(observed, bool).ravel()
    if len(observed) != len(times):
        raise DimensionError("observed mask must have one entry per time")
    return times, xs, observed


def hidden_sweep(model: RecurrentModel, times, xs, observed=None, direction: str = "future") -> list[Var]:
    """Per-row readout states (input to the output layer), in the rows' own order.

    ``direction='past'`` processes the rows from last to first; each family's
    step is then applied to the reversed sequence, so intervals are
    integrated backwards in time.
    """
    if direction not in DIRECTIONS:
        raise ContractError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    times, xs, observed = _check_sequence(model, times, xs, observed)
    K = len(times)
    order = list(range(K)) if direction == "future" else list(range(K - 1, -1, -1))
    x = _inputs(xs, observed)
    out: list[Var | None] = [None] * K
    fam = model.family

    if fam == "ode_rnn":
        state = model.zero_state()
        prev_t = times[order[0]]
        for i in order:
            state = ode_rnn_step(model, state, x[i], prev_t, times[i])
            out[i] = state.h
            prev_t = times[i]
        return out

    if fam == "code_rnn":
        zero = model.zero_state().h
        fwd, bwd = zero, zero
        prev_t = times[order[0]]
        for i in order:
            out[i], fwd, bwd = code_rnn_step(model, fwd, bwd, x[i], prev_t, times[i])
            prev_t = times[i]
        return out

    fwd_h = [None] * K
    state = model.zero_state()
    prev_t = times[order[0]]
    for i in order:
        state = code_birnn_step_fwd(model, state, x[i], prev_t, times[i])
        fwd_h[i] = state.h
        prev_t = times[i]

    bwd_h = [None] * K
    state = model.zero_state()
    if model.backward_order == "reversed":
        rev = order[::-1]
        prev_t = times[rev[0]]
        for i in rev:
            state = code_birnn_step_bwd(model, state, x[i], prev_t, times[i])
            bwd_h[i] = state.h
            prev_t = times[i]
    else:
        # same index order as the forward sweep, each interval integrated in reverse
        prev_t = times[order[0]]
        for i in order:
            state = code_birnn_step_bwd(model, state, x[i], times[i], prev_t)
            bwd_h[i] = state.h
            prev_t = times[i]
    return [T.concat_rows(a, b) for a, b in zip(fwd_h, bwd_h)]


def forward_sequence(model: RecurrentModel, times, xs, observed=None, direction: str = "future") -> list[Var]:
    """Per-row predictions (``d x 1`` Vars) in the rows' own order."""
    return [output_layer(model.output, h) for h in hidden_sweep(model, times, xs, observed, direction)]


def predict_sequence(model: RecurrentModel, times, xs, observed=None, direction: str = "future") -> np.ndarray:
    """Gradient-free predictions as an ``(K, d)`` array."""
    with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        preds = forward_sequence(model, times, xs, observed, direction)
    return np.stack([p.value[:, 0] for p in preds])


def code_rnn_predict(model: RecurrentModel, times, xs, direction: str = "future", observed=None) -> np.ndarray:
    if model.family != "code_rnn":
        raise ContractError(f"code_rnn_predict called on a {model.family} model")
    return predict_sequence(model, times, xs, observed, direction)


def code_birnn_predict(model: RecurrentModel, times, xs, direction: str = "future", observed=None) -> np.ndarray:
    if model.family != "code_birnn":
        raise ContractError(f"code_birnn_predict called on a {model.family} model")
    return predict_sequence(model, times, xs, observed, direction)


# -- task windows ------------------------------------------------------------


def task_direction(task: str) -> str:
    return "past" if task.replace("-", "_") == "extrap_bwd" else "future"


def window_arrays(series: TimeSeries, window):
    """Slice out a window's span with its observed mask and target positions."""
    inputs, targets = window
    lo = min(min(inputs), min(targets))
    hi = max(max(inputs), max(targets))
    observed = np.zeros(hi - lo + 1, bool)
    observed[[i - lo for i in inputs]] = True
    target_pos = [i - lo for i in targets]
    return series.times[lo:hi + 1], series.values[lo:hi + 1], observed, target_pos


def window_loss(model: RecurrentModel, series: TimeSeries, window, direction: str) -> Var:
    times, xs, observed, target_pos = window_arrays(series, window)
    preds = forward_sequence(model, times, xs, observed, direction)
    terms = [T.mse(preds[j], xs[j].reshape(-1, 1)) for j in target_pos]
    return T.lincomb([1.0 / len(terms)] * len(terms), terms)


def evaluate_windows(model: RecurrentModel, series: TimeSeries, windows: TaskWindowSet, direction: str | None = None):
    """Test MSE over every target point of every window, and the predictions.

    Returns ``(mse, rows)`` with ``rows`` a list of ``(index, prediction)``;
    the MSE is ``inf`` if any prediction is non-finite.
    """
    direction = direction or task_direction(windows.task)
    rows = []
    sq = []
    for window in windows:
        times, xs, observed, target_pos = window_arrays(series, window)
        pred = predict_sequence(model, times, xs, observed, direction)
        for j, idx in zip(target_pos, window[1]):
            rows.append((idx, pred[j]))
            sq.append((pred[j] - xs[j]) ** 2)
    if not sq:
        raise ContractError("no target points to evaluate")
    with np.errstate(over="ignore", invalid="ignore"):
        err = float(np.mean(sq))
    return (err if np.isfinite(err) else float("inf")), rows


@dataclass
class RecurrentTrainConfig:
    epochs: int = 20
    lr: float = 5e-4
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class EpochRecord:
    epoch: int
    loss: float


def train_on_windows(model: RecurrentModel, series: TimeSeries, windows: TaskWindowSet, cfg: RecurrentTrainConfig,
                     direction: str | None = None):
    """One Adam step per window, windows reshuffled every epoch.

    Returns the trained parameter dict and the mean window loss per epoch.
    """
    direction = direction or task_direction(windows.task)
    if len(windows) == 0:
        raise ContractError("no training windows")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(windows)) if cfg.shuffle else np.arange(len(windows))
        total = 0.0
        for k in order:
            opt.zero_grad()
            loss = window_loss(model, series, windows.windows[k], direction)
            value = float(loss.value[0, 0])
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss in epoch {epoch}, window {int(k)}", iteration=epoch)
            T.backward(loss)
            opt.step()
            total += value
        history.append(EpochRecord(epoch, total / len(windows)))
    return model.state_dict(), history


def sequence_loss(model: RecurrentModel, series: TimeSeries) -> Var:
    """MSE of the per-row predictions against every row, all rows observed."""
    preds = forward_sequence(model, series.times, series.values)
    terms = [T.mse(p, y.reshape(-1, 1)) for p, y in zip(preds, series.values)]
    return T.lincomb([1.0 / len(terms)] * len(terms), terms)


def train_sequence(model: RecurrentModel, series: TimeSeries, cfg: RecurrentTrainConfig):
    """Whole-series training: one sweep, one loss, one Adam step per epoch.

    The history holds the loss of each epoch's sweep, measured before its step.
    """
    opt = Adam(model.parameters(), lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        loss = sequence_loss(model, series)
        value = float(loss.value[0, 0])
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss in epoch {epoch}", iteration=epoch)
        T.backward(loss)
        opt.step()
        history.append(EpochRecord(epoch, value))
    return model.state_dict(), history


def train_code_rnn(model: RecurrentModel, series: TimeSeries, cfg: RecurrentTrainConfig):
    if model.family != "code_rnn":
        raise ContractError(f"train_code_rnn called on a {model.family} model")
    return train_sequence(model, series, cfg)


def train_code_birnn(model: RecurrentModel, series: TimeSeries, cfg: RecurrentTrainConfig):
    if model.family != "code_birnn":
        raise ContractError(f"train_code_birnn called on a {model.family} model")
    return train_sequence(model, series, cfg)
