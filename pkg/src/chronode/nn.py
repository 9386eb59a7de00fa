"""Feed-forward layers, the learned vector field, Adam, and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DimensionError
from .tensor import Var

CHECKPOINT_MAGIC = "CHRONODE-CKPT-1"

# Lipschitz constant of each activation on the real line
ACTIVATION_SLOPE = {"tanh": 1.0, "elu": 1.0, "identity": 1.0, "sigmoid": 0.25}


def init_params(shape, rng: np.random.Generator, scheme: str = "glorot") -> np.ndarray:
    """Draw a weight matrix.

    ``glorot`` samples U(-a, a) with a = sqrt(6 / (fan_in + fan_out)), where
    ``shape = (fan_out, fan_in)``. ``zeros`` is used for biases and for the
    degenerate test models.
    """
    rows, cols = shape
    if scheme == "zeros":
        return np.zeros((rows, cols))
    if scheme == "glorot":
        limit = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-limit, limit, size=(rows, cols))
    raise ContractError(f"unknown init scheme {scheme!r}")


class Module:
    """Anything owning named parameter Vars."""

    def named_parameters(self) -> list[tuple[str, Var]]:
        raise NotImplementedError

    def parameters(self) -> list[Var]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise DataError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            value = T.as_tensor(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {value.shape} vs model {p.shape}")
            p.value = np.array(value, copy=True)
            p.zero_grad()

    def n_params(self) -> int:
        return sum(p.value.size for p in self.parameters())


@dataclass
class LayerParams(Module):
    W: Var
    b: Var
    activation: str = "identity"

    def __post_init__(self):
        if self.W.rows != self.b.rows or self.b.cols != 1:
            raise DimensionError(f"layer bias {self.b.shape} does not fit weight {self.W.shape}")

    @classmethod
    def create(cls, n_out, n_in, rng, activation="identity", scheme="glorot"):
        W = T.parameter(init_params((n_out, n_in), rng, scheme))
        b = T.parameter(np.zeros((n_out, 1)))
        return cls(W, b, activation)

    @property
    def n_in(self):
        return self.W.cols

    @property
    def n_out(self):
        return self.W.rows

    def named_parameters(self):
        return [("W", self.W), ("b", self.b)]

    def __call__(self, h: Var) -> Var:
        return output_layer(self, h)


def output_layer(layer: LayerParams, h: Var) -> Var:
    """``activation(W h + b)`` with the bias broadcast over batch columns."""
    if h.rows != layer.n_in:
        raise DimensionError(f"layer expects {layer.n_in} input rows, got {h.rows}")
    return T.dense(layer.W, h, layer.b, layer.activation)


class DynamicsNet(Module):
    """The vector field f(h, t): time is appended to the state at the input."""

    def __init__(self, input_layer: LayerParams, hidden_layers: list[LayerParams], output_layer: LayerParams):
        self.input_layer = input_layer
        self.hidden_layers = list(hidden_layers)
        self.output_layer = output_layer
        d = output_layer.n_out
        if input_layer.n_in != d + 1:
            raise DimensionError(f"input layer takes {input_layer.n_in} inputs, expected state dim {d} + 1")
        width = input_layer.n_out
        for layer in self.hidden_layers + [output_layer]:
            if layer.n_in != width:
                raise DimensionError(f"layer takes {layer.n_in} inputs but previous layer emits {width}")
            width = layer.n_out

    @classmethod
    def create(cls, state_dim, width, rng, activation="tanh", depth=0, scheme="glorot"):
        """``depth`` counts width-by-width hidden layers after the input layer."""
        inp = LayerParams.create(width, state_dim + 1, rng, activation, scheme)
        hidden = [LayerParams.create(width, width, rng, activation, scheme) for _ in range(depth)]
        out = LayerParams.create(state_dim, width, rng, "identity", scheme)
        return cls(inp, hidden, out)

    @property
    def state_dim(self):
        return self.output_layer.n_out

    @property
    def width(self):
        return self.input_layer.n_out

    def layers(self):
        return [self.input_layer, *self.hidden_layers, self.output_layer]

    def named_parameters(self):
        names = ["input"] + [f"hidden{i}" for i in range(len(self.hidden_layers))] + ["output"]
        return [(f"{n}.{k}", p) for n, layer in zip(names, self.layers()) for k, p in layer.named_parameters()]

    def __call__(self, state: Var, t: float) -> Var:
        return forward_mlp(self, state, t)

    def numpy_field(self):
        """A gradient-free copy of the field working on raw arrays, for inference."""
        layers = [(l.W.value.copy(), l.b.value.copy(), _NUMPY_ACT[l.activation]) for l in self.layers()]
        W_in, b_in, act_in = layers[0]
        W_state, w_time = W_in[:, :-1], W_in[:, -1:]

        def f(h, t):
            z = act_in(W_state @ h + w_time * t + b_in)
            for W, b, act in layers[1:]:
                z = act(W @ z + b)
            return z

        return f


_NUMPY_ACT = {
    "identity": lambda x: x,
    "tanh": np.tanh,
    "elu": T._elu,
    "sigmoid": T._sigmoid,
}


def forward_mlp(net: DynamicsNet, state: Var, t: float) -> Var:
    if state.rows != net.state_dim:
        raise DimensionError(f"dynamics net expects a {net.state_dim}-row state, got {state.rows}")
    inp = net.input_layer
    h = T.dense(inp.W, state, inp.b, inp.activation, extra=t)
    for layer in net.hidden_layers:
        h = output_layer(layer, h)
    return output_layer(net.output_layer, h)


def spiral_preset(rng, state_dim=2) -> DynamicsNet:
    return DynamicsNet.create(state_dim, 50, rng, activation="tanh")


def real_data_preset(rng, state_dim) -> DynamicsNet:
    return DynamicsNet.create(state_dim, 256, rng, activation="elu")


def dynamics_param_count(d: int, n: int, depth: int = 0) -> int:
    """Parameter count of ``DynamicsNet.create(d, n, depth=depth)``."""
    return n * (d + 1) + n + depth * (n * n + n) + d * n + d


def lipschitz_bound(net: DynamicsNet) -> float:
    """Upper bound on ||f(h1,t) - f(h2,t)|| / ||h1 - h2|| for fixed t.

    Product over layers of spectral norm times activation slope; the time
    column of the input weight is dropped since t does not vary.
    """
    bound = 1.0
    for i, layer in enumerate(net.layers()):
        W = layer.W.value[:, :-1] if i == 0 else layer.W.value
        bound *= np.linalg.norm(W, 2) * ACTIVATION_SLOPE[layer.activation]
    return float(bound)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0, lr, beta1, beta2, eps)


def adam_step(params: list[Var], grads: list[np.ndarray], state: AdamState):
    """In-place bias-corrected Adam update."""
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("adam_step: params, grads and moment buffers differ in length")
    state.step_count += 1
    k = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**k
    c2 = 1.0 - b2**k
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: grad {g.shape} vs param {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None):
    """Text checkpoint: magic line, one JSON meta line, then name/shape/values."""
    lines = [CHECKPOINT_MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    for name, value in params.items():
        value = T.as_tensor(value)
        lines.append(f"param {name} {value.shape[0]} {value.shape[1]}")
        lines.append(" ".join(repr(float(x)) for x in value.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> Checkpoint:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a {CHECKPOINT_MAGIC} file")
    meta = {}
    params = {}
    i = 1
    if i < len(lines) and lines[i].startswith("meta "):
        meta = json.loads(lines[i][5:])
        i += 1
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 4 or head[0] != "param":
            raise DataError(f"{path}:{i + 1}: malformed parameter header")
        name, rows, cols = head[1], int(head[2]), int(head[3])
        raw = lines[i + 1].split() if i + 1 < len(lines) else []
        if len(raw) != rows * cols:
            raise DataError(f"{path}:{i + 2}: expected {rows * cols} values for {name}, found {len(raw)}")
        params[name] = np.array([float(x) for x in raw]).reshape(rows, cols)
        i += 2
    return Checkpoint(params, meta)
