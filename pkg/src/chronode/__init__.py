"""Continuous-time sequence models trained on forward and backward reconstruction."""

from .data import TimeSeries, gen_spiral, gen_surrogate, load_csv, make_windows, normalize, split
from .errors import (
    ChronodeError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DivergenceError,
    ParseError,
    SolverError,
    StepLimitError,
    StiffnessError,
)
from .estimators import MinMaxSeriesScaler, NeuralCODERegressor, NeuralODERegressor, RecurrentRegressor
from .neuralcode import NeuralCodeModel, TrainConfig, train_neural_code, train_neural_ode
from .nn import DynamicsNet
from .odesolve import SolverConfig, solve_fvp, solve_ivp
from .recurrent import ArchSpec, build_arch

__version__ = "0.1.0"
