"""Time series containers, spiral and surrogate generators, CSV I/O, windowing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ParseError
from .odesolve import SolverConfig, solve_ivp

TASKS = ("impute", "extrap_fwd", "extrap_bwd")

# the literal imputation start pattern is 1, 3, 6, 9, ... (1-based)
IMPUTE_FIRST_GAP = 2
IMPUTE_GAP = 3


@dataclass
class TimeSeries:
    times: np.ndarray
    values: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        self.values = values
        if len(self.times) != len(values):
            raise DataError(f"{len(self.times)} timestamps for {len(values)} observations")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            bad = int(np.argmax(np.diff(self.times) <= 0)) + 1
            raise DataError(f"timestamps must be strictly increasing (row {bad})")
        if not np.all(np.isfinite(values)):
            raise DataError("observations contain NaN or infinite values")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(values.shape[1])]
        if len(self.feature_names) != values.shape[1]:
            raise DataError("one feature name per column is required")

    def __len__(self):
        return len(self.times)

    @property
    def dim(self):
        return self.values.shape[1]

    def slice(self, start, stop) -> "TimeSeries":
        return TimeSeries(self.times[start:stop], self.values[start:stop], list(self.feature_names))


SPIRAL_MATRIX = np.array([[-0.1, 2.0], [-2.0, -0.1]])


def spiral_field(h, t):
    """dx/dt = -0.1 x^3 + 2 y^3, dy/dt = -2 x^3 - 0.1 y^3."""
    return SPIRAL_MATRIX @ (h * h * h)


def gen_spiral(n_points=3000, t_max=25.0, y0=(2.0, 0.0), substeps=20) -> TimeSeries:
    """Sample the cubic spiral on a uniform grid over [0, t_max]."""
    if n_points < 2:
        raise ContractError("gen_spiral needs at least two points")
    times = np.linspace(0.0, t_max, n_points)
    h0 = np.asarray(y0, dtype=float).reshape(2, 1)
    traj = solve_ivp(spiral_field, h0, times, SolverConfig("rk4", steps=substeps))
    return TimeSeries(times, traj.as_array(), ["x", "y"])


def gen_surrogate(n_points=400, dim=1, seed=0, n_components=3, noise=0.0) -> TimeSeries:
    """Sum-of-sines multivariate series on an integer day grid.

    Stands in for the daily climate / hydrology / stock series at desk scale.
    Periods are drawn between 10 and 80 steps so a 7-step window sees real
    curvature.
    """
    rng = np.random.default_rng(seed)
    times = np.arange(n_points, dtype=float)
    values = np.zeros((n_points, dim))
    for j in range(dim):
        periods = rng.uniform(10.0, 80.0, n_components)
        amps = rng.uniform(0.5, 1.5, n_components)
        phases = rng.uniform(0.0, 2 * np.pi, n_components)
        level = rng.uniform(-1.0, 1.0)
        for p, a, ph in zip(periods, amps, phases):
            values[:, j] += a * np.sin(2 * np.pi * times / p + ph)
        values[:, j] += level
        if noise:
            values[:, j] += noise * rng.standard_normal(n_points)
    return TimeSeries(times, values, [f"f{j}" for j in range(dim)])


def _parse_time(raw: str, row: int):
    try:
        return float(raw)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(raw.strip())
    except ValueError:
        raise ParseError(f"row {row}: cannot parse time value {raw!r}") from None


def load_csv(path, time_column=None, feature_columns=None) -> TimeSeries:
    """Read a comma-separated file with a header row.

    The time column (first column by default) may hold reals or ISO-8601
    dates; dates become day offsets from the first row. Rows keep file order
    and gaps are preserved as-is. Row numbers in errors count the header as
    row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    time_column = time_column or header[0]
    if time_column not in header:
        raise ParseError(f"{path}: no column named {time_column!r}")
    if feature_columns is None:
        feature_columns = [h for h in header if h != time_column]
    missing = [c for c in feature_columns if c not in header]
    if missing:
        raise ParseError(f"{path}: missing feature columns {missing}")
    t_idx = header.index(time_column)
    f_idx = [header.index(c) for c in feature_columns]

    raw_times = []
    values = np.empty((len(rows), len(f_idx)))
    for i, row in enumerate(rows):
        rownum = i + 2
        if len(row) != len(header):
            raise ParseError(f"{path}: row {rownum} has {len(row)} fields, header has {len(header)}")
        raw_times.append(_parse_time(row[t_idx], rownum))
        for j, (col, name) in enumerate(zip(f_idx, feature_columns)):
            try:
                values[i, j] = float(row[col])
            except ValueError:
                raise ParseError(f"{path}: row {rownum}, column {name!r}: non-numeric value {row[col]!r}") from None

    if raw_times and isinstance(raw_times[0], (date, datetime)):
        if not all(isinstance(t, (date, datetime)) for t in raw_times):
            raise ParseError(f"{path}: time column mixes dates and numbers")
        origin = raw_times[0]
        times = np.array([(t - origin).total_seconds() / 86400.0 for t in raw_times])
    else:
        if any(isinstance(t, (date, datetime)) for t in raw_times):
            raise ParseError(f"{path}: time column mixes dates and numbers")
        times = np.array(raw_times, dtype=float)
    for i in range(1, len(times)):
        if not times[i] > times[i - 1]:
            raise DataError(f"{path}: timestamps not strictly increasing at row {i + 2}")
    return TimeSeries(times, values, list(feature_columns))


def save_csv(path, series: TimeSeries, time_name="t"):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([time_name, *series.feature_names])
        for t, row in zip(series.times, series.values):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in row)])


@dataclass
class NormStats:
    """Per-feature min-max scaling fitted on a training split."""

    minimum: np.ndarray
    maximum: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, train: TimeSeries) -> "NormStats":
        lo = train.values.min(axis=0)
        hi = train.values.max(axis=0)
        for name, a, b in zip(train.feature_names, lo, hi):
            if not b > a:
                raise DataError(f"feature {name!r} is constant on the training split; cannot min-max scale it")
        return cls(lo, hi, list(train.feature_names))

    def transform(self, series: TimeSeries) -> TimeSeries:
        scaled = (series.values - self.minimum) / (self.maximum - self.minimum)
        return TimeSeries(series.times.copy(), scaled, list(series.feature_names))

    def inverse_transform(self, series: TimeSeries) -> TimeSeries:
        return TimeSeries(series.times.copy(), self.inverse_values(series.values), list(series.feature_names))

    def inverse_values(self, values: np.ndarray) -> np.ndarray:
        return values * (self.maximum - self.minimum) + self.minimum

    def to_dict(self):
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist(), "features": self.feature_names}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["minimum"]), np.array(d["maximum"]), list(d["features"]))


def normalize(series: TimeSeries, stats_from: TimeSeries) -> tuple[TimeSeries, NormStats]:
    """Scale ``series`` with statistics computed on ``stats_from`` only. No clipping."""
    stats = NormStats.fit(stats_from)
    return stats.transform(series), stats


@dataclass
class SplitSpec:
    train_fraction: float = 0.75
    scheme: str = "contiguous-prefix"


def split(series: TimeSeries, spec: SplitSpec | float = 0.75) -> tuple[TimeSeries, TimeSeries]:
    """Contiguous prefix split; no shuffling."""
    frac = spec.train_fraction if isinstance(spec, SplitSpec) else float(spec)
    if not 0.0 < frac < 1.0:
        raise ContractError(f"train fraction must lie in (0, 1), got {frac}")
    n_train = int(round(len(series) * frac))
    if n_train < 1 or n_train >= len(series):
        raise ContractError(f"split of {len(series)} points at {frac} leaves an empty side")
    return series.slice(0, n_train), series.slice(n_train, len(series))


@dataclass
class TaskWindowSet:
    """Windows as (input indices, target indices) pairs, 0-based."""

    task: str
    windows: list[tuple[tuple[int, ...], tuple[int, ...]]]
    seen: int
    predict: int

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)


def impute_starts(n: int, stride: int | None = None) -> list[int]:
    """0-based starts of imputation triples (i, i+1, i+2).

    With ``stride=None`` the written pattern 1, 3, 6, 9, ... (1-based) is
    reproduced: a first gap of 2, then gaps of 3. Any integer stride gives
    evenly spaced starts instead (``stride=2`` is strict alternation).
    """
    starts = []
    i = 0
    first = True
    while i + 2 <= n - 1:
        starts.append(i)
        if stride is None:
            i += IMPUTE_FIRST_GAP if first else IMPUTE_GAP
        else:
            i += stride
        first = False
    return starts


def make_windows(n_points: int, task: str, seen: int = 7, predict: int = 7, stride: int | None = None) -> TaskWindowSet:
    """Index windows for one of the three evaluation tasks.

    ``n_points`` may also be a :class:`TimeSeries`.
    """
    n = len(n_points) if isinstance(n_points, TimeSeries) else int(n_points)
    task = task.replace("-", "_")
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}; expected one of {TASKS}")
    if task == "impute":
        if n < 3:
            raise DataError(f"imputation needs at least 3 points, got {n}")
        if stride is not None and stride < 1:
            raise ContractError("stride must be >= 1")
        windows = [((i, i + 2), (i + 1,)) for i in impute_starts(n, stride)]
        return TaskWindowSet("impute", windows, 2, 1)

    if seen < 1 or predict < 1:
        raise ContractError("seen and predict must be >= 1")
    length = seen + predict
    if n < length:
        raise DataError(f"{task} with seen={seen}, predict={predict} needs at least {length} points, got {n}")
    stride = length if stride is None else stride
    if stride < 1:
        raise ContractError("stride must be >= 1")
    fwd = []
    for i in range(0, n - length + 1, stride):
        fwd.append((tuple(range(i, i + seen)), tuple(range(i + seen, i + length))))
    if task == "extrap_fwd":
        return TaskWindowSet(task, fwd, seen, predict)
    mirror = lambda idx: tuple(sorted(n - 1 - j for j in idx))  # noqa: E731
    bwd = sorted((mirror(inp), mirror(tgt)) for inp, tgt in fwd)
    return TaskWindowSet(task, bwd, seen, predict)


def min_points(task: str, seen: int, predict: int) -> int:
    return 3 if task.replace("-", "_") == "impute" else seen + predict


def spiral_presets():
    """Named train/test sizes for the spiral study."""
    return {"2000-1000": (2000, 1000), "1000-2000": (1000, 2000)}


def spiral_split(preset: str, t_max=25.0, y0=(2.0, 0.0), substeps=20):
    n_train, n_test = spiral_presets()[preset]
    series = gen_spiral(n_train + n_test, t_max, y0, substeps)
    return split(series, n_train / (n_train + n_test))


