"""Experiment runs: configuration, per-seed training and evaluation, reports.

The command-line interface is a thin layer over this module, so everything a
command writes can also be produced (and tested) from Python.
"""

from __future__ import annotations

import configparser
import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    NormStats,
    TimeSeries,
    gen_surrogate,
    load_csv,
    make_windows,
    spiral_presets,
    spiral_split,
    split,
)
from .errors import ConfigError, DivergenceError
from .neuralcode import (
    NeuralCodeModel,
    TrainConfig,
    predict_future,
    predict_past,
    reconstruction_mse,
    train_neural_code,
    train_neural_ode,
)
from .nn import DynamicsNet, load_checkpoint, save_checkpoint
from .odesolve import SolverConfig
from .recurrent import (
    ArchSpec,
    RecurrentTrainConfig,
    build_arch,
    canonical_model_names,
    evaluate_windows,
    parse_model_name,
    train_on_windows,
)

REPORT_SCHEMA = "chronode-report-1"
NEURAL_MODELS = ("neural-ode", "neural-code")
RUN_TASKS = ("reconstruct", "impute", "extrap_fwd", "extrap_bwd")
DIRECTION_NAMES = ("forward", "backward")

# which section of the config file each field lives in
_SECTIONS = {
    "run": ("model", "task", "seeds", "direction"),
    "data": ("data", "test_data", "preset", "train_fraction", "time_column", "features", "normalize",
             "surrogate_points", "surrogate_dim", "surrogate_seed", "surrogate_noise", "t_max", "y0"),
    "model": ("hidden_dim", "width", "activation", "init", "backward_order"),
    "train": ("lr", "max_iter", "batch_size", "seq_len", "loss_log_every", "patience", "fvp_weight",
              "epochs", "seen", "predict", "stride"),
    "solver": ("method", "substeps", "rtol", "atol", "max_steps"),
}


@dataclass
class RunConfig:
    """Everything needed to reproduce a run. ``None`` means "resolve a default"."""

    model: str = "neural-code"
    task: str = "reconstruct"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    direction: str = "auto"
    data: str = "spiral"
    test_data: str | None = None
    preset: str = "2000-1000"
    train_fraction: float = 0.75
    time_column: str | None = None
    features: list[str] | None = None
    normalize: str = "auto"
    surrogate_points: int = 400
    surrogate_dim: int = 1
    surrogate_seed: int = 0
    surrogate_noise: float = 0.0
    t_max: float = 25.0
    y0: list[float] = field(default_factory=lambda: [2.0, 0.0])
    hidden_dim: int = 8
    width: int | None = None
    activation: str | None = None
    init: str = "glorot"
    backward_order: str = "reversed"
    lr: float | None = None
    max_iter: int = 2000
    batch_size: int = 1
    seq_len: int = 10
    loss_log_every: int = 20
    patience: int | None = None
    fvp_weight: float = 1.0
    epochs: int = 50
    seen: int = 7
    predict: int = 7
    stride: int | None = None
    method: str = "rk4"
    substeps: int | None = None
    rtol: float = 1e-7
    atol: float = 1e-9
    max_steps: int = 100_000

    @property
    def is_neural(self) -> bool:
        return self.model in NEURAL_MODELS

    def resolved(self) -> "RunConfig":
        """A copy with every automatic default made explicit and validated."""
        cfg = RunConfig(**asdict(self))
        cfg.model = cfg.model.strip().lower().replace("_", "-")
        if not cfg.is_neural:
            try:
                fam, cell = parse_model_name(cfg.model)
            except ConfigError as exc:
                raise ConfigError(f"{exc} (or {', '.join(NEURAL_MODELS)})") from None
            cfg.model = f"{fam.replace('_', '-')}-{cell}"
        cfg.task = cfg.task.replace("-", "_")
        if cfg.task not in RUN_TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(RUN_TASKS)}")
        if cfg.task == "reconstruct" and not cfg.is_neural:
            raise ConfigError("task 'reconstruct' applies to neural-ode and neural-code only")
        if not cfg.seeds:
            raise ConfigError("at least one seed is required")
        if cfg.direction not in ("auto", "forward", "backward", "both"):
            raise ConfigError("direction must be auto, forward, backward or both")
        if cfg.normalize == "auto":
            cfg.normalize = "none" if cfg.data == "spiral" else "minmax"
        if cfg.normalize not in ("minmax", "none"):
            raise ConfigError("normalize must be minmax or none")
        if cfg.data == "spiral" and cfg.preset not in spiral_presets():
            raise ConfigError(f"unknown spiral preset {cfg.preset!r}; expected one of {sorted(spiral_presets())}")
        if cfg.init not in ("glorot", "zeros"):
            raise ConfigError("init must be glorot or zeros")
        if cfg.method not in ("rk4", "dopri5"):
            raise ConfigError("method must be rk4 or dopri5")
        if cfg.is_neural:
            big = cfg.data != "spiral"
            cfg.width = cfg.width or (256 if big else 50)
            cfg.activation = cfg.activation or ("elu" if big else "tanh")
            cfg.lr = cfg.lr or 1e-3
            cfg.substeps = cfg.substeps or 10
        else:
            cfg.width = cfg.width or 32
            cfg.activation = cfg.activation or "tanh"
            cfg.lr = cfg.lr or 5e-4
            cfg.substeps = cfg.substeps or 5
        if cfg.activation not in ("tanh", "elu", "sigmoid", "identity"):
            raise ConfigError(f"unknown activation {cfg.activation!r}")
        for name in ("hidden_dim", "width", "batch_size", "seq_len", "loss_log_every", "seen", "predict", "substeps",
                     "max_iter"):
            if getattr(cfg, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if cfg.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if cfg.lr <= 0:
            raise ConfigError("lr must be positive")
        return cfg

    def directions(self) -> list[str]:
        if self.direction == "both":
            return list(DIRECTION_NAMES)
        if self.direction in DIRECTION_NAMES:
            return [self.direction]
        if self.task == "reconstruct":
            return list(DIRECTION_NAMES)
        return ["backward" if self.task == "extrap_bwd" else "forward"]

    def solver(self) -> SolverConfig:
        return SolverConfig(self.method, self.substeps, self.rtol, self.atol, self.max_steps)

    # -- config file round trip ----------------------------------------------

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        values = asdict(self)
        for section, keys in _SECTIONS.items():
            parser[section] = {}
            for key in keys:
                v = values[key]
                if v is None:
                    continue
                if isinstance(v, list):
                    v = ",".join(str(x) for x in v)
                parser[section][key] = repr(v) if isinstance(v, float) else str(v)
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = str(_FIELD_TYPES[key])
    raw = raw.strip()
    if "None" in kind and raw.lower() in ("", "none"):
        return None
    try:
        if kind.startswith("list[int]"):
            return [int(x) for x in raw.replace(" ", "").split(",") if x]
        if kind.startswith("list[float]"):
            return [float(x) for x in raw.replace(" ", "").split(",") if x]
        if kind.startswith("list[str]"):
            return [x.strip() for x in raw.split(",") if x.strip()]
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    """Flat ``{field: value}`` from an INI file; unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            out[key] = _coerce(key, raw)
    return out


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then config-file values, then explicit overrides."""
    values = {}
    values.update(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown settings {sorted(unknown)}")
    return RunConfig(**values).resolved()


# -- data ---------------------------------------------------------------------


@dataclass
class Dataset:
    train: TimeSeries
    test: TimeSeries
    stats: NormStats | None
    description: dict


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data == "spiral":
        train, test = spiral_split(cfg.preset, cfg.t_max, tuple(cfg.y0))
        desc = {"source": "spiral", "preset": cfg.preset, "t_max": cfg.t_max, "y0": list(cfg.y0)}
    elif cfg.data == "surrogate":
        series = gen_surrogate(cfg.surrogate_points, cfg.surrogate_dim, cfg.surrogate_seed, noise=cfg.surrogate_noise)
        train, test = split(series, cfg.train_fraction)
        desc = {"source": "surrogate", "n_points": cfg.surrogate_points, "dim": cfg.surrogate_dim,
                "seed": cfg.surrogate_seed, "noise": cfg.surrogate_noise}
    else:
        try:
            series = load_csv(cfg.data, cfg.time_column, cfg.features)
            if cfg.test_data:
                train, test = series, load_csv(cfg.test_data, cfg.time_column, cfg.features)
            else:
                train, test = split(series, cfg.train_fraction)
        except OSError as exc:
            raise ConfigError(f"cannot read data file: {exc.filename}: {exc.strerror}") from None
        desc = {"source": "csv", "path": str(cfg.data), "test_path": cfg.test_data}
    desc.update({"n_train": len(train), "n_test": len(test), "dim": train.dim})
    stats = None
    if cfg.normalize == "minmax":
        stats = NormStats.fit(train)
        train, test = stats.transform(train), stats.transform(test)
    return Dataset(train, test, stats, desc)


# -- models -------------------------------------------------------------------


def build_model(cfg: RunConfig, dim: int, seed: int):
    rng = np.random.default_rng(seed)
    if cfg.is_neural:
        net = DynamicsNet.create(dim, cfg.width, rng, activation=cfg.activation, scheme=cfg.init)
        return NeuralCodeModel(net, cfg.solver())
    fam, cell = parse_model_name(cfg.model)
    model = build_arch(ArchSpec(fam, cell, cfg.hidden_dim, dim), rng, dynamics_width=cfg.width,
                       activation=cfg.activation, substeps=cfg.substeps, scheme=cfg.init,
                       backward_order=cfg.backward_order)
    model.solver = cfg.solver()
    return model


def _windows(cfg: RunConfig, series: TimeSeries, direction: str):
    task = cfg.task
    if task in ("extrap_fwd", "extrap_bwd"):
        task = "extrap_bwd" if direction == "backward" else "extrap_fwd"
    return make_windows(len(series), task, cfg.seen, cfg.predict, cfg.stride)


def _neural_window_predictions(cfg, model, series, windows, direction):
    """Boundary-value predictions of a Neural ODE/CODE on task windows."""
    rows = []
    for inputs, targets in windows:
        t_in, t_tg = series.times[list(inputs)], series.times[list(targets)]
        if windows.task == "impute":
            fwd = predict_future(model, series.values[inputs[0]], [t_in[0], *t_tg]).as_array()[1:]
            bwd = predict_past(model, series.values[inputs[-1]], [t_in[-1], *t_tg[::-1]]).as_array()[1:][::-1]
            if cfg.model == "neural-code":
                pred = 0.5 * (fwd + bwd)
            else:
                pred = fwd if direction == "forward" else bwd
        elif targets[0] > inputs[-1]:
            pred = predict_future(model, series.values[inputs[-1]], [t_in[-1], *t_tg]).as_array()[1:]
        else:
            pred = predict_past(model, series.values[inputs[0]], [t_in[0], *t_tg[::-1]]).as_array()[1:][::-1]
        rows += list(zip(targets, pred))
    with np.errstate(over="ignore", invalid="ignore"):
        err = float(np.mean([(p - series.values[i]) ** 2 for i, p in rows]))
    return (err if np.isfinite(err) else float("inf")), rows


def evaluate(cfg: RunConfig, model, series: TimeSeries, direction: str):
    """Test MSE and ``(index, prediction)`` rows for one direction."""
    if cfg.is_neural and cfg.task == "reconstruct":
        err, pred = reconstruction_mse(model, series, direction)
        return err, list(enumerate(pred))
    windows = _windows(cfg, series, direction)
    if cfg.is_neural:
        return _neural_window_predictions(cfg, model, series, windows, direction)
    return evaluate_windows(model, series, windows, "past" if direction == "backward" else "future")


@dataclass
class SeedResult:
    seed: int
    params: dict
    history: list
    metrics: list[tuple[str, float]]
    predictions: dict
    seconds: float


def train_seed(cfg: RunConfig, ds: Dataset, seed: int) -> SeedResult:
    try:
        return _train_seed(cfg, ds, seed)
    except DivergenceError as exc:
        raise DivergenceError(f"seed {seed}: {exc}", iteration=exc.iteration) from exc


def _train_seed(cfg: RunConfig, ds: Dataset, seed: int) -> SeedResult:
    start = time.perf_counter()
    model = build_model(cfg, ds.train.dim, seed)
    if cfg.is_neural:
        tcfg = TrainConfig(cfg.max_iter, cfg.lr, cfg.batch_size, cfg.seq_len, seed, cfg.loss_log_every, cfg.patience)
        if cfg.model == "neural-ode":
            params, history = train_neural_ode(model, ds.train, tcfg)
        else:
            params, history = train_neural_code(model, ds.train, tcfg, cfg.fvp_weight)
    else:
        rcfg = RecurrentTrainConfig(cfg.epochs, cfg.lr, seed)
        direction = "backward" if cfg.task == "extrap_bwd" else "forward"
        windows = _windows(cfg, ds.train, direction)
        params, history = train_on_windows(model, ds.train, windows, rcfg, "past" if direction == "backward" else "future")
    metrics, preds = [], {}
    for direction in cfg.directions():
        err, rows = evaluate(cfg, model, ds.test, direction)
        metrics.append((direction, err))
        preds[direction] = rows
    return SeedResult(seed, params, history, metrics, preds, time.perf_counter() - start)


def eval_seed(cfg: RunConfig, ds: Dataset, seed: int, params: dict) -> SeedResult:
    start = time.perf_counter()
    model = build_model(cfg, ds.train.dim, seed)
    target = model.dynamics if cfg.is_neural else model
    target.load_state_dict(params)
    metrics, preds = [], {}
    for direction in cfg.directions():
        err, rows = evaluate(cfg, model, ds.test, direction)
        metrics.append((direction, err))
        preds[direction] = rows
    return SeedResult(seed, params, [], metrics, preds, time.perf_counter() - start)


def thread_cap() -> int:
    raw = os.environ.get("CHRONODE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CHRONODE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_seeds(fn, cfg: RunConfig, ds: Dataset, seeds, *extra) -> list[SeedResult]:
    """Apply ``fn`` to every seed, at most ``CHRONODE_THREADS`` at a time; results keep seed order."""
    workers = min(thread_cap(), len(seeds))
    if workers == 1:
        return [fn(cfg, ds, s, *(e[i] for e in extra)) for i, s in enumerate(seeds)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, cfg, ds, s, *(e[i] for e in extra)) for i, s in enumerate(seeds)]
        return [f.result() for f in futures]


# -- outputs ------------------------------------------------------------------


def summarize(metrics: list[tuple[int, str, float]]) -> list[dict]:
    """Mean and population standard deviation per direction."""
    out = []
    for direction in DIRECTION_NAMES:
        vals = [m for _, d, m in metrics if d == direction]
        if vals:
            arr = np.array(vals)
            with np.errstate(invalid="ignore"):
                out.append({"direction": direction, "mse_avg": float(arr.mean()), "std_avg": float(arr.std()),
                            "n_seeds": len(vals)})
    return out


def _history_rows(history):
    rows = []
    for rec in history:
        if hasattr(rec, "forward_mse"):
            bwd = "" if rec.backward_mse is None else repr(rec.backward_mse)
            rows.append([rec.iteration, repr(rec.forward_mse), bwd, repr(rec.total)])
        else:
            rows.append([rec.epoch, repr(rec.loss)])
    return rows


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_predictions(path: Path, series: TimeSeries, rows, stats: NormStats | None):
    rows = sorted(rows, key=lambda r: r[0])
    idx = [i for i, _ in rows]
    pred = np.array([p for _, p in rows])
    actual = series.values[idx]
    if stats is not None:
        pred, actual = stats.inverse_values(pred), stats.inverse_values(actual)
    header = ["t", *series.feature_names, *(f"{n}_pred" for n in series.feature_names)]
    body = [[repr(float(series.times[i])), *map(repr, map(float, a)), *map(repr, map(float, p))]
            for i, a, p in zip(idx, actual, pred)]
    _write_csv(path, header, body)


def write_outputs(out: Path, cfg: RunConfig, ds: Dataset, results: list[SeedResult], kind: str, write_params=True):
    """Write checkpoints, histories, predictions, metrics and the report into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    files = {"checkpoints": [], "loss_history": [], "predictions": []}
    metrics = []
    for res in results:
        if write_params:
            meta = {"model": cfg.model, "seed": res.seed, "dim": ds.train.dim, "config": asdict(cfg),
                    "normalization": ds.stats.to_dict() if ds.stats else None}
            name = f"model_seed{res.seed}.ckpt"
            save_checkpoint(out / name, res.params, meta)
            files["checkpoints"].append(name)
        if res.history:
            name = f"loss_seed{res.seed}.csv"
            header = ["iteration", "forward_mse", "backward_mse", "total"] if cfg.is_neural else ["epoch", "loss"]
            _write_csv(out / name, header, _history_rows(res.history))
            files["loss_history"].append(name)
        for direction, err in res.metrics:
            metrics.append((res.seed, direction, err))
            name = f"predictions_seed{res.seed}_{direction}.csv"
            _write_predictions(out / name, ds.test, res.predictions[direction], ds.stats)
            files["predictions"].append(name)
    _write_csv(out / "metrics.csv", ["model", "task", "direction", "seed", "mse"],
               [[cfg.model, cfg.task, d, s, repr(m)] for s, d, m in metrics])
    summary = summarize(metrics)
    _write_csv(out / "summary.csv", ["model", "task", "direction", "mse_avg", "std_avg", "n_seeds"],
               [[cfg.model, cfg.task, r["direction"], repr(r["mse_avg"]), repr(r["std_avg"]), r["n_seeds"]]
                for r in summary])
    (out / "config.ini").write_text(cfg.to_ini())
    report = {
        "schema": REPORT_SCHEMA,
        "kind": kind,
        "model": cfg.model,
        "task": cfg.task,
        "seeds": list(cfg.seeds),
        "dataset": ds.description,
        "normalization": {"scheme": cfg.normalize, **(ds.stats.to_dict() if ds.stats else {})},
        "per_seed": [{"seed": s, "direction": d, "mse": m} for s, d, m in metrics],
        "summary": summary,
        "config": asdict(cfg),
        "files": files,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    timing = {"seconds_per_seed": {str(r.seed): r.seconds for r in results}}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    return report


def run_train(cfg: RunConfig, out) -> dict:
    ds = load_dataset(cfg)
    results = run_seeds(train_seed, cfg, ds, cfg.seeds)
    return write_outputs(Path(out), cfg, ds, results, "train")


def load_run_params(run_dir, cfg: RunConfig) -> list[dict]:
    """Per-seed parameter dicts from a training run's checkpoints, checked against ``cfg``."""
    params = []
    for seed in cfg.seeds:
        path = Path(run_dir) / f"model_seed{seed}.ckpt"
        if not path.exists():
            raise ConfigError(f"missing checkpoint {path}")
        ckpt = load_checkpoint(path)
        if ckpt.meta.get("model") != cfg.model:
            raise ConfigError(f"checkpoint {path} holds model {ckpt.meta.get('model')!r}, not {cfg.model!r}")
        params.append(ckpt.params)
    return params


def run_eval(cfg: RunConfig, run_dir, out) -> dict:
    ds = load_dataset(cfg)
    params = load_run_params(run_dir, cfg)
    results = run_seeds(eval_seed, cfg, ds, cfg.seeds, params)
    return write_outputs(Path(out), cfg, ds, results, "eval", write_params=False)


# -- comparison ---------------------------------------------------------------

COMPARE_COLUMNS = ("model", "task", "direction", "mse_avg", "std_avg", "n_seeds", "best")
_REQUIRED_KEYS = {"schema", "model", "task", "summary"}


def load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    try:
        report = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read report {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg})") from None
    if not isinstance(report, dict) or not _REQUIRED_KEYS <= set(report):
        raise ConfigError(f"{path}: not a chronode report")
    if report["schema"] != REPORT_SCHEMA:
        raise ConfigError(f"{path}: report schema {report['schema']!r} differs from {REPORT_SCHEMA!r}")
    return report


def compare_reports(reports: list[dict]) -> list[dict]:
    """One row per (model, task, direction); ``best`` marks the minimum mse_avg
    within each (task, direction) group, every tied row included."""
    if len(reports) < 2:
        raise ConfigError("compare needs at least two reports")
    keys = {frozenset(r) for r in reports}
    if len(keys) > 1:
        raise ConfigError("reports have different fields; they were written by different versions")
    rows = []
    for rep in reports:
        for s in rep["summary"]:
            rows.append({"model": rep["model"], "task": rep["task"], "direction": s["direction"],
                         "mse_avg": s["mse_avg"], "std_avg": s["std_avg"], "n_seeds": s["n_seeds"], "best": False})
    groups = {}
    for row in rows:
        groups.setdefault((row["task"], row["direction"]), []).append(row)
    for group in groups.values():
        low = min(r["mse_avg"] for r in group)
        for r in group:
            r["best"] = r["mse_avg"] == low
    rows.sort(key=lambda r: (r["task"], r["direction"], r["model"]))
    return rows


def compare_markdown(rows: list[dict]) -> str:
    lines = ["| " + " | ".join(COMPARE_COLUMNS) + " |", "|" + "---|" * len(COMPARE_COLUMNS)]
    for r in rows:
        cells = [r["model"], r["task"], r["direction"], f"{r['mse_avg']:.6g}", f"{r['std_avg']:.3g}",
                 str(r["n_seeds"]), "*" if r["best"] else ""]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def write_compare_csv(path, rows: list[dict]):
    _write_csv(Path(path), COMPARE_COLUMNS,
               [[r["model"], r["task"], r["direction"], repr(r["mse_avg"]), repr(r["std_avg"]), r["n_seeds"],
                 int(r["best"])] for r in rows])


def valid_model_names() -> list[str]:
    return list(NEURAL_MODELS) + canonical_model_names()
