"""``chronode`` command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure
(non-finite training loss or a solver giving up).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import runner
from .data import gen_surrogate, save_csv, spiral_presets, spiral_split
from .errors import ChronodeError, DataError, DivergenceError, SolverError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _seeds(raw: str) -> list[int]:
    try:
        return [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {raw!r}") from None


def _floats(raw: str) -> list[float]:
    try:
        return [float(s) for s in raw.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}") from None


def _add_run_flags(p: argparse.ArgumentParser):
    """Flags shared by ``train`` and ``eval``; every default is None so config files can fill them."""
    p.add_argument("--config", help="INI file with [run]/[data]/[model]/[train]/[solver] sections")
    p.add_argument("--model", help="neural-ode, neural-code or <family>-<cell>, e.g. code-birnn-gru")
    p.add_argument("--task", help="reconstruct, impute, extrap-fwd or extrap-bwd")
    p.add_argument("--direction", choices=["auto", "forward", "backward", "both"])
    p.add_argument("--seeds", type=_seeds, help="comma-separated, e.g. 0,1,2")
    p.add_argument("--data", help="'spiral', 'surrogate' or a CSV path")
    p.add_argument("--test-data", dest="test_data", help="separate test CSV (then --data is the train split)")
    p.add_argument("--preset", help="spiral split preset, 2000-1000 or 1000-2000")
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--time-column", dest="time_column")
    p.add_argument("--features", type=lambda s: [x.strip() for x in s.split(",")])
    p.add_argument("--normalize", choices=["auto", "minmax", "none"])
    p.add_argument("--surrogate-points", dest="surrogate_points", type=int)
    p.add_argument("--surrogate-dim", dest="surrogate_dim", type=int)
    p.add_argument("--surrogate-seed", dest="surrogate_seed", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--width", type=int, help="hidden width of the dynamics net")
    p.add_argument("--activation", choices=["tanh", "elu", "sigmoid", "identity"])
    p.add_argument("--init", choices=["glorot", "zeros"])
    p.add_argument("--backward-order", dest="backward_order", choices=["reversed", "literal"])
    p.add_argument("--lr", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--loss-log-every", dest="loss_log_every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--fvp-weight", dest="fvp_weight", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seen", type=int)
    p.add_argument("--predict", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--method", choices=["rk4", "dopri5"])
    p.add_argument("--substeps", type=int)
    p.add_argument("--rtol", type=float)
    p.add_argument("--atol", type=float)


_RUN_KEYS = [
    "model", "task", "direction", "seeds", "data", "test_data", "preset", "train_fraction", "time_column", "features",
    "normalize", "surrogate_points", "surrogate_dim", "surrogate_seed", "hidden_dim", "width", "activation", "init",
    "backward_order", "lr", "max_iter", "batch_size", "seq_len", "loss_log_every", "patience", "fvp_weight", "epochs",
    "seen", "predict", "stride", "method", "substeps", "rtol", "atol",
]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chronode", description="Neural ODE / CODE and ODE-driven recurrent models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("spiral-gen", help="write the cubic spiral data set and its train/test split")
    p.add_argument("--preset", default="2000-1000", choices=sorted(spiral_presets()))
    p.add_argument("--t-max", dest="t_max", type=float, default=25.0)
    p.add_argument("--y0", type=_floats, default=[2.0, 0.0])
    p.add_argument("--substeps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; the spiral is noise free")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-surrogate", help="write a sum-of-sines surrogate CSV")
    p.add_argument("--n-points", dest="n_points", type=int, default=400)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("train", help="train one model over several seeds and evaluate on the test split")
    _add_run_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate the checkpoints of a training run")
    p.add_argument("--run", required=True, help="directory written by 'chronode train'")
    _add_run_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="tabulate several reports, flagging the best model per task/direction")
    p.add_argument("reports", nargs="+", help="report.json files or run directories")
    p.add_argument("--out", help="write the table as CSV here")
    return parser


def _overrides(args) -> dict:
    return {k: getattr(args, k, None) for k in _RUN_KEYS}


def cmd_spiral_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if len(args.y0) != 2:
        raise DataError("--y0 takes exactly two numbers")
    train, test = spiral_split(args.preset, args.t_max, tuple(args.y0), args.substeps)
    save_csv(out / "train.csv", train)
    save_csv(out / "test.csv", test)
    manifest = {"preset": args.preset, "t_max": args.t_max, "y0": list(args.y0), "substeps": args.substeps,
                "n_train": len(train), "n_test": len(test), "files": {"train": "train.csv", "test": "test.csv"}}
    (out / "split.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train and {len(test)} test points to {out}")
    return EXIT_OK


def cmd_gen_surrogate(args) -> int:
    series = gen_surrogate(args.n_points, args.dim, args.seed, args.components, args.noise)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(out, series)
    print(f"wrote {len(series)} rows x {series.dim} features to {out}")
    return EXIT_OK


def _print_summary(report: dict):
    for row in report["summary"]:
        print(f"{report['model']} {report['task']} {row['direction']}: "
              f"mse_avg={row['mse_avg']:.6g} std_avg={row['std_avg']:.3g} (n={row['n_seeds']})")


def cmd_train(args) -> int:
    file_values = runner.read_config_file(args.config) if args.config else {}
    cfg = runner.build_config(file_values, _overrides(args))
    report = runner.run_train(cfg, args.out)
    _print_summary(report)
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    echo = run_dir / "config.ini"
    if not echo.exists():
        raise DataError(f"{run_dir} has no config.ini; is it a training run directory?")
    file_values = runner.read_config_file(echo)
    if args.config:
        file_values.update(runner.read_config_file(args.config))
    cfg = runner.build_config(file_values, _overrides(args))
    report = runner.run_eval(cfg, run_dir, args.out)
    _print_summary(report)
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = [runner.load_report(p) for p in args.reports]
    rows = runner.compare_reports(reports)
    if args.out:
        runner.write_compare_csv(args.out, rows)
    print(runner.compare_markdown(rows))
    return EXIT_OK


COMMANDS = {
    "spiral-gen": cmd_spiral_gen,
    "gen-surrogate": cmd_gen_surrogate,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"chronode: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SolverError, FloatingPointError) as exc:
        print(f"chronode: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ChronodeError, ValueError) as exc:
        print(f"chronode: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"chronode: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
