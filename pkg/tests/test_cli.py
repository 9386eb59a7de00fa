import csv
import json

import numpy as np
import pytest

from chronode import cli, runner
from chronode.recurrent import canonical_model_names

TINY_RNN = ["--data", "surrogate", "--surrogate-points", "60", "--hidden-dim", "4", "--width", "8", "--epochs", "1",
            "--seen", "3", "--predict", "3", "--seeds", "0,1"]


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def tree(path):
    return sorted(p.relative_to(path).as_posix() for p in path.rglob("*"))


def test_spiral_gen_presets(tmp_path):
    for preset, (n_train, n_test) in {"2000-1000": (2000, 1000), "1000-2000": (1000, 2000)}.items():
        out = tmp_path / preset
        assert run(["spiral-gen", "--preset", preset, "--out", out])[0] == 0
        assert len(read_csv(out / "train.csv")) == n_train + 1
        assert len(read_csv(out / "test.csv")) == n_test + 1
        manifest = json.loads((out / "split.json").read_text())
        assert (manifest["n_train"], manifest["n_test"]) == (n_train, n_test)


def test_spiral_gen_byte_identical(tmp_path):
    for name in ("a", "b"):
        run(["spiral-gen", "--seed", "3", "--out", tmp_path / name])
    for f in ("train.csv", "test.csv", "split.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_spiral_gen_io_error_names_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, out = run(["spiral-gen", "--out", blocker / "sub"], capsys)
    assert code == 2 and str(blocker) in out.err


def test_gen_surrogate(tmp_path):
    path = tmp_path / "s.csv"
    assert run(["gen-surrogate", "--n-points", "50", "--dim", "2", "--out", path])[0] == 0
    rows = read_csv(path)
    assert len(rows) == 51 and len(rows[0]) == 3


def test_unknown_model_lists_all_nine(tmp_path, capsys):
    code, out = run(["train", "--model", "lstm-transformer", "--out", tmp_path / "r"], capsys)
    assert code == 2
    for name in canonical_model_names():
        assert name in out.err
    assert not (tmp_path / "r").exists()


@pytest.mark.parametrize("argv", [["--task", "forecast"], ["--seeds", "x"], ["--activation", "relu"],
                                  ["--task", "reconstruct"], ["--lr", "-1"]])
def test_config_errors_exit_2(tmp_path, argv):
    with pytest.raises(SystemExit) as exc:
        code, _ = run(["train", "--model", "ode-rnn-rnn", *argv, "--out", tmp_path / "r"])
        raise SystemExit(code)
    assert exc.value.code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3_naming_seed(tmp_path, capsys):
    data = tmp_path / "huge.csv"
    vals = np.full(20, 1e200)
    vals[1::2] *= -1
    data.write_text("t,x\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(vals)))
    code, out = run(["train", "--model", "neural-ode", "--data", data, "--normalize", "none", "--width", "4",
                     "--max-iter", "5", "--seeds", "7", "--out", tmp_path / "r"], capsys)
    assert code == 3 and "seed 7" in out.err


def test_train_outputs_and_metrics(tmp_path):
    out = tmp_path / "run"
    assert run(["train", "--model", "code-birnn-gru", "--task", "impute", *TINY_RNN, "--out", out])[0] == 0
    for name in ("model_seed0.ckpt", "model_seed1.ckpt", "loss_seed0.csv", "predictions_seed1_forward.csv",
                 "metrics.csv", "summary.csv", "config.ini", "report.json", "timing.json"):
        assert (out / name).exists(), name
    metrics = read_csv(out / "metrics.csv")
    assert metrics[0] == ["model", "task", "direction", "seed", "mse"]
    per_seed = [float(r[4]) for r in metrics[1:]]
    report = json.loads((out / "report.json").read_text())
    assert report["summary"][0]["mse_avg"] == float(np.mean(per_seed))
    assert report["summary"][0]["std_avg"] == float(np.std(per_seed))
    assert len(report["per_seed"]) == 2


def test_train_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    argv = ["train", "--model", "ode-rnn-lstm", "--task", "extrap-bwd", *TINY_RNN]
    run([*argv, "--out", a])
    run([*argv, "--out", b])
    for name in ("report.json", "metrics.csv", "model_seed1.ckpt", "loss_seed0.csv", "predictions_seed0_backward.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_threads_do_not_change_results(tmp_path, monkeypatch):
    argv = ["train", "--model", "code-rnn-rnn", "--task", "impute", *TINY_RNN]
    run([*argv, "--out", tmp_path / "serial"])
    monkeypatch.setenv("CHRONODE_THREADS", "2")
    run([*argv, "--out", tmp_path / "parallel"])
    assert (tmp_path / "serial" / "report.json").read_bytes() == (tmp_path / "parallel" / "report.json").read_bytes()


def test_config_echo_round_trip(tmp_path):
    first = tmp_path / "first"
    run(["train", "--model", "neural-code", "--width", "6", "--max-iter", "4", "--seeds", "1",
         "--preset", "1000-2000", "--out", first])
    second = tmp_path / "second"
    assert run(["train", "--config", first / "config.ini", "--out", second])[0] == 0
    assert (first / "report.json").read_bytes() == (second / "report.json").read_bytes()


def test_flags_override_config_file(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[run]\nmodel = ode-rnn-rnn\ntask = impute\nseeds = 0\n[train]\nepochs = 5\n")
    cfg = runner.build_config(runner.read_config_file(ini), {"epochs": 1, "model": None})
    assert cfg.model == "ode-rnn-rnn" and cfg.epochs == 1


def test_zero_init_eval_closed_form(tmp_path):
    data = tmp_path / "const.csv"
    data.write_text("t,x\n" + "".join(f"{i},0.6\n" for i in range(40)))
    train = tmp_path / "train"
    assert run(["train", "--model", "code-birnn-lstm", "--task", "impute", "--data", data, "--normalize", "none",
                "--init", "zeros", "--epochs", "0", "--seeds", "0", "--out", train])[0] == 0
    ev = tmp_path / "eval"
    assert run(["eval", "--run", train, "--out", ev])[0] == 0
    report = json.loads((ev / "report.json").read_text())
    # every parameter is zero so every prediction is zero and the error is the squared constant
    assert report["per_seed"][0]["mse"] == pytest.approx(0.36, abs=1e-15)


def test_eval_both_directions(tmp_path):
    train = tmp_path / "train"
    run(["train", "--model", "code-birnn-rnn", "--task", "extrap-fwd", *TINY_RNN, "--out", train])
    ev = tmp_path / "eval"
    assert run(["eval", "--run", train, "--direction", "both", "--seeds", "0", "--out", ev])[0] == 0
    rows = read_csv(ev / "metrics.csv")[1:]
    assert sorted(r[2] for r in rows) == ["backward", "forward"]
    assert (ev / "predictions_seed0_backward.csv").exists()
    assert not list(ev.glob("*.ckpt"))


def test_eval_checkpoint_mismatch(tmp_path, capsys):
    train = tmp_path / "train"
    run(["train", "--model", "ode-rnn-rnn", "--task", "impute", *TINY_RNN, "--out", train])
    code, out = run(["eval", "--run", train, "--model", "code-rnn-rnn", "--out", tmp_path / "e"], capsys)
    assert code == 2 and "ode-rnn-rnn" in out.err
    code, _ = run(["eval", "--run", tmp_path / "nowhere", "--out", tmp_path / "e2"])
    assert code == 2


def test_eval_reproduces_training_metrics(tmp_path):
    train = tmp_path / "train"
    run(["train", "--model", "ode-rnn-gru", "--task", "impute", *TINY_RNN, "--out", train])
    ev = tmp_path / "eval"
    run(["eval", "--run", train, "--out", ev])
    assert read_csv(train / "metrics.csv") == read_csv(ev / "metrics.csv")


def fake_report(path, model, mse):
    rep = {"schema": runner.REPORT_SCHEMA, "model": model, "task": "impute",
           "summary": [{"direction": "forward", "mse_avg": mse, "std_avg": 0.0, "n_seeds": 3}]}
    path.write_text(json.dumps(rep))
    return path


def test_compare_flags_strict_minimum(tmp_path, capsys):
    a = fake_report(tmp_path / "a.json", "code-rnn-rnn", 0.2)
    b = fake_report(tmp_path / "b.json", "code-birnn-rnn", 0.1)
    code, out = run(["compare", a, b, "--out", tmp_path / "cmp.csv"], capsys)
    assert code == 0
    rows = read_csv(tmp_path / "cmp.csv")
    assert rows[0] == ["model", "task", "direction", "mse_avg", "std_avg", "n_seeds", "best"]
    assert [(r[0], r[6]) for r in rows[1:]] == [("code-birnn-rnn", "1"), ("code-rnn-rnn", "0")]
    assert out.out.splitlines()[0] == "| model | task | direction | mse_avg | std_avg | n_seeds | best |"


def test_compare_ties_flag_both(tmp_path):
    a = fake_report(tmp_path / "a.json", "code-rnn-rnn", 0.1)
    b = fake_report(tmp_path / "b.json", "code-birnn-rnn", 0.1)
    run(["compare", a, b, "--out", tmp_path / "cmp.csv"])
    assert [r[6] for r in read_csv(tmp_path / "cmp.csv")[1:]] == ["1", "1"]


def test_compare_schema_errors(tmp_path, capsys):
    a = fake_report(tmp_path / "a.json", "code-rnn-rnn", 0.1)
    b = tmp_path / "b.json"
    b.write_text(json.dumps({"schema": "other-9", "model": "x", "task": "impute", "summary": []}))
    assert run(["compare", a, b], capsys)[0] == 2
    c = fake_report(tmp_path / "c.json", "ode-rnn-rnn", 0.3)
    extra = json.loads(c.read_text())
    extra["surprise"] = 1
    c.write_text(json.dumps(extra))
    assert run(["compare", a, c], capsys)[0] == 2
    assert run(["compare", a], capsys)[0] == 2


def test_no_writes_outside_output_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg").mkdir()
    run(["train", "--model", "code-rnn-lstm", "--task", "impute", *TINY_RNN, "--out", "out/run"])
    run(["eval", "--run", "out/run", "--out", "out/eval"])
    assert {p.split("/")[0] for p in tree(tmp_path)} == {"cfg", "out"}
    assert {p.split("/")[1] for p in tree(tmp_path) if p.startswith("out/")} == {"run", "eval"}
