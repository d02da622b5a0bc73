import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sscnn import cli
from sscnn.data import synthetic_series, synthetic_table, write_csv

SNAPSHOTS = Path(__file__).parent / "snapshots"
SMALL = ["--t-in", "48", "--t-out", "12", "--delta", "4", "--channels", "4"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_csv(d / "syn.csv", synthetic_table(synthetic_series(1200, 2, seed=0)))
    write_csv(d / "const.csv", synthetic_table(np.full((2, 1200), 4.25)))
    write_csv(d / "three.csv", synthetic_table(synthetic_series(1200, 3, seed=1)))
    return d


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def help_text(*argv):
    env = {**os.environ, "COLUMNS": "100"}
    res = subprocess.run([sys.executable, "-m", "sscnn", *argv, "--help"], capture_output=True, text=True,
                         env=env, check=True)
    return res.stdout


@pytest.mark.parametrize("command", [None, "train", "evaluate", "predict", "analyze", "params", "synth"])
def test_help_snapshot(command):
    argv = [command] if command else []
    got = help_text(*argv)
    snap = SNAPSHOTS / f"help_{command or 'main'}.txt"
    if os.environ.get("SSCNN_UPDATE_SNAPSHOTS"):
        snap.parent.mkdir(exist_ok=True)
        snap.write_text(got)
    assert got == snap.read_text()


@pytest.mark.parametrize("command", ["train", "evaluate", "predict", "analyze", "params", "synth"])
def test_help_documents_every_flag_default(command):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command").choices[command]
    for action in sub._actions:
        if action.dest == "help" or not action.option_strings:
            continue
        text = action.help or ""
        assert action.required or "default" in text, f"{command} {action.option_strings} lacks a default"


def test_spec_flags_exist():
    text = help_text("train")
    for flag in ["--data", "--t-in", "--t-out", "--layers", "--channels", "--cycle", "--delta", "--kernel",
                 "--spatial", "--lr", "--batch", "--epochs", "--patience", "--seed", "--checkpoint", "--out",
                 "--force", "--format"]:
        assert flag in text


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as info:
        cli.main(["params", "--bogus"])
    assert info.value.code == cli.EXIT_USAGE


def test_train_evaluate_predict_round(workdir, capsys):
    ckpt = workdir / "m.json"
    code, out, _ = run(capsys, "train", "--data", workdir / "syn.csv", *SMALL, "--epochs", "2",
                       "--checkpoint", ckpt, "--force")
    assert code == 0 and "val_mse" in out and ckpt.exists()
    assert (workdir / "m.normalizer.json").exists() and (workdir / "m.history.csv").exists()

    code, csv_out, _ = run(capsys, "evaluate", "--data", workdir / "syn.csv", "--checkpoint", ckpt)
    assert code == 0
    code, json_out, _ = run(capsys, "evaluate", "--data", workdir / "syn.csv", "--checkpoint", ckpt,
                            "--format", "json")
    from_csv = {k: float(v) for k, v in (line.split(",") for line in csv_out.strip().splitlines()[1:])}
    assert from_csv == pytest.approx(json.loads(json_out), rel=0, abs=0)

    code, out, _ = run(capsys, "predict", "--data", workdir / "syn.csv", "--checkpoint", ckpt)
    lines = out.strip().splitlines()
    assert code == 0 and lines[0].split(",") == ["series"] + [f"h{i}" for i in range(1, 13)]
    assert len(lines) == 3


def test_config_rejected(workdir, capsys):
    code, _, err = run(capsys, "train", "--data", workdir / "syn.csv", "--t-in", "169", "--cycle", "24",
                       "--checkpoint", workdir / "never.json")
    assert code == cli.EXIT_USAGE and "multiple of cycle" in err
    assert not (workdir / "never.json").exists()


def test_same_seed_identical_checkpoints(workdir, capsys):
    paths = [workdir / "s1a.json", workdir / "s1b.json"]
    for p in paths:
        code, _, _ = run(capsys, "train", "--data", workdir / "syn.csv", *SMALL, "--epochs", "1", "--seed", "1",
                         "--checkpoint", p, "--force")
        assert code == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_constant_model_evaluates_and_predicts_flat(workdir, capsys):
    ckpt = workdir / "c.json"
    run(capsys, "train", "--data", workdir / "const.csv", *SMALL, "--t-out", "3", "--epochs", "2",
        "--checkpoint", ckpt, "--force")
    code, out, _ = run(capsys, "evaluate", "--data", workdir / "const.csv", "--checkpoint", ckpt, "--format", "json")
    assert code == 0 and json.loads(out)["mse"] < 1e-12
    code, out, _ = run(capsys, "predict", "--data", workdir / "const.csv", "--checkpoint", ckpt)
    rows = [line.split(",") for line in out.strip().splitlines()]
    assert len(rows[0]) == 4
    np.testing.assert_allclose([float(v) for r in rows[1:] for v in r[1:]], 4.25, atol=1e-6)


def test_mismatched_series_count_rejected(workdir, capsys):
    ckpt = workdir / "c.json"
    if not ckpt.exists():
        run(capsys, "train", "--data", workdir / "const.csv", *SMALL, "--epochs", "1", "--checkpoint", ckpt)
    for command in ("evaluate", "predict"):
        code, _, err = run(capsys, command, "--data", workdir / "three.csv", "--checkpoint", ckpt)
        assert code == cli.EXIT_USAGE and "3 series" in err


def test_output_collision_needs_force(workdir, capsys):
    ckpt = workdir / "m.json"
    if not ckpt.exists():
        run(capsys, "train", "--data", workdir / "syn.csv", *SMALL, "--epochs", "1", "--checkpoint", ckpt)
    out = workdir / "forecast.csv"
    assert run(capsys, "predict", "--data", workdir / "syn.csv", "--checkpoint", ckpt, "--out", out)[0] == 0
    first = out.read_text()
    code, _, err = run(capsys, "predict", "--data", workdir / "syn.csv", "--checkpoint", ckpt, "--out", out)
    assert code == cli.EXIT_USAGE and "--force" in err
    assert run(capsys, "predict", "--data", workdir / "syn.csv", "--checkpoint", ckpt, "--out", out,
               "--force")[0] == 0
    assert out.read_text() == first


def test_missing_data_file(workdir, capsys):
    code, _, err = run(capsys, "train", "--data", workdir / "nope.csv", "--checkpoint", workdir / "x.json")
    assert code == cli.EXIT_INPUT and "nope.csv" in err


def test_nan_abort_exit_code(workdir, capsys):
    ckpt = workdir / "nan.json"
    code, _, err = run(capsys, "train", "--data", workdir / "syn.csv", *SMALL, "--epochs", "2", "--lr", "1e200",
                       "--checkpoint", ckpt, "--force")
    assert code == cli.EXIT_DIVERGED and "non-finite" in err
    assert ckpt.exists()


def test_config_precedence(workdir, capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"t_out": 7, "layers": 3}))
    code, out, _ = run(capsys, "params", "--config", cfg, "--layers", "1")
    row = out.strip().splitlines()[1].split(",")
    assert code == 0 and row[0] == "1" and row[3] == "7"
    cfg.write_text(json.dumps({"tout": 7}))
    assert run(capsys, "params", "--config", cfg)[0] == cli.EXIT_USAGE


def test_params_presets_and_sweep(capsys):
    code, out, _ = run(capsys, "params", "--preset", "ecl", "--format", "json")
    assert code == 0 and json.loads(out)[0]["parameters"] == 19364
    code, out, _ = run(capsys, "params", "--preset", "small", "--t-out", "96,192,336")
    counts = [int(line.split(",")[-1]) for line in out.strip().splitlines()[1:]]
    assert len(counts) == 3 and counts[0] < counts[1] < counts[2]
    # linear in T_out: equal increments per 48 extra steps
    assert (counts[1] - counts[0]) / 96 == pytest.approx((counts[2] - counts[1]) / 144)


def test_analyze_stages(workdir, capsys):
    code, out, _ = run(capsys, "analyze", "--mode", "stages", "--data", workdir / "syn.csv", "--series", "s0")
    rows = [line.split(",") for line in out.strip().splitlines()]
    assert rows[0] == ["series", "stage", "step", "residual", "mu", "sigma"]
    assert sorted({r[1] for r in rows[1:]}) == sorted(["raw", "minus_lt", "minus_se", "minus_st"])


def test_analyze_autocorr_shrinks(workdir, capsys):
    code, out, _ = run(capsys, "analyze", "--mode", "autocorr", "--data", workdir / "syn.csv", "--series", "0",
                       "--control", "lt,se,st", "--format", "json")
    rows = json.loads(out)
    worst = {}
    for r in rows:
        worst[r["stage"]] = max(worst.get(r["stage"], 0.0), abs(r["rho"]))
    assert worst["none"] > worst["lt+se+st"] and worst["lt+se+st"] < 0.15


def test_analyze_crosscorr(workdir, capsys):
    code, out, _ = run(capsys, "analyze", "--mode", "crosscorr", "--data", workdir / "three.csv", "--delta", "4")
    rows = out.strip().splitlines()
    assert code == 0 and len(rows) == 1 + 4 * 3


def test_analyze_decomp_check(capsys):
    code, out, err = run(capsys, "analyze", "--mode", "decomp-check", "--trials", "500")
    assert code == 0 and "deterministic: pass" in err and "gaussian: pass" in err
    assert "deterministic,violations,0" in out


def test_analyze_needs_data(capsys):
    assert run(capsys, "analyze", "--mode", "stages")[0] == cli.EXIT_USAGE


def test_thread_env_validated(monkeypatch, capsys):
    monkeypatch.setenv("SSCNN_THREADS", "zero")
    assert run(capsys, "params")[0] == cli.EXIT_USAGE
    monkeypatch.setenv("SSCNN_THREADS", "1")
    assert run(capsys, "params")[0] == 0


def test_synth(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert run(capsys, "synth", "--out", out, "--steps", "100")[0] == 0
    assert len(out.read_text().splitlines()) == 101
    assert run(capsys, "synth", "--out", out)[0] == cli.EXIT_USAGE
