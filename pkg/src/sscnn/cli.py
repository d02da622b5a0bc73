"""Command-line entry point: ``sscnn <subcommand> [flags]``.

Exit codes:
  0  success
  1  input error (unreadable or malformed data, checkpoint or config file)
  2  usage or configuration error, including refusing to overwrite without --force
  3  training aborted on a non-finite loss (last good checkpoint is still written)
  4  a statistical check (analyze --mode decomp-check) failed

Model settings are resolved as built-in defaults < ``--config`` JSON < flags.
``SSCNN_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis
from .data import DEFAULT_SPLIT, DataError, Normalizer, load_csv, make_windows, synthetic_series
from .data import synthetic_table, write_csv
from .model import ConfigError, ModelConfig, count_parameters, load_checkpoint, predict, save_checkpoint
from .train import TrainConfig, TrainingDiverged, evaluate, fit, write_history

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 1, 2, 3, 4

MODEL_DEFAULTS = {"t_in": 168, "t_out": 96, "layers": 2, "channels": 8, "cycle": 24, "delta": 16,
                  "kernel": 2, "spatial": "off"}
TRAIN_DEFAULTS = {"lr": 0.0005, "batch": 8, "epochs": 50, "patience": 5, "seed": 0}
PRESETS = {
    "ecl": {"layers": 4, "channels": 8, "t_in": 168, "t_out": 96, "cycle": 24, "delta": 16,
            "kernel": 2, "spatial": "on"},
    "small": {"layers": 2, "channels": 8, "t_in": 168, "t_out": 96, "cycle": 24, "delta": 16,
              "kernel": 2, "spatial": "off"},
}

log = logging.getLogger("sscnn")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# parser


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _split(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three fractions, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three fractions, got {text!r}")
    return parts


def _model_flags(p: argparse.ArgumentParser, t_out_type=int) -> None:
    g = p.add_argument_group("model")
    d = MODEL_DEFAULTS
    g.add_argument("--t-in", type=int, help=f"input window length (default: {d['t_in']})")
    g.add_argument("--t-out", type=t_out_type, help=f"forecast horizon (default: {d['t_out']})")
    g.add_argument("--layers", type=int, help=f"stacked decomposition layers (default: {d['layers']})")
    g.add_argument("--channels", type=int, help=f"hidden channels d (default: {d['channels']})")
    g.add_argument("--cycle", type=int, help=f"seasonal cycle length c (default: {d['cycle']})")
    g.add_argument("--delta", type=int, help=f"short-term window (default: {d['delta']})")
    g.add_argument("--kernel", type=int, help=f"fusion convolution width (default: {d['kernel']})")
    g.add_argument("--spatial", choices=("on", "off"),
                   help=f"cross-series component (default: {d['spatial']})")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    d = TRAIN_DEFAULTS
    g.add_argument("--lr", type=float, help=f"Adam learning rate (default: {d['lr']})")
    g.add_argument("--batch", type=int, help=f"windows per step (default: {d['batch']})")
    g.add_argument("--epochs", type=int, help=f"maximum epochs (default: {d['epochs']})")
    g.add_argument("--patience", type=int,
                   help=f"epochs without validation improvement before stopping (default: {d['patience']})")
    g.add_argument("--seed", type=int, help=f"random seed (default: {d['seed']})")
    g.add_argument("--split", type=_split, default=DEFAULT_SPLIT,
                   help="train,val,test fractions (default: 0.7,0.1,0.2)")


def _config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path,
                   help="JSON file of setting overrides keyed by flag name, e.g. {\"t_in\": 96} "
                        "(default: none)")


def _output_flags(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--out", default=None, help=out_help)
    p.add_argument("--force", action="store_true", help="overwrite existing output files (default: off)")
    p.add_argument("--format", choices=("csv", "json"), default="csv",
                   help="output format (default: csv)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sscnn",
        description="Train, evaluate and inspect structured-component forecasting models.",
        epilog="exit codes: 0 ok, 1 input error, 2 usage/config error, 3 non-finite loss, "
               "4 check failed",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    p.add_argument("--data", type=Path, required=True, help="CSV with a date column then one column per series")
    p.add_argument("--checkpoint", type=Path, default=Path("sscnn.ckpt.json"),
                   help="checkpoint path; the normalizer is written next to it (default: sscnn.ckpt.json)")
    _model_flags(p)
    _train_flags(p)
    _config_flag(p)
    _output_flags(p, "history CSV path (default: <checkpoint stem>.history.csv)")

    p = sub.add_parser("evaluate", help="MSE/MAE on the test split, de-normalised")
    p.add_argument("--data", type=Path, required=True, help="CSV the model was trained on")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint written by train")
    p.add_argument("--split", type=_split, default=None,
                   help="train,val,test fractions (default: the ones stored in the checkpoint)")
    _output_flags(p, "also write the metrics to this file (default: stdout only)")

    p = sub.add_parser("predict", help="forecast the steps after the end of the data")
    p.add_argument("--data", type=Path, required=True, help="CSV whose last t_in steps form the input")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint written by train")
    _output_flags(p, "forecast file (default: stdout)")

    p = sub.add_parser("analyze", help="conditional correlation reports and decomposition checks")
    p.add_argument("--mode", choices=("autocorr", "crosscorr", "stages", "decomp-check"), required=True,
                   help="report to produce")
    p.add_argument("--data", type=Path, help="CSV input; not needed for decomp-check (default: none)")
    p.add_argument("--series", default=None,
                   help="series name or column index to analyse (default: all)")
    p.add_argument("--cycle", type=int, default=24, help="cycle length c (default: 24)")
    p.add_argument("--delta", type=int, default=16, help="short-term window (default: 16)")
    p.add_argument("--control", default="lt,se,st",
                   help="control levels added in turn, from lt,se,st (default: lt,se,st)")
    p.add_argument("--max-lag", type=int, default=None, help="largest lag reported (default: 2 * cycle)")
    p.add_argument("--long-window", type=int, default=None,
                   help="long-term window; controls default to 7 cycles, stages to an expanding mean")
    p.add_argument("--trials", type=int, default=10_000, help="decomp-check trials (default: 10000)")
    p.add_argument("--dim", type=int, default=4, help="decomp-check component dimension (default: 4)")
    p.add_argument("--seed", type=int, default=0, help="decomp-check seed (default: 0)")
    _output_flags(p, "report file (default: stdout)")

    p = sub.add_parser("params", help="parameter count per configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="start from a named configuration (default: none)")
    _model_flags(p, t_out_type=_int_list)
    _config_flag(p)
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="output format (default: csv)")

    p = sub.add_parser("synth", help="write the synthetic trend + seasonal + AR(1) dataset")
    p.add_argument("--steps", type=int, default=5000, help="number of time steps (default: 5000)")
    p.add_argument("--n-series", type=int, default=1, help="number of series (default: 1)")
    p.add_argument("--cycle", type=int, default=24, help="sinusoid period (default: 24)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--out", required=True, help="CSV path to write")
    p.add_argument("--force", action="store_true", help="overwrite an existing file (default: off)")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _resolve(args, defaults: dict, keys) -> dict:
    """Merge defaults < preset < config file < flags for ``keys``."""
    merged = dict(defaults)
    merged.update(PRESETS.get(getattr(args, "preset", None) or "", {}))
    if getattr(args, "config", None) is not None:
        try:
            doc = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_INPUT) from None
        if not isinstance(doc, dict):
            raise CliError(f"config {args.config} must hold a JSON object", EXIT_INPUT)
        unknown = sorted(set(doc) - set(MODEL_DEFAULTS) - set(TRAIN_DEFAULTS))
        if unknown:
            raise CliError(f"config {args.config}: unknown keys {unknown}", EXIT_USAGE)
        merged.update({k: v for k, v in doc.items() if k in keys})
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return {k: merged[k] for k in keys}


def _model_config(settings: dict, n_series: int) -> ModelConfig:
    try:
        return ModelConfig(n_series=n_series, t_in=settings["t_in"], t_out=settings["t_out"],
                           channels=settings["channels"], layers=settings["layers"],
                           cycle=settings["cycle"], delta=settings["delta"], kernel=settings["kernel"],
                           spatial=settings["spatial"] in ("on", True))
    except (ConfigError, TypeError) as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_USAGE) from None


def _check_writable(path, force: bool) -> None:
    if path not in (None, "-") and Path(path).exists() and not force:
        raise CliError(f"{path} exists; pass --force to overwrite", EXIT_USAGE)


@contextlib.contextmanager
def _open_out(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with Path(path).open("w", newline="") as fh:
            yield fh


def _load(path, **kw):
    try:
        return load_csv(path, **kw)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}", EXIT_INPUT) from None


def normalizer_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + ".normalizer.json")


def _load_model(path):
    try:
        cfg, params, extra = load_checkpoint(path)
        normalizer = Normalizer.load(normalizer_path(path))
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}", EXIT_INPUT) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"bad checkpoint {path}: {exc}", EXIT_INPUT) from None
    return cfg, params, extra, normalizer


def _check_series(cfg: ModelConfig, table) -> None:
    if table.n_series != cfg.n_series:
        raise CliError(f"data has {table.n_series} series, checkpoint expects {cfg.n_series}", EXIT_USAGE)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _emit_rows(out, header, rows, fmt: str) -> None:
    if fmt == "json":
        json.dump([dict(zip(header, r)) for r in rows], out, indent=1)
        out.write("\n")
    else:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_fmt(v) for v in r] for r in rows])


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    table = _load(args.data)
    settings = _resolve(args, {**MODEL_DEFAULTS, **TRAIN_DEFAULTS},
                        list(MODEL_DEFAULTS) + list(TRAIN_DEFAULTS))
    cfg = _model_config(settings, table.n_series)
    try:
        tcfg = TrainConfig(learning_rate=settings["lr"], batch_size=settings["batch"],
                           max_epochs=settings["epochs"], patience=settings["patience"],
                           seed=settings["seed"])
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_USAGE) from None
    history_path = args.out or str(args.checkpoint.with_name(args.checkpoint.stem + ".history.csv"))
    for path in (args.checkpoint, normalizer_path(args.checkpoint), history_path):
        _check_writable(path, args.force)

    code = EXIT_OK
    try:
        result = fit(table.values, cfg, tcfg, args.split)
    except TrainingDiverged as exc:
        print(f"error: {exc}; writing the last good parameters", file=sys.stderr)
        params, history, best_epoch, normalizer = exc.params, exc.history, None, exc.normalizer
        code = EXIT_DIVERGED
    except DataError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    else:
        params, history, best_epoch, normalizer = (result.params, result.history, result.best_epoch,
                                                   result.normalizer)
    extra = {"train": asdict(tcfg), "split": list(args.split), "best_epoch": best_epoch,
             "series": list(table.names)}
    save_checkpoint(args.checkpoint, cfg, params, extra)
    normalizer.save(normalizer_path(args.checkpoint))
    write_history(history_path, history)
    if code == EXIT_OK:
        best = min(history, key=lambda r: r["val_mse"])
        print(f"best epoch {best_epoch}: val_mse {best['val_mse']:.6f} val_mae {best['val_mae']:.6f}")
        print(f"checkpoint written to {args.checkpoint}")
    return code


def cmd_evaluate(args) -> int:
    cfg, params, extra, normalizer = _load_model(args.checkpoint)
    table = _load(args.data)
    _check_series(cfg, table)
    split = args.split or tuple(extra.get("split", DEFAULT_SPLIT))
    _check_writable(args.out, args.force)
    try:
        _, _, test = make_windows(normalizer.apply(table.values), cfg.t_in, cfg.t_out, split,
                                  require=(False, False, True))
    except DataError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    metrics = evaluate(test, cfg, params, normalizer)
    buf = io.StringIO()
    if args.format == "json":
        json.dump(metrics, buf, indent=1)
        buf.write("\n")
    else:
        _emit_rows(buf, ["metric", "value"], list(metrics.items()), "csv")
    sys.stdout.write(buf.getvalue())
    if args.out not in (None, "-"):
        Path(args.out).write_text(buf.getvalue())
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg, params, _, normalizer = _load_model(args.checkpoint)
    table = _load(args.data)
    _check_series(cfg, table)
    if table.n_steps < cfg.t_in:
        raise CliError(f"data has {table.n_steps} steps, model needs t_in = {cfg.t_in}", EXIT_USAGE)
    _check_writable(args.out, args.force)
    window = normalizer.apply(table.values[:, -cfg.t_in:])
    forecast = normalizer.invert(predict(window, cfg, params))
    with _open_out(args.out) as out:
        if args.format == "json":
            json.dump({name: row.tolist() for name, row in zip(table.names, forecast)}, out, indent=1)
            out.write("\n")
        else:
            header = ["series"] + [f"h{i + 1}" for i in range(cfg.t_out)]
            _emit_rows(out, header, [[n, *row] for n, row in zip(table.names, forecast)], "csv")
    return EXIT_OK


def _select_series(table, key):
    if key is None:
        return list(range(table.n_series))
    if key in table.names:
        return [table.names.index(key)]
    try:
        idx = int(key)
    except ValueError:
        raise CliError(f"no series named {key!r}", EXIT_USAGE) from None
    if not 0 <= idx < table.n_series:
        raise CliError(f"series index {idx} out of range", EXIT_USAGE)
    return [idx]


def _decomp_rows(args):
    rows, passed = [], True
    for noise in (False, True):
        chk = analysis.decomposition_distance_check(args.trials, args.dim, noise, args.seed)
        variant = "gaussian" if noise else "deterministic"
        passed &= chk.passed
        rows += [(variant, "passed", chk.passed), (variant, "trials", chk.trials),
                 (variant, "violations", chk.violations), (variant, "raw_violations", chk.raw_violations),
                 (variant, "mean_d12", chk.mean_d12), (variant, "mean_d13", chk.mean_d13),
                 (variant, "mean_diff", chk.mean_diff), (variant, "se_diff", chk.se_diff)]
        print(f"{variant}: {'pass' if chk.passed else 'fail'} trials={chk.trials} "
              f"violations={chk.violations} mean_diff={chk.mean_diff:.6g} se={chk.se_diff:.6g}",
              file=sys.stderr)
    return rows, passed


def cmd_analyze(args) -> int:
    _check_writable(args.out, args.force)
    if args.mode == "decomp-check":
        if args.trials < 2 or args.dim < 1:
            raise CliError("need --trials >= 2 and --dim >= 1", EXIT_USAGE)
        rows, passed = _decomp_rows(args)
        with _open_out(args.out) as out:
            _emit_rows(out, ["variant", "statistic", "value"], rows, args.format)
        return EXIT_OK if passed else EXIT_CHECK_FAILED

    if args.data is None:
        raise CliError(f"--mode {args.mode} needs --data", EXIT_USAGE)
    table = _load(args.data)
    max_lag = args.max_lag or 2 * args.cycle
    levels = tuple(v.strip() for v in args.control.split(",") if v.strip())
    bad = [v for v in levels if v not in analysis.CONTROL_LEVELS]
    if bad:
        raise CliError(f"unknown control levels {bad}; choose from lt,se,st", EXIT_USAGE)
    long_window = args.long_window
    rows = []
    try:
        if args.mode == "autocorr":
            header = ["series", "stage", "lag", "rho"]
            for s in _select_series(table, args.series):
                tab = analysis.progressive_autocorrelation(table.values[s], args.cycle, args.delta,
                                                           range(1, max_lag + 1), long_window, levels)
                for stage, by_lag in tab.items():
                    rows += [(table.names[s], stage, lag, "degenerate" if r is None else r)
                             for lag, r in by_lag.items()]
        elif args.mode == "crosscorr":
            header = ["stage", "pair", "rho"]
            idx = _select_series(table, args.series)
            if len(idx) < 2:
                raise CliError("crosscorr needs at least two series", EXIT_USAGE)
            mats = analysis.progressive_crosscorrelation(table.values[idx], args.cycle, args.delta,
                                                         long_window, levels)
            for stage, mat in mats.items():
                for i in range(len(idx)):
                    for j in range(i + 1, len(idx)):
                        r = mat[i, j]
                        rows.append((stage, f"{table.names[idx[i]]}|{table.names[idx[j]]}",
                                     "degenerate" if np.isnan(r) else r))
        else:
            header = ["series", "stage", "step", "residual", "mu", "sigma"]
            for s in _select_series(table, args.series):
                rep = analysis.control_components(table.values[s], args.cycle, args.delta, long_window)
                for st in rep.stages:
                    rows += [(table.names[s], st.label, rep.start + t, st.residual[t], st.mu[t],
                              st.sigma[t]) for t in range(st.residual.size)]
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    with _open_out(args.out) as out:
        _emit_rows(out, header, rows, args.format)
    return EXIT_OK


def cmd_params(args) -> int:
    settings = _resolve(args, MODEL_DEFAULTS, list(MODEL_DEFAULTS))
    horizons = settings["t_out"] if isinstance(settings["t_out"], list) else [settings["t_out"]]
    header = ["layers", "channels", "t_in", "t_out", "cycle", "delta", "kernel", "spatial", "parameters"]
    rows = []
    for t_out in horizons:
        cfg = _model_config({**settings, "t_out": t_out}, n_series=1)
        rows.append((cfg.layers, cfg.channels, cfg.t_in, cfg.t_out, cfg.cycle, cfg.delta, cfg.kernel,
                     "on" if cfg.spatial else "off", count_parameters(cfg)))
    _emit_rows(sys.stdout, header, rows, args.format)
    return EXIT_OK


def cmd_synth(args) -> int:
    _check_writable(args.out, args.force)
    values = synthetic_series(args.steps, args.n_series, cycle=args.cycle, seed=args.seed)
    write_csv(args.out, synthetic_table(values))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
            "analyze": cmd_analyze, "params": cmd_params, "synth": cmd_synth}


def _thread_limit():
    value = os.environ.get("SSCNN_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(f"SSCNN_THREADS must be a positive integer, got {value!r}", EXIT_USAGE) from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BrokenPipeError:
        # downstream closed early (e.g. piped into head)
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
