"""Command-line entry point: ``airpcm <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DataError, ObservationTable, SyntheticSpec, chronological_split, encode_wind,
                   fit_apply_normalizer, format_ts, generate_synthetic, load_observations, make_windows,
                   random_stations, write_observations, _parse_ts)
from .geo import build_station_graph, write_stations
from .metrics import detect_sudden_changes, evaluate_metrics, historical_average
from .model import AirPCM, AirPCMConfig, CausalAttentionMap, ConfigError
from .report import (export_causal_attention, plot_horizon_mae, plot_training_curve, write_forecast_csv,
                     write_json)
from .train import DivergenceError, TrainConfig, predict_windows, train

log = logging.getLogger("airpcm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
MODEL_KEYS = {"tau", "kappa", "d_h", "d_p", "patch_len", "patch_stride", "omega", "n_heads", "depth",
              "gat_heads", "dropout", "k_neighbors", "conv_kernel", "ffn_mult", "symmetric_graph",
              "use_altitude", "lag_reference"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextlib.contextmanager
def output_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".airpcm.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class RunManifest:
    def __init__(self, command: str, seed: int):
        self.command = command
        self.seed = seed
        self.config: Dict = {}
        self.inputs: Dict[str, str] = {}
        self.outputs: List[str] = []
        self._t0 = time.time()

    def add_input(self, path) -> None:
        p = Path(path)
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file() and not f.name.startswith("."):
                    self.inputs[str(f)] = sha256_file(f)
        else:
            self.inputs[str(p)] = sha256_file(p)

    def add_checkpoint(self, path) -> None:
        for name in ("manifest.json", "weights.bin"):
            self.add_input(Path(path) / name)

    def write(self, path) -> None:
        self.outputs.append(str(path))
        write_json(path, {"command": self.command, "version": __version__, "seed": self.seed,
                          "config": self.config, "inputs": self.inputs, "outputs": self.outputs,
                          "duration_seconds": round(time.time() - self._t0, 3)})


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("AIRPCM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"AIRPCM_SEED must be an integer, got {env!r}") from None


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise DataError(f"{path}: expected a flat JSON object")
    return obj


def load_dataset(data_dir) -> ObservationTable:
    """Load ``stations.csv`` + ``observations.csv`` (names from ``dataset.json`` if present)."""
    d = Path(data_dir)
    for name in ("stations.csv", "observations.csv"):
        if not (d / name).is_file():
            raise DataError(f"missing {name} in data directory {d}")
    meta = _read_json(d / "dataset.json") if (d / "dataset.json").is_file() else {}
    table = load_observations(d / "stations.csv", d / "observations.csv",
                              meta.get("pollutant_names"), meta.get("met_names"))
    return encode_wind(table)


def _station_check(table: ObservationTable, model: AirPCM) -> None:
    ids = [s.id for s in model.graph.stations]
    if table.station_ids != ids:
        raise DataError(f"data stations {table.station_ids[:5]}... do not match checkpoint stations {ids[:5]}...")
    if table.pollutant_names != model.pollutant_names or table.met_names != model.met_names:
        raise DataError("data channels do not match the checkpoint's channel names")


# ---------------------------------------------------------------- subcommands

def cmd_gen_synthetic(args) -> int:
    seed = _seed(args)
    raw = _read_json(args.spec)
    if args.stations is not None:
        raw["N"] = args.stations
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SyntheticSpec(**raw)
    out = Path(args.out)
    manifest = RunManifest("gen-synthetic", spec.seed)
    manifest.add_input(args.spec)
    manifest.config = spec.to_dict()
    with output_lock(out):
        stations = random_stations(spec.N, spec.seed)
        graph = build_station_graph(stations, spec.k_neighbors)
        table = generate_synthetic(spec, graph)
        write_stations(out / "stations.csv", stations)
        write_observations(out / "observations.csv", table)
        write_json(out / "dataset.json", {"pollutant_names": table.pollutant_names, "met_names": table.met_names,
                                          "step_hours": table.step_hours, "synthetic_spec": spec.to_dict()})
        manifest.outputs += [str(out / f) for f in ("stations.csv", "observations.csv", "dataset.json")]
        manifest.write(out / "run_manifest.json")
    print(f"wrote {spec.N} stations x {spec.T} steps to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    seed = _seed(args)
    model_raw = _read_json(args.config) if args.config else {}
    train_raw = _read_json(args.train_config) if args.train_config else {}
    unknown = set(model_raw) - MODEL_KEYS
    if unknown:
        raise UsageError(f"unknown keys in model config: {sorted(unknown)}")
    for key, flag in (("tau", args.tau), ("kappa", args.kappa), ("k_neighbors", args.k_neighbors)):
        if flag is not None:
            model_raw[key] = flag
    for key, flag in (("max_epochs", args.epochs), ("learning_rate", args.lr), ("batch_size", args.batch_size),
                      ("early_stop_patience", args.patience)):
        if flag is not None:
            train_raw[key] = flag
    train_raw["seed"] = seed
    if "early_stop_patience" not in train_raw and train_raw.get("max_epochs", 50) < 5:
        train_raw["early_stop_patience"] = train_raw["max_epochs"]

    table = load_dataset(args.data)
    tau, kappa = model_raw.setdefault("tau", 24), model_raw.setdefault("kappa", 24)
    cfg = AirPCMConfig(N=len(table.stations), K=len(table.pollutant_names), C=len(table.met_names), **model_raw)
    tcfg = TrainConfig.from_dict(train_raw)
    tr, va, te = chronological_split(table, (2, 1, 1), tau, kappa)
    norm, (trn, van) = fit_apply_normalizer(tr, [va])
    train_w = make_windows(trn, tau, kappa, tcfg.train_stride)
    val_w = make_windows(van, tau, kappa, tcfg.val_stride or tau + kappa)
    graph = build_station_graph(table.stations, cfg.k_neighbors, cfg.symmetric_graph)
    model = AirPCM(cfg, graph, seed=seed, pollutant_names=table.pollutant_names, met_names=table.met_names)

    out = Path(args.out)
    manifest = RunManifest("train", seed)
    manifest.add_input(Path(args.data) / "stations.csv")
    manifest.add_input(Path(args.data) / "observations.csv")
    for p in (args.config, args.train_config):
        if p:
            manifest.add_input(p)
    manifest.config = {"model": cfg.to_dict(), "train": tcfg.to_dict()}
    with output_lock(out):
        record = train(model, train_w, val_w, tcfg,
                       progress=lambda e, tl, vm: log.info("epoch %d  train %.4f  val %.4f", e, tl, vm))
        save_checkpoint(out, model, norm, {"best_epoch": record.best_epoch, "best_val_mae": record.best_val_mae,
                                           "step_hours": table.step_hours})
        record.write_csv(out / "training_log.csv")
        plot_training_curve([r.epoch for r in record.epochs], [r.train_loss for r in record.epochs],
                            [r.val_mae for r in record.epochs], out / "training_curve.svg")
        manifest.outputs += [str(out / f) for f in ("manifest.json", "weights.bin", "training_log.csv",
                                                    "training_curve.svg")]
        manifest.write(out / "run_manifest.json")
    print(f"trained {len(record.epochs)} epochs (best {record.best_epoch}, val MAE {record.best_val_mae:.4f}); "
          f"checkpoint in {out}")
    return EXIT_OK


def _select_split(table: ObservationTable, split: str, tau: int, kappa: int) -> ObservationTable:
    if split == "all":
        return table
    parts = dict(zip(("train", "val", "test"), chronological_split(table, (2, 1, 1), tau, kappa)))
    return parts[split]


def _evaluation_windows(args):
    model, norm, ckpt = load_checkpoint(args.checkpoint)
    if norm is None:
        raise DataError(f"checkpoint {args.checkpoint} carries no normalisation statistics")
    table = load_dataset(args.data)
    _station_check(table, model)
    cfg = model.cfg
    part = _select_split(table, args.split, cfg.tau, cfg.kappa)
    windows = make_windows(norm.apply(part), cfg.tau, cfg.kappa, args.stride or cfg.tau + cfg.kappa)
    return model, norm, part, windows


def cmd_evaluate(args) -> int:
    seed = _seed(args)
    model, norm, part, windows = _evaluation_windows(args)
    cfg = model.cfg
    pred_n = predict_windows(model, windows)
    true_n = np.stack([w.future_pollutants for w in windows])
    past_n = np.stack([w.past_pollutants for w in windows])
    pred = norm.denormalize_pollutants(pred_n)
    true = norm.denormalize_pollutants(true_n)
    base = norm.denormalize_pollutants(historical_average(past_n, cfg.kappa))

    names = model.pollutant_names
    ref = names.index("pm25") if "pm25" in names else 0
    flags_full = detect_sudden_changes(part.pollutants[:, ref], part.step_hours)
    flags = np.stack([flags_full[:, w.start_index + cfg.tau:w.start_index + cfg.tau + cfg.kappa] for w in windows])

    report = evaluate_metrics(pred, true, flags, names).to_dict()
    report["sudden_reference_pollutant"] = names[ref]
    report["split"] = args.split
    report["baseline"] = evaluate_metrics(base, true, flags, names).to_dict()
    report["baseline"]["name"] = "historical_average"
    report_path = Path(args.report)
    manifest = RunManifest("evaluate", seed)
    manifest.add_checkpoint(args.checkpoint)
    manifest.add_input(Path(args.data) / "stations.csv")
    manifest.add_input(Path(args.data) / "observations.csv")
    manifest.config = {"split": args.split, "stride": args.stride or cfg.tau + cfg.kappa}
    with output_lock(report_path.parent):
        write_json(report_path, report)
        manifest.outputs.append(str(report_path))
        if not args.no_figures:
            fig = plot_horizon_mae(report, part.step_hours, report_path.with_suffix(".horizon_mae.svg"),
                                   report["baseline"])
            manifest.outputs.append(str(fig))
        manifest.write(report_path.with_suffix(".manifest.json"))
    o = report["overall"]
    print(f"{len(windows)} windows: MAE {o['mae']:.4f}  RMSE {o['rmse']:.4f}  SMAPE {o['smape']:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    seed = _seed(args)
    model, norm, _ = load_checkpoint(args.checkpoint)
    if norm is None:
        raise DataError(f"checkpoint {args.checkpoint} carries no normalisation statistics")
    table = load_dataset(args.data)
    _station_check(table, model)
    cfg = model.cfg
    try:
        at = _parse_ts(args.at)
    except ValueError:
        raise UsageError(f"--at: cannot parse timestamp {args.at!r}") from None
    step = np.timedelta64(int(round(table.step_hours * 3600)), "s")
    first_needed = at - step * (cfg.tau - 1)
    span = f"{format_ts(first_needed)} .. {format_ts(at)} ({cfg.tau} steps of {table.step_hours:g} h)"
    hits = np.nonzero(table.timestamps == at)[0]
    if hits.size == 0 or hits[0] < cfg.tau - 1:
        raise DataError(f"forecast at {format_ts(at)} needs history {span}; data cover "
                        f"{format_ts(table.timestamps[0])} .. {format_ts(table.timestamps[-1])}")
    end = int(hits[0]) + 1
    hist = norm.apply(table.slice(end - cfg.tau, end))
    from .data import WindowSample

    window = WindowSample(hist.pollutants, hist.meteorology, np.zeros((cfg.N, cfg.K, cfg.kappa)),
                          end - cfg.tau, hist.timestamps[0], table.step_hours)
    pred = norm.denormalize_pollutants(predict_windows(model, [window])[0])
    stamps = [format_ts(at + step * (i + 1)) for i in range(cfg.kappa)]
    out = Path(args.out)
    manifest = RunManifest("predict", seed)
    manifest.add_checkpoint(args.checkpoint)
    manifest.add_input(Path(args.data) / "observations.csv")
    manifest.config = {"at": format_ts(at)}
    with output_lock(out.parent):
        write_forecast_csv(out, table.station_ids, model.pollutant_names, stamps, pred)
        manifest.outputs.append(str(out))
        manifest.write(out.with_suffix(".manifest.json"))
    print(f"wrote {cfg.N}x{cfg.K}x{cfg.kappa} forecast to {out}")
    return EXIT_OK


def cmd_export_causality(args) -> int:
    seed = _seed(args)
    model, norm, part, windows = _evaluation_windows(args)
    _, attn = predict_windows(model, windows, with_attention=True)
    cmap = model.causal_map(attn)
    cmap.step_hours = part.step_hours
    out = Path(args.out)
    manifest = RunManifest("export-causality", seed)
    manifest.add_checkpoint(args.checkpoint)
    manifest.add_input(Path(args.data) / "observations.csv")
    manifest.config = {"split": args.split, "windows": len(windows), "lag_reference": model.cfg.lag_reference}
    with output_lock(out):
        info = export_causal_attention(cmap, out / "causal_attention.csv", None if args.no_svg else out)
        manifest.outputs += [info["csv"]] + info["figures"]
        manifest.write(out / "run_manifest.json")
    print(f"wrote {info['rows']} attention rows to {info['csv']}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="airpcm", description="Multi-station, multi-pollutant air quality forecasting.")
    parser.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (falls back to $AIRPCM_SEED, then 0)")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    common.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", parents=[common], help="generate a synthetic dataset with planted lags")
    p.add_argument("--spec", required=True)
    p.add_argument("--stations", type=int, default=None, help="override N")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", parents=[common], help="train a model on a data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="model config JSON")
    p.add_argument("--train-config", default=None, help="training config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=int)
    p.add_argument("--kappa", type=int)
    p.add_argument("--k-neighbors", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (("evaluate", cmd_evaluate, "metrics report on a split"),
                            ("export-causality", cmd_export_causality, "export the causal attention map")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
        p.add_argument("--stride", type=int, default=None, help="window stride (default tau+kappa)")
        if name == "evaluate":
            p.add_argument("--report", required=True)
            p.add_argument("--no-figures", action="store_true")
        else:
            p.add_argument("--out", required=True)
            p.add_argument("--no-svg", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", parents=[common], help="forecast kappa steps after a timestamp")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--at", required=True, help="last observed timestamp, ISO-8601 UTC")
    p.add_argument("--out", default="forecast.csv")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("airpcm: a subcommand is required (see --help)")
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        limiter = contextlib.nullcontext()
        if args.threads:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(args.threads)
        with limiter:
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ConfigError, FileNotFoundError, KeyError, TypeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
