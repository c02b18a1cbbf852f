"""``loadcnn`` command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as dt
import logging
import os
import sys

import numpy as np

from . import data, gradcheck, metrics, model, pipeline, training
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigFileError, RunConfig, parse_lines, read_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("loadcnn")


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _require_path(path: str, what: str) -> None:
    if not path:
        raise CLIError(f"missing {what} path", EXIT_USAGE)
    if not os.path.exists(path):
        raise CLIError(f"{what} path does not exist: {path}", EXIT_USAGE)


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _resolve(args, data_path: str | None) -> tuple[RunConfig, str]:
    """Merge data.conf < --config < flags into a RunConfig."""
    cfg = RunConfig()
    readings = data_path or ""
    if data_path:
        _require_path(data_path, "data")
        readings, base = pipeline.resolve_data_path(data_path)
        _require_path(readings, "readings file")
        cfg.update(base, "data.conf")
    if getattr(args, "config", None):
        _require_path(args.config, "config")
        cfg.update(read_config(args.config), args.config)
    flags = parse_lines(getattr(args, "set", None) or [], "--set")
    for key in ("seed", "out"):
        if getattr(args, key, None) is not None:
            flags[key] = str(getattr(args, key))
    if data_path:
        flags["data"] = data_path
    cfg.update(flags, "flags")
    return cfg, readings


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.customers < 1 or args.days < 9:
        raise CLIError("--customers must be >= 1 and --days >= 9", EXIT_USAGE)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {args.out}: {exc}", EXIT_USAGE) from None
    synth = data.SynthParams()
    series = data.gen_synthetic(args.customers, args.days, args.seed + training.SEED_SYNTH, synth)
    epoch = synth.start_date
    try:
        _write(os.path.join(args.out, pipeline.READINGS_FILE),
               data.serialize_readings(data.series_to_readings(series, epoch)))
        _write(os.path.join(args.out, pipeline.CUSTOMERS_FILE), "".join(s.meter_id + "\n" for s in series))
        _write(os.path.join(args.out, pipeline.DATA_CONF),
               f"epoch_date={epoch.isoformat()}\ncustomer_file={pipeline.CUSTOMERS_FILE}\n")
    except OSError as exc:
        raise CLIError(f"cannot write to {args.out}: {exc}", EXIT_USAGE) from None
    print(f"wrote {args.customers * args.days * data.SLOTS_PER_DAY} readings for {args.customers} customers to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, readings = _resolve(args, args.data)
    os.makedirs(cfg.out, exist_ok=True)
    _write(os.path.join(cfg.out, "config.resolved"), cfg.to_text())

    series = pipeline.load_series(cfg, readings)
    prep = pipeline.prepare(cfg, series)
    if not prep.train or not prep.validation:
        raise CLIError(f"split left {len(prep.train)} training and {len(prep.validation)} validation windows",
                       EXIT_DATA)
    mcfg = pipeline.model_config(cfg)
    tcfg = training.TrainConfig(
        batch_size=cfg.batch_size, max_epochs=cfg.max_epochs, learning_rate=cfg.learning_rate,
        decay_rate=cfg.decay_rate, validation_interval_steps=cfg.validation_interval_steps, seed=cfg.seed,
        optimizer=cfg.optimizer, full_validation=cfg.full_validation, max_steps=cfg.max_steps or None)
    train_b = pipeline.scaled(prep.batch(prep.train), prep.factors(prep.train))
    val_b = pipeline.scaled(prep.batch(prep.validation), prep.factors(prep.validation))

    log.info("training on %d windows (%d validation, %d test)", len(prep.train), len(prep.validation), len(prep.test))
    ckpt, trainlog = training.train(train_b, val_b, mcfg, tcfg)
    ids = prep.id_map
    ckpt.metadata = {
        "epoch_date": cfg.epoch_date,
        "id_map": ids,
        "id_map_hash": data.id_map_hash(ids),
        "split": {"test_days": cfg.test_days, "validation_days": cfg.validation_days,
                  "validation_range": cfg.validation_range, "seed": cfg.seed},
        "stride_days": cfg.stride_days,
        "max_missing_fraction": cfg.max_missing_fraction,
        "scales": prep.scales,
        "normalize": cfg.normalize,
    }
    save_checkpoint(ckpt, os.path.join(cfg.out, "checkpoint.lcnn"))
    _write(os.path.join(cfg.out, "train_log.csv"), trainlog.to_csv())

    hours = trainlog.training_hours
    summary = {
        "split_sizes": {"train": len(prep.train), "validation": len(prep.validation), "test": len(prep.test)},
        "n_customers": prep.n_customers,
        "steps": trainlog.rows[-1].step,
        "initial_train_loss": trainlog.train_losses()[0],
        "final_train_loss": trainlog.train_losses()[-1],
        "loss_best": ckpt.loss_best,
        "best_step": ckpt.step,
        "training_hours": hours,
    }
    _write(os.path.join(cfg.out, "summary.json"), metrics.dump_json(summary))
    if cfg.power_watts > 0 and hours > 0:
        report = metrics.cost_report(metrics.CostParams(cfg.power_watts, hours, cfg.pue, cfg.trials))
        _write(os.path.join(cfg.out, "cost_report.txt"), report.to_text())
        _write(os.path.join(cfg.out, "cost_report.json"), metrics.dump_json(report.to_json()))
    else:
        # device power is an external measurement; leave a stub the user can complete
        _write(os.path.join(cfg.out, "cost_report.txt"),
               f"training_hours={hours:.4f}\npue={cfg.pue:.4f}\ntrials={cfg.trials}\n"
               "# set power_watts to compute ec_kwh and co2e_lbs\n")
    print(f"steps={summary['steps']} loss_best={ckpt.loss_best:.4f} "
          f"train_loss {summary['initial_train_loss']:.4f} -> {summary['final_train_loss']:.4f}")
    print(f"split train={len(prep.train)} validation={len(prep.validation)} test={len(prep.test)}")
    return EXIT_OK


def _load_for_data(checkpoint_path: str, data_path: str):
    _require_path(checkpoint_path, "checkpoint")
    _require_path(data_path, "data")
    ckpt = load_checkpoint(checkpoint_path)
    meta = ckpt.metadata
    readings, base = pipeline.resolve_data_path(data_path)
    _require_path(readings, "readings file")
    cfg = RunConfig()
    split = meta.get("split", {})
    cfg.update({
        "epoch_date": meta.get("epoch_date", cfg.epoch_date),
        "test_days": str(split.get("test_days", cfg.test_days)),
        "validation_days": str(split.get("validation_days", cfg.validation_days)),
        "validation_range": split.get("validation_range", ""),
        "seed": str(split.get("seed", cfg.seed)),
        "stride_days": str(meta.get("stride_days", 1)),
        "max_missing_fraction": str(meta.get("max_missing_fraction", cfg.max_missing_fraction)),
    }, "checkpoint")
    ids = meta.get("id_map")
    series = pipeline.load_series(cfg, readings, allow=set(ids) if ids else None)
    found = data.id_map(series)
    if meta.get("id_map_hash") and data.id_map_hash(found) != meta["id_map_hash"]:
        raise CLIError("customer id map of the data does not match the checkpoint "
                       f"({len(found)} customers in data, {len(ids or {})} in checkpoint)", EXIT_DATA)
    return ckpt, cfg, series


def cmd_evaluate(args) -> int:
    ckpt, cfg, series = _load_for_data(args.checkpoint, args.data)
    prep = pipeline.prepare(cfg, series, scales=ckpt.metadata.get("scales"))
    if not prep.test:
        raise CLIError("test split is empty", EXIT_DATA)
    test = prep.batch(prep.test)
    pred = pipeline.predict_kwh(ckpt.params, test, prep.factors(prep.test))
    meters = [w.meter_id for w in prep.test]
    report = metrics.evaluate(test.target, pred, meters)
    base = metrics.evaluate(test.target, data.persistence_baseline(test.history), meters)

    sizes = {"train": len(prep.train), "validation": len(prep.validation), "test": len(prep.test)}
    text = (f"split.train={sizes['train']}\nsplit.validation={sizes['validation']}\nsplit.test={sizes['test']}\n"
            + report.to_text("loadcnn.") + base.to_text("persistence."))
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "eval_report.txt"), text)
    _write(os.path.join(out_dir, "eval_report.json"), metrics.dump_json(
        {"split_sizes": sizes, "loadcnn": report.to_json(), "persistence": base.to_json()}))
    print(f"split train={sizes['train']} validation={sizes['validation']} test={sizes['test']}")
    print(f"loadcnn     rmse_kwh={report.rmse_kwh:.4f} nrmse={report.nrmse:.4f} mae_kwh={report.mae_kwh:.4f}")
    print(f"persistence rmse_kwh={base.rmse_kwh:.4f} nrmse={base.nrmse:.4f} mae_kwh={base.mae_kwh:.4f}")
    return EXIT_OK


def predict_curve(ckpt, series: list[data.CustomerSeries], meter_id: str, date: dt.date) -> np.ndarray:
    by_meter = {s.meter_id: s for s in series}
    if meter_id not in by_meter:
        raise CLIError(f"unknown customer {meter_id!r}", EXIT_DATA)
    s = by_meter[meter_id]
    try:
        history = data.history_for(s, date)
    except data.DataError as exc:
        raise CLIError(f"insufficient history: {exc}", EXIT_DATA) from None
    window = data.Window(s.customer_index, history, np.zeros(data.SLOTS_PER_DAY), date, meter_id)
    batch = data.make_batch([window], len(series))
    factor = np.array([ckpt.metadata.get("scales", {}).get(meter_id, 1.0)])
    return pipeline.predict_kwh(ckpt.params, batch, factor)[0]


def cmd_predict(args) -> int:
    try:
        date = dt.date.fromisoformat(args.date)
    except ValueError:
        raise CLIError(f"bad --date {args.date!r}; expected YYYY-MM-DD", EXIT_USAGE) from None
    ckpt, _, series = _load_for_data(args.checkpoint, args.data)
    curve = predict_curve(ckpt, series, str(args.customer), date)
    sys.stdout.write("".join(f"{v:.4f}\n" for v in curve))
    return EXIT_OK


def cmd_cost(args) -> int:
    try:
        p = metrics.CostParams(args.power, args.hours, args.pue, args.trials)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_USAGE) from None
    report = metrics.cost_report(p)
    if args.json:
        sys.stdout.write(metrics.dump_json(report.to_json()))
    else:
        print(f"EC={report.ec_kwh:.4f} kWh")
        print(f"CO2e={report.co2e_lbs:.4f} lbs")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    faults = set(args.inject_fault or [])
    report = gradcheck.run_suite(args.seed, args.trials, faults=faults)
    failing = []
    for name, err in report.items():
        ok = err < gradcheck.TOLERANCE
        print(f"{name:8s} max_rel_error={err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failing.append(name)
    if failing:
        print("failing layers: " + ", ".join(failing), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loadcnn", description="LoadCNN day-ahead residential load forecaster")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic smart-meter dataset")
    p.add_argument("--customers", type=int, required=True)
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="ingest, split and train; writes checkpoint and logs")
    p.add_argument("--data", required=True, help="readings file or synth output directory")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics on the test split, with persistence baseline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report directory (default: checkpoint's directory)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="print the 48 half-hourly predictions for one day")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--customer", required=True, help="meter id")
    p.add_argument("--date", required=True, help="day to predict, YYYY-MM-DD")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cost", help="training energy and CO2e estimate")
    p.add_argument("--power", type=float, required=True, help="device power draw, watts")
    p.add_argument("--hours", type=float, required=True, help="wall-clock hours of one training")
    p.add_argument("--pue", type=float, default=metrics.PUE_DEFAULT)
    p.add_argument("--trials", type=int, default=metrics.TRIALS_DEFAULT)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--inject-fault", action="append", choices=sorted(gradcheck._BACKWARDS),
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    raw = os.environ.get("LOADCNN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise CLIError(f"LOADCNN_THREADS must be an integer, got {raw!r}", EXIT_USAGE) from None
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except CLIError as exc:
        print(f"loadcnn: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigFileError as exc:
        print(f"loadcnn: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.NonFiniteLossError as exc:
        print(f"loadcnn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (data.DataError, CheckpointError, model.ConfigError) as exc:
        print(f"loadcnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"loadcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
