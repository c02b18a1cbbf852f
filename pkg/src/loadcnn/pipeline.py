"""Glue between raw reading files and the model: ingest, window, split, scale."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import data, model
from .config import RunConfig, read_config
from .data import CustomerSeries, SplitSpec, Window
from .model import Batch, LoadCNNParams
from .training import SEED_SPLIT

log = logging.getLogger(__name__)

READINGS_FILE = "readings.txt"
CUSTOMERS_FILE = "customers.txt"
DATA_CONF = "data.conf"


def resolve_data_path(path: str) -> tuple[str, dict[str, str]]:
    """Readings file for ``path`` plus any ``data.conf`` settings next to it.

    ``path`` may be a readings file or a directory written by ``loadcnn synth``.
    """
    if os.path.isdir(path):
        readings = os.path.join(path, READINGS_FILE)
        conf_path = os.path.join(path, DATA_CONF)
        base = read_config(conf_path) if os.path.exists(conf_path) else {}
        if base.get("customer_file") and not os.path.isabs(base["customer_file"]):
            base["customer_file"] = os.path.join(path, base["customer_file"])
        return readings, base
    return path, {}


def load_series(cfg: RunConfig, readings_path: str, allow: set[str] | None = None) -> list[CustomerSeries]:
    readings = data.read_readings(readings_path)
    if allow is None and cfg.customer_file:
        allow = data.read_allow_list(cfg.customer_file)
    return data.build_series(readings, epoch=cfg.epoch, allow=allow, max_missing=cfg.max_missing_fraction)


def split_spec(cfg: RunConfig) -> SplitSpec:
    return SplitSpec(test_days=cfg.test_days, validation_days=cfg.validation_days,
                     validation_range=cfg.validation_span, seed=cfg.seed + SEED_SPLIT)


def model_config(cfg: RunConfig) -> model.LoadCNNConfig:
    base = model.default_config(cfg.horizontal_kernel_width, cfg.vertical_kernel_height)
    return dataclasses.replace(base, clamp_output=cfg.clamp_output)


@dataclass
class Prepared:
    series: list[CustomerSeries]
    train: list[Window]
    validation: list[Window]
    test: list[Window]
    scales: dict[str, float]

    @property
    def n_customers(self) -> int:
        return len(self.series)

    @property
    def id_map(self) -> dict[str, int]:
        return data.id_map(self.series)

    def factors(self, windows) -> np.ndarray:
        return np.array([self.scales.get(w.meter_id, 1.0) for w in windows])

    def batch(self, windows: list[Window]) -> Batch:
        return data.make_batch(windows, self.n_customers)


def customer_scales(series: list[CustomerSeries], test_days: int, enabled: bool) -> dict[str, float]:
    """Per-customer max over the days before the test block (1.0 when disabled)."""
    out = {}
    for s in series:
        if not enabled:
            out[s.meter_id] = 1.0
            continue
        keep = max(s.day_count - test_days, 1) * data.SLOTS_PER_DAY
        peak = float(np.max(s.values[:keep]))
        out[s.meter_id] = peak if peak > 0 else 1.0
    return out


def prepare(cfg: RunConfig, series: list[CustomerSeries], scales: dict[str, float] | None = None) -> Prepared:
    if not series:
        raise data.DataError("no customers left after ingestion")
    windows = [w for s in series for w in data.build_windows(s, cfg.stride_days)]
    train, val, test = data.split(windows, split_spec(cfg))
    if scales is None:
        scales = customer_scales(series, cfg.test_days, cfg.normalize)
    return Prepared(series, train, val, test, scales)


def scaled(batch: Batch, factors: np.ndarray) -> Batch:
    f = np.asarray(factors, dtype=np.float64)
    return dataclasses.replace(batch, history=batch.history / f[:, None, None], target=batch.target / f[:, None])


def predict_kwh(params: LoadCNNParams, batch: Batch, factors: np.ndarray) -> np.ndarray:
    """Predictions in kWh for an unscaled batch whose customers use ``factors``."""
    f = np.asarray(factors, dtype=np.float64)
    return model.predict(params, scaled(batch, f)) * f[:, None]
