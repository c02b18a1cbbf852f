"""Flat ``key=value`` run configuration.

Files are UTF-8, one ``key=value`` per line, ``#`` starts a comment line.
Later sources override earlier ones: defaults < data-dir ``data.conf`` <
``--config`` file < command-line flags.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, fields
from typing import Iterable, Mapping


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str = ""
    customer_file: str = ""
    epoch_date: str = "2009-01-01"
    out: str = "run"
    seed: int = 0
    # training
    batch_size: int = 64
    max_epochs: int = 65
    learning_rate: float = 0.0015
    decay_rate: float = 0.96
    validation_interval_steps: int = 100
    optimizer: str = "adam"
    full_validation: bool = False
    max_steps: int = 0
    # split / windows
    test_days: int = 30
    validation_days: int = 60
    validation_range: str = ""
    stride_days: int = 1
    max_missing_fraction: float = 0.05
    # model
    horizontal_kernel_width: int = 3
    vertical_kernel_height: int = 3
    clamp_output: bool = False
    normalize: bool = False
    # cost
    power_watts: float = 0.0
    pue: float = 1.58
    trials: int = 1000

    @property
    def epoch(self) -> dt.date:
        return dt.date.fromisoformat(self.epoch_date)

    @property
    def validation_span(self) -> tuple[int, int] | None:
        if not self.validation_range.strip():
            return None
        lo, _, hi = self.validation_range.partition("-")
        return int(lo), int(hi)

    def update(self, values: Mapping[str, str], source: str = "config") -> "RunConfig":
        kinds = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigFileError(f"{source}: unknown key {key!r}")
            setattr(self, key, _coerce(key, kinds[key], raw, source))
        self.validate()
        return self

    def validate(self) -> None:
        try:
            self.epoch
            self.validation_span
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from exc
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigFileError(f"optimizer must be adam or sgd, got {self.optimizer!r}")

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, kind, raw, source: str):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigFileError(f"{source}: bad value for {key}: {exc}") from None
    return raw


def parse_lines(lines: Iterable[str], source: str = "config") -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, sep, value = s.partition("=")
        if not sep:
            raise ConfigFileError(f"{source}:{n}: expected key=value, got {s!r}")
        out[key.strip()] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_lines(fh, str(path))
