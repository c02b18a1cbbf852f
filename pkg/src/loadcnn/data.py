"""Smart-meter ingestion, windowing, feature encoding, splitting and synthetic data.

Reading files hold one record per line, ``meter_id,daycode,kwh``. The
five-digit daycode packs the day index since the dataset epoch (first three
digits, 1-based) and the half-hour slot 1..48 (last two digits).
"""

from __future__ import annotations

import datetime as dt
import hashlib
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .model import Batch, Sample

log = logging.getLogger(__name__)

SLOTS_PER_DAY = 48
HISTORY_DAYS = 7
ID_WIDTH = 31
ID_PARTS = 2
MAX_MISSING_FRACTION = 0.05


class DataError(ValueError):
    """Malformed or insufficient input data."""


class ParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class SlotRangeError(ParseError):
    pass


class SplitError(DataError):
    """The requested split cannot be carved out of the available days."""


@dataclass(frozen=True)
class MeterReading:
    meter_id: str
    day_index: int
    slot: int
    kwh: float


@dataclass
class CustomerSeries:
    customer_index: int
    start_date: dt.date
    values: np.ndarray
    meter_id: str = ""

    @property
    def day_count(self) -> int:
        return len(self.values) // SLOTS_PER_DAY

    def day(self, date: dt.date) -> int:
        """0-based offset of ``date`` inside the series."""
        return (date - self.start_date).days


@dataclass(frozen=True)
class Window:
    customer_index: int
    history: np.ndarray
    target: np.ndarray
    target_date: dt.date
    meter_id: str = ""


@dataclass(frozen=True)
class SplitSpec:
    test_days: int = 30
    validation_days: int = 60
    # None means "day 8 up to the last day before the test block"
    validation_range: tuple[int, int] | None = None
    seed: int = 0


# --------------------------------------------------------------------------
# reading files


def parse_readings(stream: TextIO | Iterable[str]) -> list[MeterReading]:
    readings = []
    for line_no, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != 3:
            raise ParseError(line_no, f"expected 3 comma-separated fields, got {len(fields)}")
        meter, code, kwh_s = (f.strip() for f in fields)
        if not meter:
            raise ParseError(line_no, "empty meter id")
        if len(code) != 5 or not code.isdigit():
            raise ParseError(line_no, f"daycode {code!r} is not a 5-digit integer")
        day, slot = int(code[:3]), int(code[3:])
        if not 1 <= slot <= SLOTS_PER_DAY:
            raise SlotRangeError(line_no, f"slot {slot} outside 1..{SLOTS_PER_DAY}")
        if day < 1:
            raise ParseError(line_no, f"day index {day} must be >= 1")
        try:
            kwh = float(kwh_s)
        except ValueError:
            raise ParseError(line_no, f"bad kWh value {kwh_s!r}") from None
        if not math.isfinite(kwh) or kwh < 0:
            raise ParseError(line_no, f"kWh value {kwh_s!r} must be finite and non-negative")
        readings.append(MeterReading(meter, day, slot, kwh))
    return readings


def format_reading(r: MeterReading) -> str:
    if not 1 <= r.day_index <= 999:
        raise DataError(f"day index {r.day_index} does not fit the 3-digit daycode")
    return f"{r.meter_id},{r.day_index:03d}{r.slot:02d},{r.kwh!r}"


def serialize_readings(readings: Iterable[MeterReading]) -> str:
    return "".join(format_reading(r) + "\n" for r in readings)


def read_readings(path) -> list[MeterReading]:
    with open(path, encoding="utf-8") as fh:
        return parse_readings(fh)


def read_allow_list(path) -> set[str]:
    with open(path, encoding="utf-8") as fh:
        return {ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")}


def series_to_readings(series: Sequence[CustomerSeries], epoch: dt.date) -> list[MeterReading]:
    out = []
    for s in series:
        first_day = (s.start_date - epoch).days + 1
        for d in range(s.day_count):
            for t in range(SLOTS_PER_DAY):
                out.append(MeterReading(s.meter_id, first_day + d, t + 1,
                                        float(s.values[d * SLOTS_PER_DAY + t])))
    return out


# --------------------------------------------------------------------------
# dense series


def _meter_sort_key(meter_id: str):
    return (0, int(meter_id), "") if meter_id.isdigit() else (1, 0, meter_id)


def build_series(readings: Iterable[MeterReading],
                 expected_days: tuple[int, int] | None = None,
                 epoch: dt.date = dt.date(2009, 1, 1),
                 allow: set[str] | None = None,
                 max_missing: float = MAX_MISSING_FRACTION) -> list[CustomerSeries]:
    """Group readings into one gap-free series per customer.

    ``expected_days`` is the inclusive (first, last) day-index range every
    customer must cover; by default the overall range seen in ``readings``.
    Missing slots are filled from the same slot a week earlier, else a day
    earlier, else 0. Customers missing more than ``max_missing`` of their
    slots are dropped. Customer indices follow sorted meter-id order.
    """
    by_meter: dict[str, dict[tuple[int, int], float]] = defaultdict(dict)
    lo, hi = None, None
    for r in readings:
        if allow is not None and r.meter_id not in allow:
            continue
        by_meter[r.meter_id][(r.day_index, r.slot)] = r.kwh
        lo = r.day_index if lo is None else min(lo, r.day_index)
        hi = r.day_index if hi is None else max(hi, r.day_index)
    if not by_meter:
        return []
    first, last = expected_days if expected_days is not None else (lo, hi)
    n_days = last - first + 1
    if n_days < 1:
        raise DataError(f"empty day range {first}..{last}")

    kept: list[tuple[str, np.ndarray]] = []
    for meter in sorted(by_meter, key=_meter_sort_key):
        cells = by_meter[meter]
        values = np.full(n_days * SLOTS_PER_DAY, np.nan)
        for (day, slot), kwh in cells.items():
            if first <= day <= last:
                values[(day - first) * SLOTS_PER_DAY + slot - 1] = kwh
        missing = np.flatnonzero(np.isnan(values))
        if len(missing) > max_missing * len(values):
            log.warning("dropping meter %s: %.1f%% of slots missing", meter,
                        100.0 * len(missing) / len(values))
            continue
        for i in missing:  # ascending, so earlier fills can feed later ones
            week, day = i - 7 * SLOTS_PER_DAY, i - SLOTS_PER_DAY
            if week >= 0:
                values[i] = values[week]
            elif day >= 0:
                values[i] = values[day]
            else:
                values[i] = 0.0
        kept.append((meter, values))

    start = epoch + dt.timedelta(days=first - 1)
    return [CustomerSeries(i, start, v, meter) for i, (meter, v) in enumerate(kept)]


def id_map(series: Sequence[CustomerSeries]) -> dict[str, int]:
    return {s.meter_id: s.customer_index for s in series}


def id_map_hash(mapping: dict[str, int]) -> str:
    text = "\n".join(f"{k}:{v}" for k, v in sorted(mapping.items(), key=lambda kv: kv[1]))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# windows and features


def build_windows(series: CustomerSeries, stride_days: int = 1) -> list[Window]:
    """Slide a 7-day history / 1-day target window along ``series``."""
    if stride_days < 1:
        raise ValueError("stride_days must be >= 1")
    n_days = series.day_count
    if n_days < HISTORY_DAYS + 1:
        raise DataError(f"series for customer {series.customer_index} has {n_days} days, "
                        f"needs at least {HISTORY_DAYS + 1}")
    days = np.asarray(series.values, dtype=np.float64)[: n_days * SLOTS_PER_DAY].reshape(n_days, SLOTS_PER_DAY)
    out = []
    for k in range(0, n_days - HISTORY_DAYS, stride_days):
        out.append(Window(
            customer_index=series.customer_index,
            history=days[k:k + HISTORY_DAYS].copy(),
            target=days[k + HISTORY_DAYS].copy(),
            target_date=series.start_date + dt.timedelta(days=k + HISTORY_DAYS),
            meter_id=series.meter_id,
        ))
    return out


def history_for(series: CustomerSeries, target_date: dt.date) -> np.ndarray:
    """The [7,48] history preceding ``target_date``."""
    k = series.day(target_date)
    if k < HISTORY_DAYS or k > series.day_count:
        raise DataError(f"need the 7 days before {target_date} for meter {series.meter_id}; "
                        f"series covers {series.start_date} + {series.day_count} days")
    days = series.values.reshape(series.day_count, SLOTS_PER_DAY)
    return days[k - HISTORY_DAYS:k].copy()


def encode_customer_id(index: int, n_customers: int, width: int = ID_WIDTH, parts: int = ID_PARTS) -> np.ndarray:
    """``parts`` concatenated one-hots of size ``width``: the base-``width`` digits of ``index``."""
    capacity = width ** parts
    if n_customers > capacity:
        raise ValueError(f"{n_customers} customers exceed the {parts}x{width} encoding capacity {capacity}")
    if not 0 <= index < n_customers:
        raise IndexError(f"customer index {index} outside 0..{n_customers - 1}")
    out = np.zeros(width * parts)
    rem = index
    for p in reversed(range(parts)):
        out[p * width + rem % width] = 1.0
        rem //= width
    return out


def encode_calendar(date: dt.date) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    month = np.zeros(12)
    day = np.zeros(31)
    week = np.zeros(7)
    month[date.month - 1] = 1.0
    day[date.day - 1] = 1.0
    week[date.weekday()] = 1.0
    return month, day, week


def make_sample(window: Window, n_customers: int, id_width: int = ID_WIDTH, id_parts: int = ID_PARTS) -> Sample:
    month, day, week = encode_calendar(window.target_date)
    return Sample(
        history=window.history,
        id_onehot=encode_customer_id(window.customer_index, n_customers, id_width, id_parts),
        month=month, day=day, week=week,
        target=window.target,
        customer_index=window.customer_index,
        target_date=window.target_date,
    )


def make_batch(windows: Sequence[Window], n_customers: int) -> Batch:
    return Batch.stack(make_sample(w, n_customers) for w in windows)


def persistence_baseline(history) -> np.ndarray:
    """Tomorrow looks like the same weekday last week: history row 0."""
    history = np.asarray(history, dtype=np.float64)
    if history.shape[-2:] != (HISTORY_DAYS, SLOTS_PER_DAY):
        raise ValueError(f"history must end in shape (7, 48), got {history.shape}")
    return history[..., 0, :].copy()


# --------------------------------------------------------------------------
# split


def day_numbers(windows: Sequence[Window], epoch: dt.date | None = None) -> np.ndarray:
    """1-based day number of each window's target, counting the first history day as 1."""
    if not windows:
        return np.zeros(0, dtype=int)
    if epoch is None:
        epoch = min(w.target_date for w in windows) - dt.timedelta(days=HISTORY_DAYS)
    return np.array([(w.target_date - epoch).days + 1 for w in windows], dtype=int)


def split(windows: Sequence[Window], spec: SplitSpec, epoch: dt.date | None = None):
    """Partition ``windows`` into (train, validation, test) by target day.

    Test holds every window targeting one of the last ``test_days`` days;
    validation holds every window targeting one of ``validation_days`` days
    drawn (seeded, without replacement) from ``validation_range``; train
    keeps the rest.
    """
    if spec.test_days < 0 or spec.validation_days < 0:
        raise SplitError("day counts must be non-negative")
    days = day_numbers(windows, epoch)
    if len(days) == 0:
        raise SplitError("no windows to split")
    last = int(days.max())
    test_start = last - spec.test_days + 1
    lo, hi = spec.validation_range if spec.validation_range is not None else (HISTORY_DAYS + 1, test_start - 1)
    if hi >= test_start:
        raise SplitError(f"validation range {lo}..{hi} overlaps the test block starting at day {test_start}")
    present = np.unique(days[(days >= lo) & (days <= hi)])
    if len(present) < spec.validation_days:
        raise SplitError(f"validation needs {spec.validation_days} days but only {len(present)} "
                         f"target days exist in {lo}..{hi}")
    rng = np.random.default_rng(spec.seed)
    val_days = set(rng.choice(present, size=spec.validation_days, replace=False).tolist())
    train, val, test = [], [], []
    for w, d in zip(windows, days):
        if d >= test_start:
            test.append(w)
        elif d in val_days:
            val.append(w)
        else:
            train.append(w)
    return train, val, test


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthParams:
    base_kwh: tuple[float, float] = (0.15, 0.35)
    morning_kwh: tuple[float, float] = (0.3, 0.9)
    evening_kwh: tuple[float, float] = (0.6, 1.6)
    weekend_factor: float = 0.15
    seasonal_amplitude: float = 0.2
    noise_kwh: float = 0.12
    max_kwh: float = 5.0
    start_date: dt.date = dt.date(2009, 7, 1)


def gen_synthetic(n_customers: int, n_days: int, seed: int,
                  params: SynthParams = SynthParams()) -> list[CustomerSeries]:
    """Reproducible residential-looking load curves.

    Each half-hour value is (base + morning bump + evening bump + noise)
    scaled by a seasonal factor and, on Saturdays and Sundays, by
    ``1 + weekend_factor``. Noise is exponential, hence non-negative. Values
    are rounded to metering resolution (1 Wh) and capped at ``max_kwh``.
    """
    if n_customers < 1:
        raise ValueError("n_customers must be >= 1")
    if n_days < HISTORY_DAYS + 2:
        raise ValueError("n_days must be >= 9")
    rng = np.random.default_rng(seed)
    t = (np.arange(SLOTS_PER_DAY) + 0.5) / 2.0  # hour of day at slot centre
    dates = [params.start_date + dt.timedelta(days=d) for d in range(n_days)]
    doy = np.array([d.timetuple().tm_yday for d in dates])
    weekend = np.array([d.weekday() >= 5 for d in dates])
    season = 1.0 + params.seasonal_amplitude * np.cos(2 * np.pi * (doy - 15) / 365.25)
    modulation = np.where(weekend, 1.0 + params.weekend_factor, 1.0)

    out = []
    for c in range(n_customers):
        base = rng.uniform(*params.base_kwh)
        am = rng.uniform(*params.morning_kwh)
        pm = rng.uniform(*params.evening_kwh)
        am_t = rng.uniform(6.5, 8.5)
        pm_t = rng.uniform(17.5, 20.0)
        profile = (base + am * np.exp(-0.5 * ((t - am_t) / 0.9) ** 2)
                   + pm * np.exp(-0.5 * ((t - pm_t) / 1.6) ** 2))
        noise = rng.exponential(params.noise_kwh, size=(n_days, SLOTS_PER_DAY))
        load = (profile[None, :] + noise) * (season * modulation)[:, None]
        load = np.round(np.clip(load, 0.0, params.max_kwh), 3)
        out.append(CustomerSeries(c, params.start_date, load.reshape(-1), meter_id=str(1000 + c)))
    return out
