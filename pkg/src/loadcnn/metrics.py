"""Forecast accuracy metrics and the training energy / CO2 cost model."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

PUE_DEFAULT = 1.58
TRIALS_DEFAULT = 1000
CO2_LBS_PER_KWH = 0.954


def _pair(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=np.float64).reshape(-1)
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if a.size != p.size:
        raise ValueError(f"length mismatch: {a.size} actual vs {p.size} predicted values")
    if a.size == 0:
        raise ValueError("metrics need at least one point")
    return a, p


def rmse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.sqrt(np.mean((a - p) ** 2)))


def mae(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def nrmse(actual, predicted, denominator: str = "actual") -> float:
    """RMSE divided by a value range.

    ``denominator="actual"`` uses max(actual) - min(actual). ``"literal"``
    uses max(actual) - min(predicted), a direct reading of the printed formula.
    """
    a, p = _pair(actual, predicted)
    if denominator == "actual":
        span = a.max() - a.min()
    elif denominator == "literal":
        span = a.max() - p.min()
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    if span <= 0:
        raise ValueError("degenerate value range: max == min")
    return rmse(a, p) / float(span)


@dataclass
class EvalReport:
    rmse_kwh: float
    nrmse: float
    mae_kwh: float
    n_points: int
    per_customer: dict = field(default_factory=dict)

    def to_text(self, prefix: str = "") -> str:
        lines = [
            f"{prefix}rmse_kwh={self.rmse_kwh:.4f}",
            f"{prefix}nrmse={self.nrmse:.4f}",
            f"{prefix}mae_kwh={self.mae_kwh:.4f}",
            f"{prefix}n_points={self.n_points}",
        ]
        for cid, m in sorted(self.per_customer.items(), key=lambda kv: str(kv[0])):
            lines.append(f"{prefix}customer.{cid}.rmse_kwh={m['rmse_kwh']:.4f}")
            lines.append(f"{prefix}customer.{cid}.mae_kwh={m['mae_kwh']:.4f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "rmse_kwh": round(self.rmse_kwh, 4),
            "nrmse": round(self.nrmse, 4),
            "mae_kwh": round(self.mae_kwh, 4),
            "n_points": self.n_points,
            "per_customer": {str(k): {kk: round(vv, 4) for kk, vv in v.items()}
                             for k, v in self.per_customer.items()},
        }


def evaluate(actual, predicted, customers=None, denominator: str = "actual") -> EvalReport:
    """Pooled metrics over every point; optional per-customer breakdown.

    ``actual`` and ``predicted`` are ``[N, 48]``; ``customers`` labels each row.
    """
    a = np.asarray(actual, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    span = a.max() - a.min() if a.size else 0.0
    r = rmse(a, p)
    # a flat test set would make the normalised error undefined; report 0 for the perfect fit
    nr = nrmse(a, p, denominator) if span > 0 else (0.0 if r == 0 else float("nan"))
    report = EvalReport(r, nr, mae(a, p), int(a.size))
    if customers is not None:
        labels = np.asarray(customers)
        for c in np.unique(labels):
            rows = labels == c
            report.per_customer[c.item() if hasattr(c, "item") else c] = {
                "rmse_kwh": rmse(a[rows], p[rows]), "mae_kwh": mae(a[rows], p[rows])}
    return report


# --------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class CostParams:
    power_watts: float
    training_hours: float
    pue: float = PUE_DEFAULT
    trials: int = TRIALS_DEFAULT

    def __post_init__(self):
        for name in ("power_watts", "training_hours", "pue", "trials"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)!r}")


@dataclass(frozen=True)
class CostReport:
    ec_kwh: float
    co2e_lbs: float
    inputs: CostParams

    def to_text(self) -> str:
        p = self.inputs
        return (f"power_watts={p.power_watts:.4f}\ntraining_hours={p.training_hours:.4f}\n"
                f"pue={p.pue:.4f}\ntrials={p.trials}\n"
                f"ec_kwh={self.ec_kwh:.4f}\nco2e_lbs={self.co2e_lbs:.4f}\n")

    def to_json(self) -> dict:
        return {"ec_kwh": round(self.ec_kwh, 4), "co2e_lbs": round(self.co2e_lbs, 4),
                "inputs": asdict(self.inputs)}


def energy_consumption(p: CostParams) -> float:
    """Training energy in kWh: P[W] * TT[h] * PUE * NT / 1000."""
    return p.power_watts * p.training_hours * p.pue * p.trials / 1000.0


def co2_emissions(ec_kwh: float) -> float:
    """Pounds of CO2-equivalent for ``ec_kwh`` of electricity."""
    if ec_kwh < 0:
        raise ValueError("energy must be non-negative")
    return CO2_LBS_PER_KWH * ec_kwh


def cost_report(p: CostParams) -> CostReport:
    ec = energy_consumption(p)
    return CostReport(ec, co2_emissions(ec), p)


def measure_training_time(fn: Callable, *args, **kwargs):
    """Run ``fn`` and return ``(result, elapsed_hours)`` on a monotonic clock."""
    t0 = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, (time.perf_counter() - t0) / 3600.0


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
