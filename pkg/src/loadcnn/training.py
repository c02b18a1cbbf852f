"""Mini-batch training with periodic validation and best-parameter tracking."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import model
from .model import Batch, LoadCNNConfig, LoadCNNParams
from .nn import ShapeError

# seed offsets; every random stream derives from one run seed
SEED_SYNTH = 0
SEED_INIT = 1
SEED_SHUFFLE = 2
SEED_VALIDATION = 3
SEED_SPLIT = 4


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, step: int, lr: float, batch_ids, value: float):
        ids = ", ".join(str(int(i)) for i in batch_ids)
        super().__init__(f"non-finite loss {value} at step {step} (lr={lr:g}); batch sample ids: [{ids}]")
        self.step = step
        self.lr = lr
        self.batch_ids = list(batch_ids)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 65
    learning_rate: float = 0.0015
    decay_rate: float = 0.96
    validation_interval_steps: int = 100
    seed: int = 0
    optimizer: str = "adam"
    full_validation: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.validation_interval_steps < 1:
            raise ValueError("validation_interval_steps must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(base_lr: float, decay_rate: float, epoch: int) -> float:
    """Staircase exponential decay, one step per epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * decay_rate ** epoch


# --------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_optimizer_state(params: dict[str, np.ndarray], kind: str = "adam"):
    if kind == "sgd":
        return None
    return AdamState({k: np.zeros_like(p) for k, p in params.items()},
                     {k: np.zeros_like(p) for k, p in params.items()})


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state, step_lr: float,
                   kind: str = "adam", beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One update. Returns ``(new_params, new_state)``; inputs are left untouched."""
    for k, p in params.items():
        if k not in grads:
            raise ShapeError(f"missing gradient for {k}")
        if grads[k].shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {grads[k].shape}, parameter has {p.shape}")
    if kind == "sgd":
        return {k: p - step_lr * grads[k] for k, p in params.items()}, state
    if kind != "adam":
        raise ValueError(f"unknown optimizer {kind!r}")
    t = state.t + 1
    m = {k: beta1 * state.m[k] + (1 - beta1) * grads[k] for k in params}
    v = {k: beta2 * state.v[k] + (1 - beta2) * grads[k] ** 2 for k in params}
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    new = {k: p - step_lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps) for k, p in params.items()}
    return new, AdamState(m, v, t)


# --------------------------------------------------------------------------
# log / checkpoint records


@dataclass
class LogRow:
    step: int
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    timestamp_ms: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    CSV_HEADER = "step,epoch,lr,train_loss,val_loss,timestamp_ms"

    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.rows if not math.isnan(r.train_loss)]

    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.rows if not math.isnan(r.val_loss)]

    @property
    def training_hours(self) -> float:
        if len(self.rows) < 2:
            return 0.0
        return (self.rows[-1].timestamp_ms - self.rows[0].timestamp_ms) / 3.6e6

    def to_csv(self) -> str:
        def f(x):
            return "" if isinstance(x, float) and math.isnan(x) else repr(x)

        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(f"{r.step},{r.epoch},{r.lr!r},{f(r.train_loss)},{f(r.val_loss)},{r.timestamp_ms:.3f}")
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    params: LoadCNNParams
    train_config: TrainConfig
    loss_best: float
    step: int = 0
    epoch: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def model_config(self) -> LoadCNNConfig:
        return self.params.config


# --------------------------------------------------------------------------
# training loop


def _validation_loss(params: LoadCNNParams, val: Batch, cfg: TrainConfig, rng: np.random.Generator) -> float:
    if cfg.full_validation or len(val) <= cfg.batch_size:
        idx = np.arange(len(val))
    else:
        idx = np.sort(rng.choice(len(val), size=cfg.batch_size, replace=False))
    return model.batch_loss(params, val.subset(idx))


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One seeded shuffle of ``range(n)`` cut into batches; the last may be short."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(train_set: Batch, validation_set: Batch, model_config: LoadCNNConfig, train_config: TrainConfig,
          init: LoadCNNParams | None = None,
          on_step: Callable[[LogRow], None] | None = None,
          clock: Callable[[], float] = time.perf_counter) -> tuple[Checkpoint, TrainLog]:
    """Optimise LoadCNN on ``train_set`` and keep the best validated parameters.

    Validation runs before the first update (step 0), every
    ``validation_interval_steps`` updates, and after the final update.
    Parameters are recorded as best whenever validation loss strictly
    improves on the best seen so far.
    """
    if len(train_set) == 0:
        raise TrainingError("training set is empty")
    if len(validation_set) == 0:
        raise TrainingError("validation set is empty")
    cfg = train_config
    params = init if init is not None else model.init_params(model_config, cfg.seed + SEED_INIT)
    shuffle_rng = np.random.default_rng(cfg.seed + SEED_SHUFFLE)
    val_rng = np.random.default_rng(cfg.seed + SEED_VALIDATION)
    opt_state = init_optimizer_state(params.tensors, cfg.optimizer)

    log = TrainLog()
    t0 = clock()

    def emit(row: LogRow):
        log.rows.append(row)
        if on_step is not None:
            on_step(row)

    best_loss = math.inf
    best = params
    best_step = best_epoch = 0

    def validate(step: int, epoch: int) -> float:
        nonlocal best_loss, best, best_step, best_epoch
        v = _validation_loss(params, validation_set, cfg, val_rng)
        if not math.isfinite(v):
            raise NonFiniteLossError(step, lr, [], v)
        if v < best_loss:
            best_loss, best, best_step, best_epoch = v, params.copy(), step, epoch
        return v

    lr = lr_schedule(cfg.learning_rate, cfg.decay_rate, 0)
    emit(LogRow(0, 0, lr, math.nan, validate(0, 0), (clock() - t0) * 1000.0))

    n = len(train_set)
    step = 0
    epoch = 0
    last_validated = 0
    done = False
    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(cfg.learning_rate, cfg.decay_rate, epoch)
        for ids in epoch_batches(n, cfg.batch_size, shuffle_rng):
            loss_value, grads = model.loss_and_grad(params, train_set.subset(ids))
            step += 1
            if not math.isfinite(loss_value):
                raise NonFiniteLossError(step, lr, ids, loss_value)
            new, opt_state = optimizer_step(params.tensors, grads, opt_state, lr, cfg.optimizer)
            params = params.replace(new)
            val = math.nan
            if step % cfg.validation_interval_steps == 0:
                val = validate(step, epoch)
                last_validated = step
            emit(LogRow(step, epoch, lr, loss_value, val, (clock() - t0) * 1000.0))
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if done:
            break

    if step != last_validated:
        log.rows[-1].val_loss = validate(step, epoch)

    ckpt = Checkpoint(params=best, train_config=cfg, loss_best=best_loss, step=best_step, epoch=best_epoch)
    return ckpt, log

