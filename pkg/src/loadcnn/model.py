"""The dual-channel LoadCNN network.

The horizontal channel convolves along the intraday axis with ``[1, N]``
kernels; the vertical channel convolves across days with ``[N, 1]`` kernels.
Both flatten (day, slot, channel order) and are concatenated with the
customer-ID, month, day-of-month and weekday one-hots before a single linear
dense layer produces the 48 half-hourly predictions.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import nn
from .nn import ConvLayerSpec, PoolSpec, ShapeError

KERNEL_COUNTS = (16, 24, 24, 64, 64, 64)
HISTORY_SHAPE = (7, 48)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSizes:
    id: int = 62
    month: int = 12
    day: int = 31
    week: int = 7

    @property
    def total(self) -> int:
        return self.id + self.month + self.day + self.week


@dataclass(frozen=True)
class LoadCNNConfig:
    horizontal_layers: tuple[ConvLayerSpec, ...]
    vertical_layers: tuple[ConvLayerSpec, ...]
    horizontal_pools: Mapping[int, PoolSpec]
    vertical_pools: Mapping[int, PoolSpec]
    features: FeatureSizes = field(default_factory=FeatureSizes)
    output_size: int = 48
    history_shape: tuple[int, int] = HISTORY_SHAPE
    clamp_output: bool = False

    def to_dict(self) -> dict:
        def conv(s: ConvLayerSpec):
            return [s.kernel_height, s.kernel_width, s.in_channels, s.out_channels, s.padding_mode]

        def pools(p: Mapping[int, PoolSpec]):
            return {str(k): [v.window_height, v.window_width] for k, v in sorted(p.items())}

        return {
            "horizontal_layers": [conv(s) for s in self.horizontal_layers],
            "vertical_layers": [conv(s) for s in self.vertical_layers],
            "horizontal_pools": pools(self.horizontal_pools),
            "vertical_pools": pools(self.vertical_pools),
            "features": [self.features.id, self.features.month, self.features.day, self.features.week],
            "output_size": self.output_size,
            "history_shape": list(self.history_shape),
            "clamp_output": self.clamp_output,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LoadCNNConfig":
        def conv(v):
            return ConvLayerSpec(int(v[0]), int(v[1]), int(v[2]), int(v[3]), str(v[4]))

        def pools(p):
            return {int(k): PoolSpec(int(v[0]), int(v[1])) for k, v in p.items()}

        return cls(
            horizontal_layers=tuple(conv(v) for v in d["horizontal_layers"]),
            vertical_layers=tuple(conv(v) for v in d["vertical_layers"]),
            horizontal_pools=pools(d["horizontal_pools"]),
            vertical_pools=pools(d["vertical_pools"]),
            features=FeatureSizes(*[int(x) for x in d["features"]]),
            output_size=int(d["output_size"]),
            history_shape=tuple(int(x) for x in d["history_shape"]),
            clamp_output=bool(d.get("clamp_output", False)),
        )


def _channel(first: tuple[int, int], rest: tuple[int, int], kernels=KERNEL_COUNTS):
    layers = []
    cin = 1
    for i, cout in enumerate(kernels):
        kh, kw = first if i == 0 else rest
        layers.append(ConvLayerSpec(kh, kw, cin, cout, "same"))
        cin = cout
    return tuple(layers)


def default_config(horizontal_width: int = 3, vertical_height: int = 3,
                   kernels: tuple[int, ...] = KERNEL_COUNTS) -> LoadCNNConfig:
    """Canonical architecture.

    First layer kernels are [1,7] (horizontal) and [4,1] (vertical). Later
    layers use [1, horizontal_width] / [vertical_height, 1]. Both channels
    pool 1x2 along the intraday axis after conv layers 1-4, so a [7,48]
    history ends as [7,3,64] in each channel.
    """
    pools = {i: PoolSpec(1, 2) for i in range(4)}
    return LoadCNNConfig(
        horizontal_layers=_channel((1, 7), (1, horizontal_width), kernels),
        vertical_layers=_channel((4, 1), (vertical_height, 1), kernels),
        horizontal_pools=dict(pools),
        vertical_pools=dict(pools),
    )


def channel_output_shape(layers, pools, input_hw=HISTORY_SHAPE) -> tuple[int, int, int]:
    h, w = input_hw
    c = 1
    for i, spec in enumerate(layers):
        if spec.in_channels != c:
            raise ConfigError(f"layer {i} expects {spec.in_channels} input channels, previous layer gives {c}")
        h, w = nn.conv_output_hw(h, w, spec.kernel_height, spec.kernel_width, spec.padding_mode)
        if h < 1 or w < 1:
            raise ConfigError(f"layer {i} shrinks the feature map to nothing")
        c = spec.out_channels
        if i in pools:
            p = pools[i]
            h, w = h // p.window_height, w // p.window_width
            if h < 1 or w < 1:
                raise ConfigError(f"pool after layer {i} shrinks the feature map to nothing")
    return h, w, c


def head_input_size(config: LoadCNNConfig) -> int:
    hh, hw, hc = channel_output_shape(config.horizontal_layers, config.horizontal_pools, config.history_shape)
    vh, vw, vc = channel_output_shape(config.vertical_layers, config.vertical_pools, config.history_shape)
    return hh * hw * hc + vh * vw * vc + config.features.total


def check_invariants(config: LoadCNNConfig) -> None:
    """Raise ConfigError unless ``config`` has the LoadCNN shape (6 convs and 4 pools per channel)."""
    for name, layers, pools, axis in (
        ("horizontal", config.horizontal_layers, config.horizontal_pools, "kernel_height"),
        ("vertical", config.vertical_layers, config.vertical_pools, "kernel_width"),
    ):
        if len(layers) != 6:
            raise ConfigError(f"{name} channel needs 6 conv layers, has {len(layers)}")
        if tuple(s.out_channels for s in layers) != KERNEL_COUNTS:
            raise ConfigError(f"{name} channel kernel counts must be {KERNEL_COUNTS}")
        if any(getattr(s, axis) != 1 for s in layers):
            raise ConfigError(f"{name} channel kernels must have {axis} = 1")
        if len(pools) != 4:
            raise ConfigError(f"{name} channel needs 4 pooling layers, has {len(pools)}")
    head_input_size(config)


def kernel_elements(spec) -> int:
    """Elements of one kernel slice (kh * kw), per input/output channel pair."""
    if isinstance(spec, ConvLayerSpec):
        return spec.kernel_height * spec.kernel_width
    kh, kw = spec
    return int(kh) * int(kw)


def param_shapes(config: LoadCNNConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for prefix, layers in (("h", config.horizontal_layers), ("v", config.vertical_layers)):
        for i, spec in enumerate(layers):
            shapes[f"{prefix}{i}.w"] = spec.weight_shape
            shapes[f"{prefix}{i}.b"] = (spec.out_channels,)
    n_in = head_input_size(config)
    shapes["fc.w"] = (n_in, config.output_size)
    shapes["fc.b"] = (config.output_size,)
    return shapes


def param_count(config: LoadCNNConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


@dataclass
class LoadCNNParams:
    """Learnable tensors keyed by name (``h0.w``, ``v3.b``, ``fc.w``...)."""

    config: LoadCNNConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for k, shape in expected.items():
            if self.tensors[k].shape != shape:
                raise ShapeError(f"parameter {k} has shape {self.tensors[k].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(param_shapes(self.config))

    def copy(self) -> "LoadCNNParams":
        return LoadCNNParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def replace(self, tensors: Mapping[str, np.ndarray]) -> "LoadCNNParams":
        return LoadCNNParams(self.config, {k: np.asarray(tensors[k], dtype=nn.DTYPE) for k in self.names()})

    def as_float32(self) -> "LoadCNNParams":
        """Round every tensor through 32-bit storage precision."""
        return self.replace({k: v.astype(np.float32).astype(nn.DTYPE) for k, v in self.tensors.items()})

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(config: LoadCNNConfig, seed: int) -> LoadCNNParams:
    """He-normal weights (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=nn.DTYPE)
            continue
        fan_in = int(np.prod(shape[:-1]))
        tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return LoadCNNParams(config, tensors)


# --------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class Sample:
    history: np.ndarray      # [7, 48] kWh
    id_onehot: np.ndarray    # [62]
    month: np.ndarray        # [12]
    day: np.ndarray          # [31]
    week: np.ndarray         # [7]
    target: np.ndarray       # [48] kWh
    customer_index: int = 0
    target_date: dt.date | None = None


@dataclass
class Batch:
    """Stacked samples: the unit the model trains and predicts on."""

    history: np.ndarray      # [N, 7, 48]
    id_onehot: np.ndarray    # [N, id]
    month: np.ndarray
    day: np.ndarray
    week: np.ndarray
    target: np.ndarray       # [N, 48]
    customer_index: np.ndarray
    target_date: list

    def __len__(self) -> int:
        return self.history.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=int)
        return Batch(self.history[idx], self.id_onehot[idx], self.month[idx], self.day[idx],
                     self.week[idx], self.target[idx], self.customer_index[idx],
                     [self.target_date[i] for i in idx])

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.id_onehot, self.month, self.day, self.week], axis=1)

    def sample(self, i: int) -> Sample:
        return Sample(self.history[i], self.id_onehot[i], self.month[i], self.day[i], self.week[i],
                      self.target[i], int(self.customer_index[i]), self.target_date[i])

    @classmethod
    def stack(cls, samples) -> "Batch":
        samples = list(samples)
        if not samples:
            raise ValueError("cannot stack an empty sample list")
        return cls(
            history=np.stack([s.history for s in samples]).astype(nn.DTYPE),
            id_onehot=np.stack([s.id_onehot for s in samples]).astype(nn.DTYPE),
            month=np.stack([s.month for s in samples]).astype(nn.DTYPE),
            day=np.stack([s.day for s in samples]).astype(nn.DTYPE),
            week=np.stack([s.week for s in samples]).astype(nn.DTYPE),
            target=np.stack([s.target for s in samples]).astype(nn.DTYPE),
            customer_index=np.array([s.customer_index for s in samples], dtype=int),
            target_date=[s.target_date for s in samples],
        )


def _as_batch(data) -> Batch:
    return Batch.stack([data]) if isinstance(data, Sample) else data


def _check_batch(config: LoadCNNConfig, batch: Batch) -> None:
    n = len(batch)
    f = config.features
    checks = (
        ("history", batch.history.shape, (n, *config.history_shape)),
        ("id_onehot", batch.id_onehot.shape, (n, f.id)),
        ("month", batch.month.shape, (n, f.month)),
        ("day", batch.day.shape, (n, f.day)),
        ("week", batch.week.shape, (n, f.week)),
    )
    for name, got, want in checks:
        if got != want:
            raise ShapeError(f"sample {name} has shape {got[1:]}, config expects {want[1:]}")


# --------------------------------------------------------------------------
# forward / backward


def _channel_forward(x, params, prefix, layers, pools, cache):
    steps = []
    for i, spec in enumerate(layers):
        w, b = params[f"{prefix}{i}.w"], params[f"{prefix}{i}.b"]
        z = nn.conv2d_forward(x, w, b, spec.padding_mode)
        step = {"x": x, "z": z, "padding": spec.padding_mode}
        x = nn.relu(z)
        if i in pools:
            step["pre_pool_shape"] = x.shape
            x, step["argmax"] = nn.maxpool_forward(x, pools[i])
        steps.append(step)
    cache[prefix] = steps
    return x


def _channel_backward(g, params, prefix, cache, grads):
    for i in reversed(range(len(cache[prefix]))):
        step = cache[prefix][i]
        if "argmax" in step:
            g = nn.maxpool_backward(step["argmax"], g, step["pre_pool_shape"])
        g = nn.relu_backward(step["z"], g)
        gx, gw, gb = nn.conv2d_backward(step["x"], params[f"{prefix}{i}.w"], g, step["padding"])
        grads[f"{prefix}{i}.w"] = gw
        grads[f"{prefix}{i}.b"] = gb
        g = gx
    return g


def forward_batch(params: LoadCNNParams, batch: Batch):
    """Predictions ``[N, 48]`` plus the cache needed by :func:`backward_batch`."""
    config = params.config
    _check_batch(config, batch)
    x = batch.history[..., None]
    cache: dict = {}
    h_out = _channel_forward(x, params, "h", config.horizontal_layers, config.horizontal_pools, cache)
    v_out = _channel_forward(x, params, "v", config.vertical_layers, config.vertical_pools, cache)
    n = len(batch)
    parts = [h_out.reshape(n, -1), v_out.reshape(n, -1),
             batch.id_onehot, batch.month, batch.day, batch.week]
    head_in = nn.concat(parts)
    pred = nn.dense_forward(head_in, params["fc.w"], params["fc.b"])
    cache.update(head_in=head_in, part_sizes=[p.shape[1] for p in parts],
                 h_shape=h_out.shape, v_shape=v_out.shape)
    return pred, cache


def backward_batch(params: LoadCNNParams, cache, dpred: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given d(objective)/d(prediction), summed over the batch."""
    grads: dict[str, np.ndarray] = {}
    g_head, grads["fc.w"], grads["fc.b"] = nn.dense_backward(cache["head_in"], params["fc.w"], dpred)
    g_parts = nn.concat_backward(g_head, cache["part_sizes"])
    _channel_backward(g_parts[0].reshape(cache["h_shape"]), params, "h", cache, grads)
    _channel_backward(g_parts[1].reshape(cache["v_shape"]), params, "v", cache, grads)
    return {k: grads[k] for k in params.names()}


def predict(params: LoadCNNParams, data, clamp: bool | None = None) -> np.ndarray:
    """Inference on a Sample (returns [48]) or Batch (returns [N, 48])."""
    batch = _as_batch(data)
    pred, _ = forward_batch(params, batch)
    if params.config.clamp_output if clamp is None else clamp:
        pred = np.maximum(pred, 0.0)
    return pred[0] if isinstance(data, Sample) else pred


def forward(params: LoadCNNParams, sample: Sample) -> np.ndarray:
    """48-point prediction for one sample (raw linear output)."""
    return predict(params, sample, clamp=False)


def loss(prediction, target) -> float:
    """Root of the mean squared error over the 48 points; batches average per-sample values."""
    p = np.asarray(prediction, dtype=nn.DTYPE)
    t = np.asarray(target, dtype=nn.DTYPE)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.ndim == 0 or p.shape[-1] == 0:
        raise ShapeError("loss needs non-empty curves")
    per_sample = np.sqrt(np.mean((t - p) ** 2, axis=-1))
    return float(np.mean(per_sample))


def loss_grad(prediction: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses [N] and d(mean loss)/d(prediction) [N, L].

    At zero residual the root is not differentiable; the gradient there is 0.
    """
    n, length = prediction.shape
    resid = prediction - target
    per = np.sqrt(np.mean(resid ** 2, axis=1))
    safe = np.where(per > 0, per, 1.0)
    g = np.where(per[:, None] > 0, resid / (length * safe[:, None]), 0.0) / n
    return per, g


def loss_and_grad(params: LoadCNNParams, data) -> tuple[float, dict[str, np.ndarray]]:
    batch = _as_batch(data)
    pred, cache = forward_batch(params, batch)
    per, g = loss_grad(pred, batch.target)
    return float(per.mean()), backward_batch(params, cache, g)


def backward(params: LoadCNNParams, sample) -> dict[str, np.ndarray]:
    """Gradient of the loss for one sample (or the mean loss of a batch)."""
    return loss_and_grad(params, sample)[1]


def batch_loss(params: LoadCNNParams, batch: Batch) -> float:
    pred, _ = forward_batch(params, batch)
    return loss(pred, batch.target)


def with_head_bias(config: LoadCNNConfig, bias) -> LoadCNNParams:
    """All-zero parameters except the dense bias; handy for harness checks."""
    tensors = {k: np.zeros(s) for k, s in param_shapes(config).items()}
    tensors["fc.b"] = np.broadcast_to(np.asarray(bias, dtype=nn.DTYPE), (config.output_size,)).copy()
    return LoadCNNParams(config, tensors)

