"""Finite-difference checks for every layer primitive and the assembled model.

Each trial draws a random smooth point (inputs kept away from ReLU kinks and
max-pool ties), projects the layer output onto a random upstream tensor to
get a scalar, and compares analytic gradients with central differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import model, nn

TOLERANCE = 1e-4
EPSILON = 1e-5


def _flip(fn: Callable) -> Callable:
    """Wrap a backward function so its weight gradient has the wrong sign."""
    def bad(*args, **kwargs):
        gx, gw, gb = fn(*args, **kwargs)
        return gx, -gw, gb
    return bad


def _conv_trial(rng: np.random.Generator, backward=nn.conv2d_backward) -> float:
    h, w = rng.integers(1, 9, size=2)
    cin, cout = rng.integers(1, 4, size=2)
    padding = str(rng.choice(nn.PADDING_MODES))
    kh = int(rng.integers(1, min(h, 4) + 1)) if padding == "valid" else int(rng.integers(1, 5))
    kw = int(rng.integers(1, min(w, 4) + 1)) if padding == "valid" else int(rng.integers(1, 5))
    point = {"x": rng.normal(size=(h, w, cin)), "w": rng.normal(size=(kh, kw, cin, cout)),
             "b": rng.normal(size=cout)}
    out_shape = nn.conv2d_forward(point["x"], point["w"], point["b"], padding).shape
    g = rng.normal(size=out_shape)

    def f(p):
        return float(np.sum(g * nn.conv2d_forward(p["x"], p["w"], p["b"], padding)))

    gx, gw, gb = backward(point["x"], point["w"], g, padding)
    return nn.grad_check(f, {"x": gx, "w": gw, "b": gb}, point, EPSILON)


def _separated(rng: np.random.Generator, shape) -> np.ndarray:
    # distinct values at least 0.09 apart so a 1e-5 nudge never reorders them
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, size=n) - 0.05 * n).reshape(shape)


def _pool_trial(rng: np.random.Generator, backward=nn.maxpool_backward) -> float:
    h, w = rng.integers(1, 9, size=2)
    c = int(rng.integers(1, 4))
    ph, pw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
    x = _separated(rng, (h, w, c))
    out, argmax = nn.maxpool_forward(x, (ph, pw))
    g = rng.normal(size=out.shape)

    def f(p):
        return float(np.sum(g * nn.maxpool_forward(p["x"], (ph, pw))[0]))

    return nn.grad_check(f, {"x": backward(argmax, g, x.shape)}, {"x": x}, EPSILON)


def _relu_trial(rng: np.random.Generator, backward=nn.relu_backward) -> float:
    shape = tuple(rng.integers(1, 9, size=int(rng.integers(1, 4))))
    x = rng.normal(size=shape)
    x = np.sign(x) * (0.01 + np.abs(x))
    g = rng.normal(size=shape)

    def f(p):
        return float(np.sum(g * nn.relu(p["x"])))

    return nn.grad_check(f, {"x": backward(x, g)}, {"x": x}, EPSILON)


def _dense_trial(rng: np.random.Generator, backward=nn.dense_backward) -> float:
    n, m = rng.integers(1, 9, size=2)
    point = {"x": rng.normal(size=n), "w": rng.normal(size=(n, m)), "b": rng.normal(size=m)}
    g = rng.normal(size=m)

    def f(p):
        return float(np.sum(g * nn.dense_forward(p["x"], p["w"], p["b"])))

    gx, gw, gb = backward(point["x"], point["w"], g)
    return nn.grad_check(f, {"x": gx, "w": gw, "b": gb}, point, EPSILON)


def _concat_trial(rng: np.random.Generator, backward=nn.concat_backward) -> float:
    sizes = [int(s) for s in rng.integers(1, 9, size=int(rng.integers(1, 5)))]
    point = {f"p{i}": rng.normal(size=s) for i, s in enumerate(sizes)}
    g = rng.normal(size=sum(sizes))

    def f(p):
        return float(np.sum(g * nn.concat([p[f"p{i}"] for i in range(len(sizes))])))

    grads = backward(g, sizes)
    return nn.grad_check(f, {f"p{i}": gi for i, gi in enumerate(grads)}, point, EPSILON)


def random_sample(rng: np.random.Generator, config: model.LoadCNNConfig) -> model.Sample:
    f = config.features

    def onehot(k):
        v = np.zeros(k)
        v[rng.integers(k)] = 1.0
        return v

    id_half = f.id // 2
    return model.Sample(
        history=rng.uniform(0.0, 2.0, size=config.history_shape),
        id_onehot=np.concatenate([onehot(id_half), onehot(f.id - id_half)]),
        month=onehot(f.month), day=onehot(f.day), week=onehot(f.week),
        target=rng.uniform(0.0, 2.0, size=config.output_size),
    )


def _activation_pattern(params: model.LoadCNNParams, sample: model.Sample) -> list[np.ndarray]:
    _, cache = model.forward_batch(params, model.Batch.stack([sample]))
    out = []
    for prefix in ("h", "v"):
        for step in cache[prefix]:
            out.append(step["z"] > 0)
            if "argmax" in step:
                out.append(step["argmax"])
    return out


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def model_directional_error(rng: np.random.Generator, config: model.LoadCNNConfig | None = None,
                            epsilon: float = EPSILON, max_redraws: int = 20) -> float:
    """Relative error of the loss's directional derivative along a random unit direction.

    Points where the +/- epsilon probe flips a ReLU sign or a pooling winner
    are not smooth and get redrawn.
    """
    config = config or model.default_config()
    for _ in range(max_redraws):
        params = model.init_params(config, int(rng.integers(2**31)))
        # non-zero biases so the point is not special
        params = params.replace({k: v + (0.05 * rng.normal(size=v.shape) if k.endswith(".b") else 0.0)
                                 for k, v in params.tensors.items()})
        sample = random_sample(rng, config)
        direction = {k: rng.normal(size=v.shape) for k, v in params.tensors.items()}
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
        direction = {k: d / norm for k, d in direction.items()}
        up = params.replace({k: v + epsilon * direction[k] for k, v in params.tensors.items()})
        down = params.replace({k: v - epsilon * direction[k] for k, v in params.tensors.items()})
        base = _activation_pattern(params, sample)
        if _same_pattern(base, _activation_pattern(up, sample)) and \
                _same_pattern(base, _activation_pattern(down, sample)):
            break
    else:
        raise RuntimeError("could not find a smooth point for the model gradient check")

    _, grads = model.loss_and_grad(params, sample)
    analytic = sum(float(np.sum(grads[k] * direction[k])) for k in grads)
    numeric = (model.loss(model.forward(up, sample), sample.target)
               - model.loss(model.forward(down, sample), sample.target)) / (2.0 * epsilon)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


TRIALS: dict[str, Callable] = {
    "conv2d": _conv_trial,
    "maxpool": _pool_trial,
    "relu": _relu_trial,
    "dense": _dense_trial,
    "concat": _concat_trial,
}

_BACKWARDS = {
    "conv2d": nn.conv2d_backward,
    "dense": nn.dense_backward,
}


def run_suite(seed: int = 0, trials: int = 100, faults: frozenset[str] | set[str] = frozenset(),
              model_config: model.LoadCNNConfig | None = None) -> dict[str, float]:
    """Max relative error per layer type over ``trials`` random points.

    ``faults`` names layers whose backward is deliberately sign-flipped, to
    prove the suite catches a broken gradient.
    """
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, trial in TRIALS.items():
        kwargs = {}
        if name in faults:
            if name not in _BACKWARDS:
                raise ValueError(f"no fault injection available for {name!r}")
            kwargs["backward"] = _flip(_BACKWARDS[name])
        report[name] = float(max(trial(rng, **kwargs) for _ in range(trials)))
    report["loadcnn"] = float(max(model_directional_error(rng, model_config) for _ in range(trials)))
    return report
