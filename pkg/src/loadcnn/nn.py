"""Layer primitives for LoadCNN: convolution, max-pooling, ReLU, dense, concat.

Tensors are plain float64 ``numpy.ndarray`` values in channels-last layout.
Every primitive accepts either a single sample (``[H, W, C]``) or a batch
(``[N, H, W, C]``); the batched form is what the model uses during training.
Backward functions are written out by hand and are exercised against
finite differences by :func:`grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
PADDING_MODES = ("same", "valid")


class ShapeError(ValueError):
    """Raised when tensor dimensions do not agree."""


class RankError(ShapeError):
    """Raised when a tensor has the wrong number of dimensions."""


def as_tensor(x, shape: Sequence[int] | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel_height: int
    kernel_width: int
    in_channels: int
    out_channels: int
    padding_mode: str = "same"

    def __post_init__(self):
        for name in ("kernel_height", "kernel_width", "in_channels", "out_channels"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.padding_mode not in PADDING_MODES:
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel_height, self.kernel_width, self.in_channels, self.out_channels)

    @property
    def n_params(self) -> int:
        kh, kw, cin, cout = self.weight_shape
        return kh * kw * cin * cout + cout


@dataclass(frozen=True)
class PoolSpec:
    window_height: int
    window_width: int

    def __post_init__(self):
        if self.window_height < 1 or self.window_width < 1:
            raise ValueError("pool window dims must be >= 1")

    @property
    def window(self) -> tuple[int, int]:
        return (self.window_height, self.window_width)


# --------------------------------------------------------------------------
# helpers


def _batched(x: np.ndarray, name: str = "input") -> tuple[np.ndarray, bool]:
    """Return ``x`` as ``[N, H, W, C]`` and whether a batch axis was added."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise RankError(f"{name} must be rank 3 [H,W,C] or rank 4 [N,H,W,C], got rank {x.ndim}")


def same_padding(kernel: int) -> tuple[int, int]:
    """Zero padding (before, after) that keeps a dimension's size; odd remainder goes after."""
    total = kernel - 1
    before = total // 2
    return before, total - before


def conv_output_hw(h: int, w: int, kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return h, w
    if padding == "valid":
        return h - kh + 1, w - kw + 1
    raise ValueError(f"unknown padding mode {padding!r}")


def _check_conv_args(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, padding: str):
    if weights.ndim != 4:
        raise RankError(f"weights must be rank 4 [kh,kw,Cin,Cout], got rank {weights.ndim}")
    _, h, w, cin = x.shape
    kh, kw, wcin, cout = weights.shape
    if wcin != cin:
        raise ShapeError(f"in_channels mismatch: input has {cin}, weights expect {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"out_channels mismatch: bias shape {bias.shape}, expected ({cout},)")
    if padding not in PADDING_MODES:
        raise ValueError(f"unknown padding mode {padding!r}")
    if padding == "valid":
        if kh > h:
            raise ShapeError(f"kernel_height {kh} exceeds input height {h} under valid padding")
        if kw > w:
            raise ShapeError(f"kernel_width {kw} exceeds input width {w} under valid padding")


def _pad(x: np.ndarray, kh: int, kw: int, padding: str) -> np.ndarray:
    if padding == "valid":
        return x
    top, bottom = same_padding(kh)
    left, right = same_padding(kw)
    if top == bottom == left == right == 0:
        return x
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # [N, H', W', C, kh, kw] -> [N, H', W', kh, kw, C]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


# --------------------------------------------------------------------------
# convolution


def conv2d_forward(x, weights, bias, padding: str = "same") -> np.ndarray:
    """Cross-correlate ``x`` with ``weights`` and add ``bias``.

    ``x`` is ``[H, W, Cin]`` (or batched ``[N, H, W, Cin]``), ``weights`` is
    ``[kh, kw, Cin, Cout]``. No kernel flip is applied.
    """
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    xb, squeeze = _batched(x)
    _check_conv_args(xb, weights, bias, padding)
    kh, kw, cin, cout = weights.shape
    cols = _im2col(_pad(xb, kh, kw, padding), kh, kw)
    out = cols.reshape(-1, kh * kw * cin) @ weights.reshape(kh * kw * cin, cout)
    out = out.reshape(cols.shape[:3] + (cout,)) + bias
    return out[0] if squeeze else out


def conv2d_backward(x, weights, upstream, padding: str = "same"):
    """Gradients of a convolution w.r.t. its input, weights and bias.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    xb, squeeze = _batched(x)
    _check_conv_args(xb, weights, None, padding)
    kh, kw, cin, cout = weights.shape
    n, h, w, _ = xb.shape
    ho, wo = conv_output_hw(h, w, kh, kw, padding)
    gb = upstream[None] if squeeze else upstream
    if gb.shape != (n, ho, wo, cout):
        raise ShapeError(f"upstream_grad shape {upstream.shape} does not match conv output "
                         f"{(ho, wo, cout) if squeeze else (n, ho, wo, cout)}")

    xp = _pad(xb, kh, kw, padding)
    cols = _im2col(xp, kh, kw).reshape(-1, kh * kw * cin)
    g2 = gb.reshape(-1, cout)
    grad_w = (cols.T @ g2).reshape(kh, kw, cin, cout)
    grad_b = g2.sum(axis=0)

    dcols = (g2 @ weights.reshape(kh * kw * cin, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
    if padding == "same":
        top, _ = same_padding(kh)
        left, _ = same_padding(kw)
        dxp = dxp[:, top:top + h, left:left + w, :]
    grad_x = dxp[0] if squeeze else dxp
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# max-pooling


def _pool_window(pool) -> tuple[int, int]:
    if isinstance(pool, PoolSpec):
        return pool.window
    ph, pw = pool
    if ph < 1 or pw < 1:
        raise ValueError("pool window dims must be >= 1")
    return int(ph), int(pw)


def maxpool_forward(x, pool):
    """Non-overlapping max-pooling (stride equals window, remainder dropped).

    Returns ``(output, argmax)`` where ``argmax[..., i, j, c, :]`` holds the
    (row, col) input coordinate that won output cell ``(i, j, c)``. Ties go to
    the first cell in row-then-column scan order.
    """
    x = np.asarray(x, dtype=DTYPE)
    xb, squeeze = _batched(x)
    ph, pw = _pool_window(pool)
    n, h, w, c = xb.shape
    ho, wo = h // ph, w // pw
    if ho == 0 or wo == 0:
        raise ShapeError(f"pool window {(ph, pw)} larger than input spatial dims {(h, w)}")
    blocks = xb[:, :ho * ph, :wo * pw, :].reshape(n, ho, ph, wo, pw, c)
    out = blocks[:, :, 0, :, 0, :].copy()
    local = np.zeros(out.shape, dtype=np.intp)
    for k in range(1, ph * pw):
        cell = blocks[:, :, k // pw, :, k % pw, :]
        better = cell > out  # strict: earlier cells win ties
        out = np.where(better, cell, out)
        local[better] = k
    rows = np.arange(ho)[None, :, None, None] * ph + local // pw
    cols = np.arange(wo)[None, None, :, None] * pw + local % pw
    argmax = np.stack([rows, cols], axis=-1)
    if squeeze:
        return out[0], argmax[0]
    return out, argmax


def maxpool_backward(argmax, upstream, input_shape) -> np.ndarray:
    """Route ``upstream`` gradient to the winning input cells recorded in ``argmax``."""
    argmax = np.asarray(argmax)
    upstream = np.asarray(upstream, dtype=DTYPE)
    input_shape = tuple(input_shape)
    if argmax.shape[:-1] != upstream.shape or argmax.shape[-1] != 2:
        raise ShapeError(f"argmax shape {argmax.shape} does not match upstream_grad {upstream.shape}")
    if len(input_shape) != upstream.ndim:
        raise RankError(f"input_shape rank {len(input_shape)} != upstream rank {upstream.ndim}")
    if input_shape[-1] != upstream.shape[-1]:
        raise ShapeError(f"channel mismatch: input has {input_shape[-1]}, upstream has {upstream.shape[-1]}")
    grad = np.zeros(input_shape, dtype=DTYPE)
    ub, _ = _batched(upstream, "upstream_grad")
    ab = argmax if argmax.ndim == 5 else argmax[None]
    gb = grad if grad.ndim == 4 else grad[None]
    n, ho, wo, c = ub.shape
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, None, None, :]
    # windows never overlap, so plain assignment cannot collide
    gb[ni, ab[..., 0], ab[..., 1], ci] = ub
    return grad


# --------------------------------------------------------------------------
# elementwise / dense / concat


def relu(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    if x.shape != upstream.shape:
        raise ShapeError(f"relu upstream shape {upstream.shape} != input shape {x.shape}")
    # derivative at exactly zero is taken as 0
    return np.where(x > 0, upstream, 0.0)


def _check_dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None):
    if x.ndim not in (1, 2):
        raise RankError(f"dense input must be rank 1 or 2, got rank {x.ndim}")
    if weights.ndim != 2:
        raise RankError(f"dense weights must be rank 2, got rank {weights.ndim}")
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense input size {x.shape[-1]} != weights rows {weights.shape[0]}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weights.shape[1]},)")


def dense_forward(x, weights, bias) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    _check_dense(x, weights, bias)
    return x @ weights + bias


def dense_backward(x, weights, upstream):
    """Returns ``(grad_input, grad_weights, grad_bias)``; batch grads are summed."""
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    _check_dense(x, weights, None)
    if upstream.shape != x.shape[:-1] + (weights.shape[1],):
        raise ShapeError(f"dense upstream shape {upstream.shape} does not match output "
                         f"{x.shape[:-1] + (weights.shape[1],)}")
    grad_x = upstream @ weights.T
    if x.ndim == 1:
        grad_w = np.outer(x, upstream)
        grad_b = upstream.copy()
    else:
        grad_w = x.T @ upstream
        grad_b = upstream.sum(axis=0)
    return grad_x, grad_w, grad_b


def concat(parts: Sequence) -> np.ndarray:
    """Join rank-1 tensors (or rank-2 ``[N, k]`` batches) along the last axis."""
    arrs = [np.asarray(p, dtype=DTYPE) for p in parts]
    if not arrs:
        raise ValueError("concat needs at least one part")
    rank = arrs[0].ndim
    for i, a in enumerate(arrs):
        if a.ndim not in (1, 2) or a.ndim != rank:
            raise RankError(f"concat part {i} has rank {a.ndim}; all parts must be rank 1 (or all rank 2)")
    return np.concatenate(arrs, axis=-1)


def concat_backward(upstream, sizes: Sequence[int]) -> list[np.ndarray]:
    upstream = np.asarray(upstream, dtype=DTYPE)
    if sum(sizes) != upstream.shape[-1]:
        raise ShapeError(f"concat upstream length {upstream.shape[-1]} != sum of part sizes {sum(sizes)}")
    bounds = np.cumsum([0, *sizes])
    return [upstream[..., a:b].copy() for a, b in zip(bounds[:-1], bounds[1:])]


# --------------------------------------------------------------------------
# gradient checking


def grad_check(objective: Callable[[Mapping[str, np.ndarray]], float],
               analytic: Mapping[str, np.ndarray],
               point: Mapping[str, np.ndarray],
               epsilon: float = 1e-5,
               coords: Mapping[str, np.ndarray] | None = None) -> float:
    """Max relative error between ``analytic`` gradients and central differences.

    ``objective`` maps a dict of named arrays to a scalar. Every element of
    every array in ``point`` is perturbed unless ``coords`` restricts the
    check to given flat indices per name. The error per element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    work = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in point.items()}
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        grad = np.asarray(analytic[name], dtype=DTYPE).reshape(-1)
        if grad.size != flat.size:
            raise ShapeError(f"analytic gradient for {name!r} has {grad.size} elements, expected {flat.size}")
        idx = range(flat.size) if coords is None or name not in coords else coords[name]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = objective(work)
            flat[i] = orig - epsilon
            down = objective(work)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = grad[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
