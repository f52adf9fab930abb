"""Layer primitives: permutations, same-length convolution, activations, batch norm.

Every op accepts a single (length, channels) tensor or a (batch, length,
channels) stack and returns the same rank.  Forward passes are paired with
explicit backward functions; there is no autograd here.  All accumulation
orders are fixed so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

LEAKY_SLOPE = 0.01


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], False
    if x.ndim == 3:
        return x, True
    raise ShapeError(f"tensor must be (L, C) or (B, L, C), got shape {x.shape}")


def _like(out: np.ndarray, batched: bool) -> np.ndarray:
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# Channel/length permutations.  Both are pure reindexings (zero parameters,
# zero multiplies) and are exact inverses of each other, so each one's
# backward is the other applied to the upstream gradient.

def rearrange_down(x: np.ndarray, r: int) -> np.ndarray:
    """(L, 1) -> (L/r, r): sample i*r + c of the input becomes entry (i, c)."""
    xb, batched = _as_batch(x)
    b, length, ch = xb.shape
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    if ch != 1:
        raise ShapeError(f"rearrange expects 1 input channel, got {ch}")
    if length % r != 0:
        raise ShapeError(f"length {length} not divisible by r={r}")
    return _like(xb.reshape(b, length // r, r), batched)


def subpixel_up(x: np.ndarray, r: int) -> np.ndarray:
    """(L, r) -> (L*r, 1): entry (i, c) becomes sample i*r + c of the output."""
    xb, batched = _as_batch(x)
    b, length, ch = xb.shape
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    if ch != r:
        raise ShapeError(f"subpixel expects {r} channels, got {ch}")
    return _like(xb.reshape(b, length * r, 1), batched)


def rearrange_down_backward(grad_out: np.ndarray, r: int) -> np.ndarray:
    return subpixel_up(grad_out, r)


def subpixel_up_backward(grad_out: np.ndarray, r: int) -> np.ndarray:
    return rearrange_down(grad_out, r)


# ---------------------------------------------------------------------------
# Convolution.

@dataclass
class ConvParams:
    """Kernel (filter_len, in_ch, out_ch) and per-output-channel bias (out_ch,)."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if k.ndim != 3:
            raise ShapeError(f"kernel must be (W, Cin, Cout), got shape {k.shape}")
        if k.shape[0] % 2 == 0:
            raise ValueError(f"filter length must be odd, got {k.shape[0]}")
        if b.shape != (k.shape[2],):
            raise ShapeError(f"bias shape {b.shape} != ({k.shape[2]},)")
        self.kernel = k
        self.bias = b

    @property
    def filter_len(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[2]


def conv1d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Same-length cross-correlation: zero-pad (W-1)/2 per side, full channel sum.

    y[i, co] = sum_f sum_ci x_padded[i + f, ci] * kernel[f, ci, co] + bias[co]
    """
    xb, batched = _as_batch(x)
    b, length, ch = xb.shape
    w, cin, cout = p.kernel.shape
    if ch != cin:
        raise ShapeError(f"conv expects {cin} channels, got {ch}")
    pad = (w - 1) // 2
    xp = np.zeros((b, length + w - 1, cin))
    xp[:, pad:pad + length, :] = xb
    acc = np.zeros((b, length, cout))
    for f in range(w):  # tap loop: one GEMM per filter tap, fixed order
        acc += xp[:, f:f + length, :] @ p.kernel[f]
    return _like(acc + p.bias, batched)


def conv1d_backward(x: np.ndarray, p: ConvParams,
                    grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss through conv1d_forward.

    Returns (grad_x, grad_kernel, grad_bias).  grad_x is the exact adjoint of
    the pad-convolve-crop forward map; grad_kernel accumulates one GEMM per tap
    against the padded input.
    """
    xb, batched = _as_batch(x)
    gb, gbatched = _as_batch(grad_out)
    b, length, cin = xb.shape
    w, kcin, cout = p.kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv expects {kcin} channels, got {cin}")
    if gb.shape != (b, length, cout):
        raise ShapeError(f"grad_out shape {gb.shape} != {(b, length, cout)}")
    pad = (w - 1) // 2

    xp = np.zeros((b, length + w - 1, cin))
    xp[:, pad:pad + length, :] = xb

    grad_bias = gb.sum(axis=(0, 1))
    grad_kernel = np.empty_like(p.kernel)
    gxp = np.zeros((b, length + w - 1, cin))
    for f in range(w):
        grad_kernel[f] = np.tensordot(xp[:, f:f + length, :], gb, axes=([0, 1], [0, 1]))
        gxp[:, f:f + length, :] += gb @ p.kernel[f].T
    grad_x = gxp[:, pad:pad + length, :]
    return _like(grad_x, batched and gbatched), grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# Activations.

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Subgradient 0 at exactly 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, grad_out, 0.0)


def leaky_relu(x: np.ndarray) -> np.ndarray:
    """Identity for x > 0, slope 0.01 for x <= 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, LEAKY_SLOPE * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, grad_out, LEAKY_SLOPE * np.asarray(grad_out))


def linear(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def linear_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.asarray(grad_out, dtype=np.float64)


ACTIVATIONS = {
    "linear": (linear, linear_backward),
    "relu": (relu, relu_backward),
    "leaky_relu": (leaky_relu, leaky_relu_backward),
}


# ---------------------------------------------------------------------------
# Batch normalization (per channel, statistics over batch x positions).

@dataclass
class BatchNormParams:
    """Learned scale/shift plus running statistics for eval mode.

    Running stats are updated in place by train-mode forward passes; the
    training loop is the single writer, so shared-reference aliasing is safe.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        c = np.asarray(self.gamma, dtype=np.float64).shape
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != c:
                raise ShapeError(f"{name} shape {arr.shape} != {c}")
            setattr(self, name, arr)
        if not (0.0 < self.momentum <= 1.0):
            raise ValueError(f"momentum must be in (0, 1], got {self.momentum}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray  # (C,), includes epsilon
    count: int           # batch * length, the population size behind the stats
    mode: str


def batchnorm_forward(x: np.ndarray, p: BatchNormParams,
                      mode: str = "train") -> tuple[np.ndarray, BatchNormCache]:
    """Normalize per channel; train mode uses (and records) batch statistics.

    Variance is the population form (divide by count, not count - 1), matching
    what the backward pass and the running-average update assume.
    """
    xb, batched = _as_batch(x)
    b, length, ch = xb.shape
    if ch != p.channels:
        raise ShapeError(f"batchnorm expects {p.channels} channels, got {ch}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    if mode == "train":
        mean = xb.mean(axis=(0, 1))
        var = xb.var(axis=(0, 1))
        p.running_mean *= 1.0 - p.momentum
        p.running_mean += p.momentum * mean
        p.running_var *= 1.0 - p.momentum
        p.running_var += p.momentum * var
    else:
        mean = p.running_mean
        var = p.running_var

    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (xb - mean) * inv_std
    out = p.gamma * xhat + p.beta
    cache = BatchNormCache(xhat=xhat, inv_std=inv_std, count=b * length, mode=mode)
    return _like(out, batched), cache


def batchnorm_backward(cache: BatchNormCache, p: BatchNormParams,
                       grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_gamma, grad_beta).

    Train mode differentiates through the batch statistics; eval mode treats
    the running statistics as constants.
    """
    gb, batched = _as_batch(grad_out)
    xhat = cache.xhat
    if gb.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {gb.shape} != {xhat.shape}")
    grad_gamma = (gb * xhat).sum(axis=(0, 1))
    grad_beta = gb.sum(axis=(0, 1))
    gxhat = gb * p.gamma
    if cache.mode == "eval":
        gx = gxhat * cache.inv_std
    else:
        s = float(cache.count)
        gx = cache.inv_std * (gxhat
                              - gxhat.sum(axis=(0, 1)) / s
                              - xhat * (gxhat * xhat).sum(axis=(0, 1)) / s)
    return _like(gx, batched), grad_gamma, grad_beta
