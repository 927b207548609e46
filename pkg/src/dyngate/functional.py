"""Network-level ops built on :mod:`dyngate.tensor`.

All image tensors are NCHW. Convolutions are fixed to 3x3 / stride 1 /
zero padding 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import DegenerateBatchError, DimensionError
from .tensor import Tensor

NORM_EPS = 1e-7
NORM_MOMENTUM = 0.1


def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n c h w 3 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: expected NCHW input and Cout x Cin x 3 x 3 kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    cout = w.shape[0]
    if w.shape[1] != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {w.shape[1]}")
    cols = _im2col(x.data)
    wmat = w.data.reshape(cout, c * 9)
    out = (cols @ wmat.T).reshape(n, h, wd, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * wd, cout)
        gx = gw = gb = None
        if x.requires_grad:
            # channel-last scatter: one (N*H*W x Cout) @ (Cout x Cin) product per tap
            taps = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))
            dxp = np.zeros((n, h + 2, wd + 2, c))
            for i in range(3):
                for j in range(3):
                    dxp[:, i:i + h, j:j + wd, :] += (gmat @ taps[i, j]).reshape(n, h, wd, c)
            gx = dxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gmat.sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return T.make(out, parents, bw)


def pointwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution with kernel ``Cin x Cout`` (used for skip projections)."""
    if x.ndim != 4 or w.ndim != 2 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"pointwise_conv: input {x.shape} vs kernel {w.shape}")
    y = T.matmul(T.transpose(x, (0, 2, 3, 1)), w)
    return T.transpose(y, (0, 3, 1, 2))


@dataclass
class NormParams:
    """Learned scale/shift plus running statistics for one channel norm."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int, name: str = "") -> "NormParams":
        return cls(
            Tensor(np.ones(channels), requires_grad=True, name=f"{name}.scale"),
            Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.shift"),
            np.zeros(channels),
            np.ones(channels),
        )


def channel_norm(x: Tensor, params: NormParams, mode: str = "train") -> Tensor:
    """Per-channel standardisation (batch stats in train, running stats in eval)."""
    if x.ndim != 4 or x.shape[1] != params.scale.shape[0]:
        raise DimensionError(f"channel_norm: input {x.shape} vs {params.scale.shape[0]} channels")
    n, c, h, w = x.shape
    gamma = params.scale.data.reshape(1, c, 1, 1)
    beta = params.shift.data.reshape(1, c, 1, 1)
    if mode == "train":
        m = n * h * w
        if m == 1:
            raise DegenerateBatchError("channel_norm: train mode needs more than one value per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = xc * inv
        params.running_mean *= 1.0 - NORM_MOMENTUM
        params.running_mean += NORM_MOMENTUM * mu.reshape(c)
        params.running_var *= 1.0 - NORM_MOMENTUM
        params.running_var += NORM_MOMENTUM * var.reshape(c) * (m / (m - 1))

        def bw(g):
            gx = None
            if x.requires_grad:
                gh = g * gamma
                gx = inv * (gh - gh.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    elif mode == "eval":
        inv = 1.0 / np.sqrt(params.running_var.reshape(1, c, 1, 1) + NORM_EPS)
        xhat = (x.data - params.running_mean.reshape(1, c, 1, 1)) * inv

        def bw(g):
            return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return T.make(xhat * gamma + beta, (x, params.scale, params.shift), bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial extents must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return T.make(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected NCHW, got {x.shape}")
    if x.shape[2] * x.shape[3] == 0:
        raise DimensionError(f"global_avg_pool: empty feature map {x.shape}")
    return T.mean(x, axis=(2, 3))


def nearest_upsample(mask, factor) -> Tensor:
    """Replicate each cell of the last two axes into a ``factor`` block."""
    mask = T.as_tensor(mask)
    fh, fw = (factor, factor) if isinstance(factor, int) else factor
    if fh < 1 or fw < 1 or mask.ndim < 2:
        raise DimensionError(f"nearest_upsample: bad factor {factor} for shape {mask.shape}")
    out = np.repeat(np.repeat(mask.data, fh, axis=-2), fw, axis=-1)
    h, w = mask.shape[-2:]

    def bw(g):
        return (g.reshape(g.shape[:-2] + (h, fh, w, fw)).sum(axis=(-3, -1)),)

    return T.make(out, (mask,), bw)


@dataclass
class GRUParams:
    """Cho-2014 GRU weights; inputs and states are row vectors (``x @ W``)."""

    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wh: Tensor
    uh: Tensor
    bh: Tensor

    def tensors(self) -> dict:
        return dict(vars(self))

    @classmethod
    def create(cls, d: int, rng: Optional[np.random.Generator] = None, name: str = "gru") -> "GRUParams":
        def mat(key):
            data = np.zeros((d, d)) if rng is None else rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
            return Tensor(data, requires_grad=True, name=f"{name}.{key}")

        def vec(key):
            return Tensor(np.zeros(d), requires_grad=True, name=f"{name}.{key}")

        return cls(mat("wz"), mat("uz"), vec("bz"), mat("wr"), mat("ur"), vec("br"),
                   mat("wh"), mat("uh"), vec("bh"))


def gru_cell(h: Tensor, x: Tensor, p: GRUParams) -> Tensor:
    """h' = (1 - z) * h + z * h~ with z, r sigmoid gates and tanh candidate."""
    if h.shape != x.shape:
        raise DimensionError(f"gru_cell: state {h.shape} and input {x.shape} differ")
    d = h.shape[-1]
    if p.wz.shape != (d, d):
        raise DimensionError(f"gru_cell: weights {p.wz.shape} do not match width {d}")
    z = T.sigmoid(T.matmul(x, p.wz) + T.matmul(h, p.uz) + p.bz)
    r = T.sigmoid(T.matmul(x, p.wr) + T.matmul(h, p.ur) + p.br)
    cand = T.tanh(T.matmul(x, p.wh) + T.matmul(r * h, p.uh) + p.bh)
    return (1.0 - z) * h + z * cand
