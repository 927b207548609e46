"""Slot-attention fusion of visual features with prompt embeddings.

Slots start from pooled visual features, attend over prompt tokens with
scaled dot-product attention and are refined by a GRU for ``T`` steps.
Shapes accept an optional leading batch axis: slots ``[N x] S x d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

KEY_AXIS = "keys"
SLOT_AXIS = "slots"


@dataclass
class SlotInit:
    """Projection from pooled channel means to ``S x d`` slots (one per feature width)."""

    weight: Tensor  # C x (S*d)
    bias: Tensor  # S*d
    slots: int
    dim: int

    @classmethod
    def create(cls, channels: int, slots: int, dim: int, rng: Optional[np.random.Generator] = None,
               name: str = "init") -> "SlotInit":
        w = np.zeros((channels, slots * dim)) if rng is None else \
            rng.normal(0.0, math.sqrt(2.0 / channels), (channels, slots * dim))
        return cls(Tensor(w, requires_grad=True, name=f"{name}.weight"),
                   Tensor(np.zeros(slots * dim), requires_grad=True, name=f"{name}.bias"), slots, dim)

    def tensors(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


def init_slots(visual_features: Tensor, init: SlotInit) -> Tensor:
    """Average-pool ``[N x] C x H x W`` features, project and reshape to ``[N x] S x d``."""
    x = visual_features
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[2] * x.shape[3] == 0 or x.shape[1] == 0:
        raise DimensionError(f"init_slots: expected non-empty [N x] C x H x W features, got {visual_features.shape}")
    if init.weight.shape[0] != x.shape[1]:
        raise DimensionError(f"init_slots: features have {x.shape[1]} channels, projection expects {init.weight.shape[0]}")
    pooled = F.global_avg_pool(x)
    slots = T.reshape(T.linear(pooled, init.weight, init.bias), (x.shape[0], init.slots, init.dim))
    return T.reshape(slots, slots.shape[1:]) if single else slots


@dataclass
class FusionParams:
    wq: Tensor  # d x d
    wk: Tensor  # d_text x d
    wv: Tensor  # d_text x d
    gru: F.GRUParams

    @classmethod
    def create(cls, d: int, d_text: int, rng: Optional[np.random.Generator] = None, name: str = "fusion"):
        def mat(rows, key):
            data = np.zeros((rows, d)) if rng is None else rng.normal(0.0, 1.0 / math.sqrt(rows), (rows, d))
            return Tensor(data, requires_grad=True, name=f"{name}.{key}")

        return cls(mat(d, "wq"), mat(d_text, "wk"), mat(d_text, "wv"), F.GRUParams.create(d, rng, f"{name}.gru"))

    @property
    def dim(self) -> int:
        return self.wq.shape[1]

    def tensors(self) -> dict:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv}
        out.update({f"gru.{k}": v for k, v in self.gru.tensors().items()})
        return out


def _check(slots: Tensor, prompt: Tensor, p: FusionParams):
    if slots.shape[-1] != p.wq.shape[0]:
        raise DimensionError(f"slot width {slots.shape[-1]} does not match query projection {p.wq.shape}")
    if prompt.ndim != 2 or prompt.shape[1] != p.wk.shape[0]:
        raise DimensionError(f"prompt {prompt.shape} does not match key projection {p.wk.shape}")


def attention_scores(slots: Tensor, prompt, p: FusionParams, axis: str = KEY_AXIS) -> Tensor:
    """A = softmax(Q K^T / sqrt(d)) with Q = slots Wq, K = prompt Wk; ``[N x] S x P``.

    ``axis="keys"`` normalises each slot's row over prompt tokens. ``"slots"``
    makes slots compete for each token, then renormalises rows to sum to 1.
    """
    prompt = T.as_tensor(prompt)
    _check(slots, prompt, p)
    q = T.matmul(slots, p.wq)
    k = T.matmul(prompt, p.wk)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(p.dim))
    if axis == KEY_AXIS:
        return T.softmax(logits, axis=-1)
    if axis == SLOT_AXIS:
        return _row_normalize(T.softmax(logits, axis=-2) + 1e-8)
    raise ValueError(f"unknown softmax axis {axis!r}")


def _row_normalize(a: Tensor) -> Tensor:
    rows = T.tsum(a, axis=-1, keepdims=True)
    return a * T.exp(T.scale(T.log(rows), -1.0))


def attend(a: Tensor, prompt, p: FusionParams) -> Tensor:
    """F_att = A V with V = prompt Wv."""
    prompt = T.as_tensor(prompt)
    if prompt.ndim != 2 or prompt.shape[1] != p.wv.shape[0]:
        raise DimensionError(f"prompt {prompt.shape} does not match value projection {p.wv.shape}")
    if a.shape[-1] != prompt.shape[0]:
        raise DimensionError(f"attention has {a.shape[-1]} keys, prompt has {prompt.shape[0]} tokens")
    return T.matmul(a, T.matmul(prompt, p.wv))


def fuse_from_slots(slots0: Tensor, prompt, p: FusionParams, iters: int, axis: str = KEY_AXIS) -> Tensor:
    if iters < 0:
        raise ValueError(f"iteration count must be >= 0, got {iters}")
    prompt = T.as_tensor(prompt)
    slots = slots0
    for _ in range(iters):
        f_att = attend(attention_scores(slots, prompt, p, axis), prompt, p)
        slots = F.gru_cell(slots, f_att, p.gru)
    return slots


def fuse(visual_features: Tensor, prompt, init: SlotInit, p: FusionParams, iters: int = 3,
         axis: str = KEY_AXIS) -> Tensor:
    """Initialise slots from ``visual_features`` and refine them ``iters`` times."""
    if iters < 1:
        raise ValueError(f"iteration count must be >= 1, got {iters}")
    return fuse_from_slots(init_slots(visual_features, init), prompt, p, iters, axis)


def cross_attention_readout(slots0: Tensor, prompt, p: FusionParams, axis: str = KEY_AXIS) -> Tensor:
    """Single attention pass without recurrence (the plain-attention ablation)."""
    prompt = T.as_tensor(prompt)
    return attend(attention_scores(slots0, prompt, p, axis), prompt, p)
