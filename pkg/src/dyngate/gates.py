"""Binary channel/spatial gates produced from fused slot features.

In training the gates are sampled with a two-class Gumbel-Softmax (binary
concrete) and passed straight-through: the forward value is hard, the
backward pass uses the relaxed sample. In eval they are thresholded
deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, TextIO, Tuple

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import DimensionError, ValidationError
from .tensor import Tensor

CHANNEL = "channel"
SPATIAL = "spatial"


@dataclass
class GateMask:
    kind: str
    values: np.ndarray
    threshold: float = 0.5

    @property
    def density(self) -> float:
        return float(np.mean(self.values))

    @property
    def is_hard(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class GateHead:
    """Two affine maps from flattened ``S*d`` fused features to channel and spatial logits."""

    channel_w: Tensor
    channel_b: Tensor
    spatial_w: Tensor
    spatial_b: Tensor
    grid: Tuple[int, int]

    @classmethod
    def create(cls, fused_width: int, channels: int, grid=(4, 4), rng: Optional[np.random.Generator] = None,
               bias: float = 0.0, weight_scale: Optional[float] = None, name: str = "gate") -> "GateHead":
        hg, wg = grid
        std = weight_scale if weight_scale is not None else math.sqrt(1.0 / fused_width)

        def mat(cols, key):
            data = np.zeros((fused_width, cols)) if rng is None else rng.normal(0.0, std, (fused_width, cols))
            return Tensor(data, requires_grad=True, name=f"{name}.{key}")

        return cls(mat(channels, "channel_w"), Tensor(np.full(channels, bias), requires_grad=True, name=f"{name}.channel_b"),
                   mat(hg * wg, "spatial_w"), Tensor(np.full(hg * wg, bias), requires_grad=True, name=f"{name}.spatial_b"),
                   (hg, wg))

    @property
    def channels(self) -> int:
        return self.channel_w.shape[1]

    def tensors(self) -> dict:
        return {"channel_w": self.channel_w, "channel_b": self.channel_b,
                "spatial_w": self.spatial_w, "spatial_b": self.spatial_b}


def gate_logits(fused: Tensor, head: GateHead) -> Tuple[Tensor, Tensor]:
    """Return ``([N x] C, [N x] Hg x Wg)`` logits from ``[N x] S x d`` fused features."""
    lead = fused.shape[:-2]
    width = fused.shape[-2] * fused.shape[-1]
    if width != head.channel_w.shape[0]:
        raise DimensionError(f"gate_logits: fused features {fused.shape} flatten to {width}, "
                             f"head expects {head.channel_w.shape[0]}")
    flat = T.reshape(fused, lead + (width,))
    chan = T.linear(flat, head.channel_w, head.channel_b)
    spat = T.reshape(T.linear(flat, head.spatial_w, head.spatial_b), lead + head.grid)
    return chan, spat


def _check_threshold(threshold: float):
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")


def binarize(logits, threshold: float = 0.5) -> np.ndarray:
    """``1`` where sigmoid(logit) >= threshold, else ``0``."""
    _check_threshold(threshold)
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return (T.stable_sigmoid(data) >= threshold).astype(np.float64)


def logistic_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """``g1 - g0`` for i.i.d. standard Gumbel draws."""
    u = rng.random((2,) + tuple(shape))
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    g = -np.log(-np.log(u))
    return g[0] - g[1]


def gumbel_gate(logits: Tensor, tau: float = 1.0, rng: Optional[np.random.Generator] = None,
                noise: Optional[np.ndarray] = None, relaxed: bool = False) -> Tuple[Tensor, Tensor]:
    """Sample a binary-concrete gate. Returns ``(mask, soft)``.

    ``soft = sigmoid((logit + g1 - g0) / tau)``. ``mask`` is ``1[soft >= 0.5]``
    with a straight-through backward, or ``soft`` itself when ``relaxed``.
    Pass ``noise`` to replay a fixed draw.
    """
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_gate needs an explicit random generator or fixed noise")
        noise = logistic_noise(logits.shape, rng)
    soft = T.sigmoid(T.scale(logits + Tensor(noise), 1.0 / tau))
    if relaxed:
        return soft, soft
    return T.straight_through(soft, 0.5), soft


def mask_for_stage(mask, target) -> Tensor:
    """Nearest-neighbour upsample a ``[... x] Hg x Wg`` mask to ``target = (H, W)``."""
    mask = T.as_tensor(mask)
    hg, wg = mask.shape[-2:]
    h, w = target
    if h % hg or w % wg or h < hg or w < wg:
        raise DimensionError(f"mask_for_stage: {h}x{w} is not an integer multiple of the {hg}x{wg} base grid")
    if (h, w) == (hg, wg):
        return mask
    return F.nearest_upsample(mask, (h // hg, w // wg))


def write_mask_dump(fh: TextIO, masks: Iterable[Tuple[str, GateMask]]) -> None:
    """One line per mask: ``layer<TAB>kind<TAB>density<TAB>v v v ...``."""
    for layer, m in masks:
        vals = " ".join(f"{v:g}" for v in np.asarray(m.values).reshape(-1))
        fh.write(f"{layer}\t{m.kind}\t{m.density:.6f}\t{vals}\n")


def read_mask_dump(fh: TextIO) -> list:
    out = []
    for line in fh:
        line = line.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        layer, kind, density, vals = line.split("\t")
        out.append((layer, kind, float(density), np.array([float(v) for v in vals.split()])))
    return out
