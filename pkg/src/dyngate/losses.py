"""Density bound loss with an exponentially relaxed feasible interval.

Every mask density is pushed into ``[p*sqrt(Td), 1 - p*(1 - sqrt(Td))]``
with ``p = exp(-alpha * epoch)``. At epoch 0 the interval is the single
point ``sqrt(Td)``; it widens towards ``[0, 1]`` as training proceeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor

DEFAULT_ALPHA = 0.05


def anneal_p(epoch: int, alpha: float = DEFAULT_ALPHA) -> float:
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    if alpha <= 0:
        raise ValidationError(f"annealing rate must be positive, got {alpha}")
    return math.exp(-alpha * epoch)


@dataclass
class BoundSchedule:
    target_rate: float = 0.5
    alpha: float = DEFAULT_ALPHA
    weight: float = 1.0
    epoch: int = 0

    def __post_init__(self):
        if not 0.0 < self.target_rate < 1.0:
            raise ValidationError(f"target rate must lie in (0, 1), got {self.target_rate}")
        if self.weight < 0:
            raise ValidationError(f"bound loss weight must be >= 0, got {self.weight}")
        anneal_p(self.epoch, self.alpha)

    @property
    def p(self) -> float:
        return anneal_p(self.epoch, self.alpha)

    def interval(self) -> Tuple[float, float]:
        return bound_interval(self.target_rate, self.p)


def bound_interval(target_rate: float, p: float) -> Tuple[float, float]:
    r = math.sqrt(target_rate)
    return p * r, 1.0 - p * (1.0 - r)


Density = Union[float, Tensor]


def bound_loss(densities: Sequence[Density], target_rate: float, p: float) -> Tuple[Tensor, Tensor]:
    """Squared-hinge lower/upper penalties summed over all masks.

    ``densities`` holds one entry per (layer, kind) pair; tensors keep the
    graph so gradients reach the gate heads.
    """
    if len(densities) == 0:
        raise ValidationError("bound_loss needs at least one mask density")
    r = math.sqrt(target_rate)
    low_edge = p * r
    up_offset = p * (1.0 - r) - 1.0
    low = Tensor(0.0)
    up = Tensor(0.0)
    for dens in densities:
        dens = T.as_tensor(dens)
        low = low + T.square(T.relu(T.sub(low_edge, dens)))
        up = up + T.square(T.relu(T.add(dens, up_offset)))
    return low, up


def total_loss(task_loss, low, up, weight: float):
    """``task + weight * (low + up)``; works on tensors or plain floats."""
    if isinstance(task_loss, Tensor) or isinstance(low, Tensor) or isinstance(up, Tensor):
        if weight == 0.0:
            return T.as_tensor(task_loss)
        return T.add(task_loss, T.scale(T.add(low, up), weight))
    return task_loss + weight * (low + up)
