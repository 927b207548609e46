"""Finite-difference gradient battery over every differentiable op and the full loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import functional as F
from . import gates as G
from . import losses as L
from . import slot_fusion as SF
from . import tensor as T
from .gradcheck import gradcheck_report
from .network import DynamicNet, NetworkConfig
from .tensor import Tensor

TOLERANCE = 1e-4
# Deep composites accumulate roundoff of order eps*|f|/h per difference; a
# wider step keeps that well below the 1e-8 denominator floor, and entries
# whose stencil crosses a relu kink are excluded.
STEPS = {"composite": 1e-4}
KINK_AWARE = {"composite"}


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tolerance: float = TOLERANCE
    checked: int = 0
    skipped: int = 0

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


def _leaf(rng, *shape, lo=None):
    data = rng.normal(size=shape) if lo is None else rng.uniform(lo, lo + 1.5, size=shape)
    return Tensor(data, requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.05):
    """Normal draws pushed off the relu kink so central differences stay on one side."""
    x = rng.normal(size=shape)
    return Tensor(np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    # random projection so every output entry contributes to the scalar
    return T.tsum(out * Tensor(rng.normal(size=out.shape)))


def _case_elementwise(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    c = _leaf(rng, 3, 4, lo=0.5)
    r = _away_from_zero(rng, 3, 4)
    w = rng.normal(size=(3, 4))

    def f():
        y = (a + b) * a - b * T.exp(-T.log(c)) + T.scale(T.square(a), 0.3)
        y = y + T.sigmoid(a) * T.tanh(b) + T.exp(T.scale(a, 0.5)) + T.log(c) + T.relu(r)
        return T.tsum(y * w)

    return f, [a, b, c, r]


def _case_reductions(rng):
    a = _leaf(rng, 2, 3, 4)
    b = _leaf(rng, 2, 3, 2)

    def f():
        y = T.concat([a, b], axis=2)
        y = T.transpose(T.reshape(y, (3, 2, 6)), (2, 0, 1))
        return _weighted(T.mean(y, axis=1), np.random.default_rng(7)) + T.tsum(T.mean(a))

    return f, [a, b]


def _case_matmul(rng):
    a, b, w, bias = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5, 2), _leaf(rng, 2)

    def f():
        return _weighted(T.linear(T.matmul(a, b), w, bias), np.random.default_rng(8))

    return f, [a, b, w, bias]


def _case_softmax(rng):
    x = _leaf(rng, 3, 5)
    labels = rng.integers(0, 5, size=3)

    def f():
        return _weighted(T.softmax(x, -1), np.random.default_rng(9)) + T.tsum(T.log_softmax(x, 0)) * 0.1 \
            + T.cross_entropy(x, labels)

    return f, [x]


def _case_conv(rng):
    x, w, b, pw = _leaf(rng, 2, 2, 4, 4), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3), _leaf(rng, 3, 2)

    def f():
        y = F.conv2d(x, w, b)
        return _weighted(F.pointwise_conv(y, pw), np.random.default_rng(10))

    return f, [x, w, b, pw]


def _case_norm(rng):
    x = _leaf(rng, 3, 2, 2, 2)
    params = F.NormParams.create(2)
    params.scale.data = rng.uniform(0.5, 1.5, 2)
    params.shift.data = rng.normal(size=2)

    def f():
        return _weighted(F.channel_norm(x, params, "train"), np.random.default_rng(11))

    return f, [x, params.scale, params.shift]


def _case_pool(rng):
    x, m = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 2, 2)

    def f():
        y = F.avg_pool2(x)
        return _weighted(y, np.random.default_rng(12)) + _weighted(F.global_avg_pool(x), np.random.default_rng(13)) \
            + _weighted(F.nearest_upsample(m, 2), np.random.default_rng(14))

    return f, [x, m]


def _case_gru(rng):
    p = F.GRUParams.create(3, rng)
    h, x = _leaf(rng, 2, 3), _leaf(rng, 2, 3)

    def f():
        return _weighted(F.gru_cell(h, x, p), np.random.default_rng(15))

    return f, [h, x, *p.tensors().values()]


def _case_fusion(rng):
    init = SF.SlotInit.create(3, 2, 4, rng)
    p = SF.FusionParams.create(4, 8, rng)
    feats = _leaf(rng, 2, 3, 2, 2)
    prompt = T.as_tensor(rng.normal(size=(3, 8)))

    def f():
        y = SF.fuse(feats, prompt, init, p, iters=2)
        y = y + SF.fuse_from_slots(SF.init_slots(feats, init), prompt, p, 1, SF.SLOT_AXIS)
        return _weighted(y + SF.cross_attention_readout(SF.init_slots(feats, init), prompt, p),
                         np.random.default_rng(16))

    return f, [feats, *init.tensors().values(), *p.tensors().values()]


def _case_gates(rng):
    head = G.GateHead.create(4, 3, (2, 2), rng)
    fused = _leaf(rng, 2, 2, 2)
    noise_c = G.logistic_noise((2, 3), rng)
    noise_s = G.logistic_noise((2, 2, 2), rng)

    def f():
        c, s = G.gate_logits(fused, head)
        mc, _ = G.gumbel_gate(c, 0.7, noise=noise_c, relaxed=True)
        ms, _ = G.gumbel_gate(s, 1.0, noise=noise_s, relaxed=True)
        return _weighted(mc, np.random.default_rng(17)) + _weighted(G.mask_for_stage(ms, (4, 4)), np.random.default_rng(18))

    return f, [fused, *head.tensors().values()]


def _case_bound(rng):
    # densities kept off the hinge points
    dens = [Tensor(np.array(v), requires_grad=True) for v in rng.uniform(0.05, 0.95, size=4)]
    p = float(rng.uniform(0.2, 1.0))

    def f():
        low, up = L.bound_loss(dens, 0.5, p)
        return L.total_loss(Tensor(0.3), low, up, 1.5)

    return f, dens


def tiny_config(variant: str = "slot") -> NetworkConfig:
    return NetworkConfig(widths=(2, 3), input_shape=(3, 4, 4), num_classes=3, slots=2, slot_dim=2, iters=2,
                         d_text=8, prompt_tokens=2, grid=(2, 2), variant=variant)


def composite_loss(model: DynamicNet, images, labels, scene: str, schedule: L.BoundSchedule,
                   noise: Dict, rng: Optional[np.random.Generator] = None) -> Callable[[], Tensor]:
    """Zero-argument closure over the full training loss with replayed Gumbel noise.

    Gates run in relaxed mode: the forward value is the soft sample, which is
    exactly the function whose derivative the straight-through backward uses.
    """
    rng = rng or np.random.default_rng(0)

    def f():
        res = model.forward(images, scene, "train", rng, relaxed=True, noise=noise)
        task = T.cross_entropy(res.logits, labels)
        if not res.soft_densities:
            return task
        low, up = L.bound_loss(res.soft_densities, schedule.target_rate, schedule.p)
        return L.total_loss(task, low, up, schedule.weight)

    return f


def _case_composite(rng, variant="slot"):
    seed = int(rng.integers(0, 2**31))
    model = DynamicNet(tiny_config(variant), seed=seed)
    images = rng.random((2, 3, 4, 4))
    labels = rng.integers(0, 3, size=2)
    schedule = L.BoundSchedule(target_rate=0.5, epoch=int(rng.integers(0, 30)))
    f = composite_loss(model, images, labels, "photo", schedule, {}, np.random.default_rng(seed))
    return f, list(model.named_parameters().values())


CASES: Dict[str, Callable] = {
    "elementwise": _case_elementwise,
    "reductions": _case_reductions,
    "matmul": _case_matmul,
    "softmax": _case_softmax,
    "conv": _case_conv,
    "norm": _case_norm,
    "pool": _case_pool,
    "gru": _case_gru,
    "fusion": _case_fusion,
    "gates": _case_gates,
    "bound": _case_bound,
    "composite": _case_composite,
}


def run_battery(seeds: Iterable[int] = range(20), cases: Optional[Sequence[str]] = None,
                h: float = 1e-5) -> List[CheckResult]:
    names = list(cases) if cases is not None else list(CASES)
    out = []
    for seed in seeds:
        for name in names:
            rng = np.random.default_rng([seed, len(name)])
            f, inputs = CASES[name](rng)
            rep = gradcheck_report(f, inputs, STEPS.get(name, h), skip_kinks=name in KINK_AWARE)
            out.append(CheckResult(name, seed, rep.error, TOLERANCE, rep.checked, rep.skipped))
    return out


def summarize(results: Sequence[CheckResult]) -> Dict[str, float]:
    worst: Dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    return worst


def timed_battery(seeds=range(20), cases=None):
    t0 = time.perf_counter()
    res = run_battery(seeds, cases)
    return res, time.perf_counter() - t0
