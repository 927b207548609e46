"""SGD training loop, evaluation and per-epoch metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses as L
from . import tensor as T
from .data import DomainDataset
from .errors import DivergenceError, ValidationError
from .network import DynamicNet, NetworkConfig, canonical_variant, count_macs, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

# named random streams, keyed off the run seed
STREAM_ORDER = 4
STREAM_GUMBEL = 3
STREAM_SPLIT = 5


@dataclass
class TrainConfig:
    epochs: int = 70
    batch_size: int = 64  # the reference recipe used 256
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    momentum: float = 0.9
    schedule: L.BoundSchedule = field(default_factory=L.BoundSchedule)
    variant: str = "slot"
    seed: int = 0
    source: str = "photo"
    targets: Tuple[str, ...] = ("sketch", "cartoon", "night")
    val_fraction: float = 0.2
    clamp_open: bool = False
    gate_lr_scale: float = 1.0  # multiplier for gate-head and fusion parameters

    def __post_init__(self):
        self.targets = tuple(self.targets)
        self.variant = canonical_variant(self.variant)
        if self.learning_rate <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValidationError("weight decay must be >= 0 and momentum in [0, 1)")
        if self.source in self.targets:
            raise ValidationError(f"source domain {self.source!r} must not be a target")
        if len(set(self.targets)) != len(self.targets):
            raise ValidationError(f"duplicate target domains in {self.targets}")
        if self.gate_lr_scale <= 0:
            raise ValidationError(f"gate_lr_scale must be positive, got {self.gate_lr_scale}")
        if not 0 < self.val_fraction < 1:
            raise ValidationError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr, weight_decay: float,
             momentum: float, state: Optional[List[np.ndarray]] = None) -> List[np.ndarray]:
    """In-place SGD with L2 decay and heavy-ball momentum; returns the momentum buffers.

    ``lr`` is a float or one rate per parameter.
    """
    if state is None:
        state = [np.zeros_like(p.data) for p in params]
    rates = [lr] * len(params) if np.isscalar(lr) else list(lr)
    for p, g, buf, rate in zip(params, grads, state, rates):
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter of shape {p.shape}")
        g = g + weight_decay * p.data
        buf *= momentum
        buf += g
        p.data -= rate * buf
    return state


@dataclass
class EvalReport:
    accuracy: float
    n: int
    densities: Dict[str, float]
    mac_ratio: float


def evaluate(model: DynamicNet, ds: DomainDataset, scene: Optional[str] = None, batch_size: int = 256,
             clamp_open: bool = False, strict: bool = False) -> EvalReport:
    """Deterministic eval-mode accuracy, hard mask densities and MAC ratio."""
    scene = ds.domain_name if scene is None else scene
    correct = 0
    dense = gated = 0
    dens_sum: Dict[str, float] = {}
    with T.no_grad():
        for i in range(0, len(ds), batch_size):
            xb = ds.images[i:i + batch_size]
            res = model.forward(xb, scene, "eval", clamp_open=clamp_open, strict=strict)
            correct += int(np.sum(np.argmax(res.logits.data, axis=1) == ds.labels[i:i + batch_size]))
            dense += res.dense_macs
            gated += res.gated_macs
            for k, v in res.densities().items():
                dens_sum[k] = dens_sum.get(k, 0.0) + v * len(xb)
    n = len(ds)
    return EvalReport(correct / n, n, {k: v / n for k, v in dens_sum.items()}, gated / dense)


def split_source(ds: DomainDataset, val_fraction: float = 0.2) -> Tuple[DomainDataset, DomainDataset]:
    """Deterministic stratified train/val split (depends only on the dataset)."""
    rng = np.random.default_rng(np.random.SeedSequence([ds.seed, STREAM_SPLIT]))
    train_idx, val_idx = [], []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        k = int(round(len(idx) * val_fraction))
        val_idx.extend(idx[:k])
        train_idx.extend(idx[k:])
    return ds.subset(np.sort(train_idx), "train"), ds.subset(np.sort(val_idx), "val")


def metric_columns(net_cfg: NetworkConfig, targets: Sequence[str]) -> List[str]:
    cols = ["epoch", "p", "loss_task", "loss_low", "loss_up", "loss_total", "train_acc", "val_acc"]
    cols += [f"acc_{t}" for t in targets]
    if net_cfg.gated:
        for name, *_ in net_cfg.block_geometry():
            cols += [f"density_{name}_c", f"density_{name}_s"]
    cols.append("mac_ratio")
    return cols


def format_row(row: Dict[str, float], columns: Sequence[str]) -> List[str]:
    return [str(int(row[c])) if c == "epoch" else f"{row[c]:.6f}" for c in columns]


def write_metrics(path, rows: Sequence[Dict[str, float]], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(format_row(r, columns))


def read_metrics(path) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


@dataclass
class TrainResult:
    rows: List[Dict[str, float]]
    columns: List[str]
    model: DynamicNet
    best_epoch: int
    best_val: float
    best_state: Dict[str, np.ndarray]


def _check_finite(value: float, what: str, epoch: int, step: int):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {what} at epoch {epoch}, step {step}")


def train(config: TrainConfig, net_config: NetworkConfig, train_ds: DomainDataset, val_ds: DomainDataset,
          targets: Dict[str, DomainDataset], out_dir=None, prompts=None,
          model: Optional[DynamicNet] = None) -> TrainResult:
    """Train one run; writes ``metrics.csv`` and ``best.ckpt`` into ``out_dir`` when given."""
    if canonical_variant(net_config.variant) != config.variant:
        raise ValidationError(f"network variant {net_config.variant!r} differs from run variant {config.variant!r}")
    missing = [t for t in config.targets if t not in targets]
    if missing:
        raise ValidationError(f"no dataset for target domain(s) {missing}")
    if train_ds.domain_name != config.source:
        raise ValidationError(f"training data is from {train_ds.domain_name!r}, expected source {config.source!r}")
    for ds in (train_ds, val_ds, *targets.values()):
        if ds.num_classes != net_config.num_classes:
            raise ValidationError(f"{ds.domain_name}/{ds.split} has K={ds.num_classes}, network expects {net_config.num_classes}")

    model = model or DynamicNet(net_config, seed=config.seed, prompts=prompts)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, STREAM_ORDER]))
    gumbel_rng = np.random.default_rng(np.random.SeedSequence([config.seed, STREAM_GUMBEL]))
    names = list(model.named_parameters())
    params = list(model.named_parameters().values())
    gate_names = set(model.gate_parameters())
    rates = [config.learning_rate * (config.gate_lr_scale if k in gate_names else 1.0) for k in names]
    momentum_state = None
    sched = L.BoundSchedule(config.schedule.target_rate, config.schedule.alpha, config.schedule.weight, 0)
    columns = metric_columns(net_config, config.targets)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows: List[Dict[str, float]] = []
    best_val, best_epoch, best_state = -1.0, -1, {}
    n = len(train_ds)
    for epoch in range(config.epochs):
        sched.epoch = epoch
        p = sched.p
        perm = order_rng.permutation(n)
        sums = np.zeros(4)
        correct = 0
        for step, i in enumerate(range(0, n, config.batch_size)):
            idx = perm[i:i + config.batch_size]
            xb, yb = train_ds.images[idx], train_ds.labels[idx]
            res = model.forward(xb, config.source, "train", gumbel_rng, clamp_open=config.clamp_open)
            task = T.cross_entropy(res.logits, yb)
            if res.soft_densities:
                low, up = L.bound_loss(res.soft_densities, sched.target_rate, p)
            else:
                low, up = Tensor(0.0), Tensor(0.0)
            total = L.total_loss(task, low, up, sched.weight)
            _check_finite(float(total.data), "loss", epoch, step)
            for x in params:
                x.grad = None
            total.backward()
            grads = [np.zeros_like(x.data) if x.grad is None else x.grad for x in params]
            for name, g in zip(names, grads):
                if not np.all(np.isfinite(g)):
                    raise DivergenceError(f"non-finite gradient for {name} at epoch {epoch}, step {step}")
            momentum_state = sgd_step(params, grads, rates, config.weight_decay,
                                      config.momentum, momentum_state)
            m = len(idx)
            sums += m * np.array([float(task.data), float(low.data), float(up.data), float(total.data)])
            correct += int(np.sum(np.argmax(res.logits.data, axis=1) == yb))

        val = evaluate(model, val_ds, config.source, clamp_open=config.clamp_open)
        row = {"epoch": epoch, "p": p, "loss_task": sums[0] / n, "loss_low": sums[1] / n, "loss_up": sums[2] / n,
               "loss_total": sums[3] / n, "train_acc": correct / n, "val_acc": val.accuracy}
        for t in config.targets:
            row[f"acc_{t}"] = evaluate(model, targets[t], t, clamp_open=config.clamp_open).accuracy
        for k, v in val.densities.items():
            layer, kind = k.rsplit(".", 1)
            row[f"density_{layer}_{kind}"] = v
        row["mac_ratio"] = val.mac_ratio
        rows.append(row)
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, row["loss_total"], row["train_acc"], val.accuracy)

        if val.accuracy > best_val:
            best_val, best_epoch = val.accuracy, epoch
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            if out is not None:
                save_checkpoint(model, out / "best.ckpt", {
                    "epoch": epoch, "p": p, "val_acc": val.accuracy, "seed": config.seed,
                    "train": _train_dict(config)})
        if out is not None:
            write_metrics(out / "metrics.csv", rows, columns)
    return TrainResult(rows, columns, model, best_epoch, best_val, best_state)


def _train_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["targets"] = list(config.targets)
    return d


def best_row(result_or_rows) -> Dict[str, float]:
    """The metrics row of the best-validation epoch (earliest on ties)."""
    rows = result_or_rows.rows if isinstance(result_or_rows, TrainResult) else result_or_rows
    best = rows[0]
    for r in rows[1:]:
        if r["val_acc"] > best["val_acc"]:
            best = r
    return best


def unseen_accuracy(row: Dict[str, float], targets: Sequence[str]) -> float:
    return float(np.mean([row[f"acc_{t}"] for t in targets]))
