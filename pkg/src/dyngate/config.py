"""Sectioned ``key = value`` run configuration.

Every recognised key is listed in ``FIELDS`` with its type, default and a
one-line description; unknown sections or keys are rejected. The seed falls
back to the ``DYNGATE_SEED`` environment variable when neither the file nor
a flag sets it.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

from . import losses as L
from .errors import ParseError, ValidationError
from .network import NetworkConfig
from .trainer import TrainConfig

SEED_ENV = "DYNGATE_SEED"


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _names(text: str) -> Tuple[str, ...]:
    return tuple(v for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Field:
    section: str
    key: str
    parse: Callable[[str], Any]
    default: str
    doc: str


FIELDS = [
    Field("data", "manifest", str, "data/manifest.tsv", "dataset manifest (paths relative to the manifest)"),
    Field("data", "source", str, "photo", "training domain"),
    Field("data", "targets", _names, "sketch, cartoon, night", "unseen evaluation domains"),
    Field("data", "val_fraction", float, "0.2", "share of the source file held out for validation"),
    Field("data", "embeddings", str, "", "optional prompt embedding table (empty: hashed prompts)"),
    Field("train", "variant", str, "slot", "base | dynamic | normal | slot"),
    Field("train", "seed", int, "", f"run seed (empty: ${SEED_ENV}, else 0)"),
    Field("train", "epochs", int, "70", "training epochs"),
    Field("train", "batch_size", int, "64", "minibatch size (reference recipe: 256)"),
    Field("train", "learning_rate", float, "0.001", "SGD step size"),
    Field("train", "weight_decay", float, "0.0001", "L2 weight decay"),
    Field("train", "momentum", float, "0.9", "heavy-ball momentum"),
    Field("train", "gate_lr_scale", float, "1.0", "step-size multiplier for gate and fusion parameters"),
    Field("schedule", "target_rate", float, "0.5", "target rate T_d in (0, 1)"),
    Field("schedule", "alpha", float, "0.05", "bound annealing rate"),
    Field("schedule", "weight", float, "1.0", "bound loss weight"),
    Field("network", "widths", _ints, "16, 32, 64, 128", "stage widths"),
    Field("network", "blocks_per_stage", int, "1", "residual blocks per stage"),
    Field("network", "num_classes", int, "4", "class count K"),
    Field("network", "slots", int, "4", "slot count S"),
    Field("network", "slot_dim", int, "32", "slot width d"),
    Field("network", "iters", int, "3", "slot refinement iterations T"),
    Field("network", "d_text", int, "32", "prompt embedding width"),
    Field("network", "prompt_tokens", int, "8", "prompt length in tokens"),
    Field("network", "prompt_seed", int, "0", "seed of the hashed prompt embedder"),
    Field("network", "threshold", float, "0.5", "eval gate threshold"),
    Field("network", "tau", float, "1.0", "Gumbel temperature"),
    Field("network", "grid", _ints, "4, 4", "spatial gate base grid"),
    Field("network", "gate_init_gain", float, "1.0", "gate-head weight init gain"),
    Field("network", "softmax_axis", str, "keys", "attention normalisation axis: keys | slots"),
]
_INDEX = {(f.section, f.key): f for f in FIELDS}
_NETWORK_KEYS = [f.key for f in FIELDS if f.section == "network"]


def default_config_text() -> str:
    """A complete config file with every key at its default, documented inline."""
    out, section = [], None
    for f in FIELDS:
        if f.section != section:
            if section is not None:
                out.append("")
            out.append(f"[{f.section}]")
            section = f.section
        out.append(f"# {f.doc}")
        out.append(f"{f.key} = {f.default}")
    return "\n".join(out) + "\n"


@dataclass
class RunConfig:
    values: Dict[Tuple[str, str], Any]
    base_dir: Path

    def __getitem__(self, dotted: str):
        section, key = dotted.split(".", 1)
        return self.values[(section, key)]

    @property
    def seed(self) -> int:
        return self["train.seed"]

    @property
    def manifest(self) -> Path:
        p = Path(self["data.manifest"])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def embeddings(self) -> Optional[Path]:
        raw = self["data.embeddings"]
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def network_config(self) -> NetworkConfig:
        kw = {k: self.values[("network", k)] for k in _NETWORK_KEYS}
        return NetworkConfig(variant=self["train.variant"], target_rate=self["schedule.target_rate"], **kw)

    def train_config(self) -> TrainConfig:
        sched = L.BoundSchedule(self["schedule.target_rate"], self["schedule.alpha"], self["schedule.weight"])
        return TrainConfig(
            epochs=self["train.epochs"], batch_size=self["train.batch_size"],
            learning_rate=self["train.learning_rate"], weight_decay=self["train.weight_decay"],
            momentum=self["train.momentum"], schedule=sched, variant=self["train.variant"], seed=self.seed,
            source=self["data.source"], targets=self["data.targets"], val_fraction=self["data.val_fraction"],
            gate_lr_scale=self["train.gate_lr_scale"])

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for f in FIELDS:
            if not cp.has_section(f.section):
                cp.add_section(f.section)
            v = self.values[(f.section, f.key)]
            cp.set(f.section, f.key, ", ".join(map(str, v)) if isinstance(v, tuple) else str(v))
        from io import StringIO
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def _convert(f: Field, raw: str, where: str):
    try:
        return f.parse(raw)
    except ValueError as exc:
        raise ValidationError(f"{where}: bad value for {f.section}.{f.key}: {exc}") from None


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = (),
                env: Optional[Dict[str, str]] = None) -> RunConfig:
    """Parse ``path`` (optional), then apply ``section.key=value`` overrides."""
    env = os.environ if env is None else env
    raw: Dict[Tuple[str, str], str] = {(f.section, f.key): f.default for f in FIELDS}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        base_dir = path.parent
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            if line is None and getattr(exc, "errors", None):
                line = exc.errors[0][0]
            raise ParseError(f"{path}: {exc.message if hasattr(exc, 'message') else exc}", line) from None
        for section in cp.sections():
            if section not in {f.section for f in FIELDS}:
                raise ValidationError(f"{path}: unknown section [{section}]")
            for key, value in cp.items(section):
                if (section, key) not in _INDEX:
                    raise ValidationError(f"{path}: unknown key {section}.{key}")
                raw[(section, key)] = value.strip()
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValidationError(f"override {item!r} is not of the form section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        if (section, key) not in _INDEX:
            raise ValidationError(f"unknown key {section}.{key}")
        raw[(section, key)] = value.strip()

    if raw[("train", "seed")] == "":
        raw[("train", "seed")] = env.get(SEED_ENV, "0") or "0"
    values = {k: _convert(_INDEX[k], v, str(path or "<flags>")) for k, v in raw.items()}
    cfg = RunConfig(values, base_dir)
    cfg.network_config()  # validates
    cfg.train_config()
    return cfg
