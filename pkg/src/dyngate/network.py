"""Prompt-conditioned dynamic residual classifier.

Each residual block computes ``u = relu(norm1(conv1(x)))``, multiplies it by
a per-sample channel mask, computes ``v = norm2(conv2(u'))``, multiplies that
by an upsampled spatial mask and adds the (never gated) skip path. Masks come
from a per-block gate head reading slots fused from the block input and the
scene prompt through one shared fusion trunk.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from . import gates as G
from . import slot_fusion as SF
from . import tensor as T
from .errors import DimensionError, FormatError, ValidationError
from .prompts import PromptBank
from .tensor import Tensor

VARIANTS = ("base", "dynamic", "normal", "slot")
VARIANT_ALIASES = {"dynamic+normal-attention": "normal", "dynamic+slot-attention": "slot",
                   "normal-attention": "normal", "slot-attention": "slot"}


def canonical_variant(name: str) -> str:
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ValidationError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return name


@dataclass
class NetworkConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 4
    slots: int = 4
    slot_dim: int = 32
    iters: int = 3
    d_text: int = 32
    prompt_tokens: int = 8
    prompt_seed: int = 0
    threshold: float = 0.5
    tau: float = 1.0
    grid: Tuple[int, int] = (4, 4)
    target_rate: float = 0.5
    gate_init_gain: float = 1.0
    softmax_axis: str = SF.KEY_AXIS
    variant: str = "slot"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.grid = tuple(int(v) for v in self.grid)
        self.variant = canonical_variant(self.variant)
        self.validate()

    def validate(self):
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValidationError(f"stage widths must be positive, got {self.widths}")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ValidationError(f"stage widths must be nondecreasing, got {self.widths}")
        if self.num_classes < 2:
            raise ValidationError(f"class count must be >= 2, got {self.num_classes}")
        if self.blocks_per_stage < 1 or self.iters < 1 or self.slots < 1 or self.slot_dim < 1:
            raise ValidationError("blocks_per_stage, iters, slots and slot_dim must be >= 1")
        if not 0.0 < self.threshold < 1.0 or not 0.0 < self.target_rate < 1.0:
            raise ValidationError("threshold and target_rate must lie in (0, 1)")
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.softmax_axis not in (SF.KEY_AXIS, SF.SLOT_AXIS):
            raise ValidationError(f"softmax_axis must be 'keys' or 'slots', got {self.softmax_axis!r}")
        for h, w in self.stage_sizes():
            if h % self.grid[0] or w % self.grid[1]:
                raise ValidationError(f"stage size {h}x{w} is not a multiple of the gate grid {self.grid}")

    def stage_sizes(self) -> List[Tuple[int, int]]:
        _, h, w = self.input_shape
        out = []
        for s in range(len(self.widths)):
            if s:
                if h % 2 or w % 2:
                    raise ValidationError(f"cannot halve {h}x{w} for stage {s}")
                h, w = h // 2, w // 2
            out.append((h, w))
        return out

    def block_geometry(self) -> List[Tuple[str, int, int, int, int]]:
        """``(name, cin, cout, H, W)`` for each block in order."""
        out = []
        cin = self.widths[0]
        for s, ((h, w), cout) in enumerate(zip(self.stage_sizes(), self.widths)):
            for b in range(self.blocks_per_stage):
                out.append((f"stage{s + 1}.block{b + 1}", cin, cout, h, w))
                cin = cout
        return out

    @property
    def gated(self) -> bool:
        return self.variant != "base"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Block:
    name: str
    cin: int
    cout: int
    size: Tuple[int, int]
    downsample: bool
    conv1_w: Tensor
    norm1: F.NormParams
    conv2_w: Tensor
    norm2: F.NormParams
    skip_w: Optional[Tensor]
    init: Optional[SF.SlotInit] = None
    head: Optional[G.GateHead] = None


@dataclass
class ForwardResult:
    logits: Tensor
    masks: List[Tuple[str, G.GateMask, G.GateMask]]
    soft_densities: List[Tensor]
    dense_macs: int
    gated_macs: int
    hard_masks: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def mac_ratio(self) -> float:
        return self.gated_macs / self.dense_macs

    def densities(self) -> Dict[str, float]:
        out = {}
        for name, cm, sm in self.masks:
            out[f"{name}.c"] = cm.density
            out[f"{name}.s"] = sm.density
        return out


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


class DynamicNet:
    """Toy residual network with optional prompt-conditioned gating."""

    def __init__(self, config: NetworkConfig, seed: int = 0, prompts: Optional[PromptBank] = None):
        self.config = config
        self.prompts = prompts or PromptBank(config.d_text, config.prompt_tokens, config.prompt_seed)
        if (self.prompts.d_text, self.prompts.tokens) != (config.d_text, config.prompt_tokens):
            raise DimensionError("prompt bank geometry does not match the network config")
        # separate streams keep the backbone identical across variants
        bb = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        gr = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        c_in = config.input_shape[0]
        w0 = config.widths[0]
        self.stem_w = Tensor(_he(bb, (w0, c_in, 3, 3), c_in * 9), requires_grad=True, name="stem.w")
        self.stem_norm = F.NormParams.create(w0, "stem.norm")
        self.blocks: List[Block] = []
        prev_size = None
        for name, cin, cout, h, w in config.block_geometry():
            blk = Block(
                name, cin, cout, (h, w), prev_size is not None and prev_size != (h, w),
                Tensor(_he(bb, (cout, cin, 3, 3), cin * 9), requires_grad=True),
                F.NormParams.create(cout),
                Tensor(_he(bb, (cout, cout, 3, 3), cout * 9), requires_grad=True),
                F.NormParams.create(cout),
                Tensor(_he(bb, (cin, cout), cin), requires_grad=True) if cin != cout else None,
            )
            prev_size = (h, w)
            self.blocks.append(blk)
        wl = config.widths[-1]
        self.head_w = Tensor(_he(bb, (wl, config.num_classes), wl) * 0.5, requires_grad=True)
        self.head_b = Tensor(np.zeros(config.num_classes), requires_grad=True)

        self.fusion: Optional[SF.FusionParams] = None
        if config.gated:
            s, d = config.slots, config.slot_dim
            self.fusion = SF.FusionParams.create(d, config.d_text, gr, "fusion")
            bias = G.logit(math.sqrt(config.target_rate))
            for blk in self.blocks:
                blk.init = SF.SlotInit.create(blk.cin, s, d, gr)
                blk.head = G.GateHead.create(s * d, blk.cout, config.grid, gr, bias=bias,
                                             weight_scale=config.gate_init_gain * math.sqrt(2.0 / (s * d)))

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> Dict[str, Tensor]:
        out = {"stem.w": self.stem_w,
               "stem.norm.scale": self.stem_norm.scale, "stem.norm.shift": self.stem_norm.shift}
        for b in self.blocks:
            out.update({f"{b.name}.conv1.w": b.conv1_w,
                        f"{b.name}.norm1.scale": b.norm1.scale, f"{b.name}.norm1.shift": b.norm1.shift,
                        f"{b.name}.conv2.w": b.conv2_w,
                        f"{b.name}.norm2.scale": b.norm2.scale, f"{b.name}.norm2.shift": b.norm2.shift})
            if b.skip_w is not None:
                out[f"{b.name}.skip.w"] = b.skip_w
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        out.update(self.gate_parameters())
        return out

    def gate_parameters(self) -> Dict[str, Tensor]:
        out = {}
        if self.fusion is None:
            return out
        out.update({f"fusion.{k}": v for k, v in self.fusion.tensors().items()})
        for b in self.blocks:
            out.update({f"{b.name}.init.{k}": v for k, v in b.init.tensors().items()})
            out.update({f"{b.name}.gate.{k}": v for k, v in b.head.tensors().items()})
        return out

    def norms(self) -> Dict[str, F.NormParams]:
        out = {"stem.norm": self.stem_norm}
        for b in self.blocks:
            out[f"{b.name}.norm1"] = b.norm1
            out[f"{b.name}.norm2"] = b.norm2
        return out

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Every array needed to reproduce the model (parameters plus running stats)."""
        out = {k: v.data for k, v in self.named_parameters().items()}
        for k, n in self.norms().items():
            out[f"{k}.running_mean"] = n.running_mean
            out[f"{k}.running_var"] = n.running_var
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        norms = self.norms()
        expected = set(params) | {f"{k}.{s}" for k in norms for s in ("running_mean", "running_var")}
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise FormatError(f"checkpoint tensors do not match the model (missing {missing[:3]}, extra {extra[:3]})")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise FormatError(f"checkpoint tensor {k} has shape {arrays[k].shape}, model expects {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)
        for k, n in norms.items():
            n.running_mean[:] = arrays[f"{k}.running_mean"]
            n.running_var[:] = arrays[f"{k}.running_var"]

    # ------------------------------------------------------------ forward

    def prompt_for(self, scene: str, strict: bool = False) -> np.ndarray:
        return self.prompts.get(scene, strict=strict)

    def _fused(self, blk: Block, x: Tensor, prompt: np.ndarray) -> Tensor:
        cfg = self.config
        slots0 = SF.init_slots(x, blk.init)
        if cfg.variant == "dynamic":
            return slots0
        if cfg.variant == "normal":
            return SF.cross_attention_readout(slots0, prompt, self.fusion, cfg.softmax_axis)
        return SF.fuse_from_slots(slots0, prompt, self.fusion, cfg.iters, cfg.softmax_axis)

    def forward(self, images, scene: str = "photo", mode: str = "eval", rng: Optional[np.random.Generator] = None,
                relaxed: bool = False, clamp_open: bool = False, strict: bool = False,
                mask_override: Optional[Dict[int, Tuple[Optional[np.ndarray], Optional[np.ndarray]]]] = None,
                perturb: Optional[Dict[int, np.ndarray]] = None, noise: Optional[Dict] = None) -> ForwardResult:
        """Run the network on an ``N x C x H x W`` batch.

        ``mode="train"`` uses batch statistics and Gumbel-sampled gates
        (``rng`` or replayable ``noise`` required); ``mode="eval"`` uses
        running statistics and deterministic thresholding. ``clamp_open``
        forces every gate open. ``mask_override`` maps a block index to
        hard ``(channel, spatial)`` masks; ``perturb`` adds an array to a
        block's post-conv1 activations before masking.
        """
        if mode not in ("train", "eval"):
            raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        x = T.as_tensor(images)
        if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
            raise DimensionError(f"expected N x {cfg.input_shape} images, got {x.shape}")
        n = x.shape[0]
        gated = cfg.gated and not clamp_open
        prompt = self.prompt_for(scene, strict) if gated else None
        if gated and mode == "train" and not relaxed and rng is None and noise is None:
            raise ValidationError("train-mode gating needs an explicit random generator")

        h = T.relu(F.channel_norm(F.conv2d(x, self.stem_w), self.stem_norm, mode))
        masks, soft, hard_masks = [], [], []
        for i, blk in enumerate(self.blocks):
            if blk.downsample:
                h = F.avg_pool2(h)
            cmask = smask = None
            if gated:
                cmask, smask, c_soft, s_soft = self._gate(i, blk, h, prompt, mode, rng, relaxed, noise)
                soft.extend([c_soft, s_soft])
            elif cfg.gated:
                cmask = Tensor(np.ones((n, blk.cout)))
                smask = Tensor(np.ones((n,) + cfg.grid))
            if mask_override and i in mask_override:
                oc, os_ = mask_override[i]
                if oc is not None:
                    cmask = Tensor(np.broadcast_to(oc, (n, blk.cout)).copy())
                if os_ is not None:
                    smask = Tensor(np.broadcast_to(os_, (n,) + cfg.grid).copy())
            h = self._block(blk, h, cmask, smask, mode, None if perturb is None else perturb.get(i))
            if cmask is not None:
                hard_c = (cmask.data >= 0.5).astype(np.float64) if relaxed else cmask.data
                hard_s = (smask.data >= 0.5).astype(np.float64) if relaxed else smask.data
                hard_masks.append((hard_c, hard_s))
                masks.append((blk.name, G.GateMask(G.CHANNEL, hard_c, cfg.threshold),
                               G.GateMask(G.SPATIAL, hard_s, cfg.threshold)))
        pooled = F.global_avg_pool(h)
        logits = T.linear(pooled, self.head_w, self.head_b)
        dense, gated_macs = count_macs(cfg, hard_masks, n)
        return ForwardResult(logits, masks, soft, dense, gated_macs, hard_masks)

    __call__ = forward

    def _gate(self, i, blk, x, prompt, mode, rng, relaxed, noise):
        cfg = self.config
        c_logits, s_logits = G.gate_logits(self._fused(blk, x, prompt), blk.head)
        if mode == "eval":
            c = Tensor(G.binarize(c_logits, cfg.threshold))
            s = Tensor(G.binarize(s_logits, cfg.threshold))
            return c, s, T.mean(c), T.mean(s)
        cn = sn = None
        if noise is not None:
            key_c, key_s = (i, "c"), (i, "s")
            if key_c not in noise:
                noise[key_c] = G.logistic_noise(c_logits.shape, rng)
                noise[key_s] = G.logistic_noise(s_logits.shape, rng)
            cn, sn = noise[key_c], noise[key_s]
        c, c_soft = G.gumbel_gate(c_logits, cfg.tau, rng, cn, relaxed)
        s, s_soft = G.gumbel_gate(s_logits, cfg.tau, rng, sn, relaxed)
        return c, s, T.mean(c_soft), T.mean(s_soft)

    def _block(self, blk: Block, x: Tensor, cmask: Optional[Tensor], smask: Optional[Tensor], mode: str,
               perturb: Optional[np.ndarray]) -> Tensor:
        u = T.relu(F.channel_norm(F.conv2d(x, blk.conv1_w), blk.norm1, mode))
        if perturb is not None:
            u = u + Tensor(perturb)
        if cmask is not None:
            u = u * T.reshape(cmask, cmask.shape + (1, 1))
        v = F.channel_norm(F.conv2d(u, blk.conv2_w), blk.norm2, mode)
        if smask is not None:
            up = G.mask_for_stage(smask, blk.size)
            v = v * T.reshape(up, (up.shape[0], 1) + blk.size)
        skip = x if blk.skip_w is None else F.pointwise_conv(x, blk.skip_w)
        return T.relu(v + skip)

    def predict(self, images, scene: str, batch_size: int = 256, strict: bool = False) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                res = self.forward(images[i:i + batch_size], scene, "eval", strict=strict)
                out.append(res.logits.data)
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))


# ---------------------------------------------------------------- MAC accounting

def block_macs(cfg: NetworkConfig) -> List[Dict[str, int]]:
    """Dense per-sample MACs for each block's convs (and skip projection)."""
    out = []
    for _, cin, cout, h, w in cfg.block_geometry():
        hw = h * w
        out.append({"conv1": cout * cin * 9 * hw, "conv2": cout * cout * 9 * hw,
                    "skip": cin * cout * hw if cin != cout else 0})
    return out


def fixed_macs(cfg: NetworkConfig) -> int:
    """Per-sample MACs of the ungated stem and classifier head."""
    c, h, w = cfg.input_shape
    return cfg.widths[0] * c * 9 * h * w + cfg.widths[-1] * cfg.num_classes


def count_macs(cfg: NetworkConfig, masks: Sequence[Tuple[np.ndarray, np.ndarray]], batch: int = 1) -> Tuple[int, int]:
    """Return ``(dense, gated)`` MAC totals for a batch.

    conv2 work scales with the number of open input channels and the number
    of open output cells (spatial mask upsampled to the stage). The stem,
    conv1, skip projection and head are never gated. ``masks`` holds one
    hard ``(channel [N x] C, spatial [N x] Hg x Wg)`` pair per block, or is
    empty for the static network.
    """
    geo = cfg.block_geometry()
    per_block = block_macs(cfg)
    dense_one = fixed_macs(cfg) + sum(sum(b.values()) for b in per_block)
    dense = dense_one * batch
    if not masks:
        return dense, dense
    if len(masks) != len(geo):
        raise DimensionError(f"count_macs: got {len(masks)} mask pairs for {len(geo)} blocks")
    gated = fixed_macs(cfg) * batch
    for (name, cin, cout, h, w), macs, (cm, sm) in zip(geo, per_block, masks):
        cm, sm = np.asarray(cm), np.asarray(sm)
        if cm.size != batch * cout or sm.size != batch * cfg.grid[0] * cfg.grid[1]:
            raise DimensionError(f"count_macs: {name} masks {cm.shape}/{sm.shape} do not match "
                                 f"{batch} x {cout} channels and {batch} x {cfg.grid} cells")
        cm = cm.reshape(batch, cout)
        if not (np.all((cm == 0) | (cm == 1)) and np.all((sm == 0) | (sm == 1))):
            raise DimensionError(f"count_macs: {name} masks must be hard 0/1 values")
        cell_area = (h // cfg.grid[0]) * (w // cfg.grid[1])
        open_c = cm.sum(axis=1).astype(np.int64)
        open_cells = sm.reshape(batch, -1).sum(axis=1).astype(np.int64) * cell_area
        gated += (macs["conv1"] + macs["skip"]) * batch
        gated += int(np.sum(cout * open_c * 9 * open_cells))
    return int(dense), int(gated)


def analytic_mac_ratio(cfg: NetworkConfig, masks) -> float:
    """Float density-product form of ``count_macs`` (independent bookkeeping)."""
    per_block = block_macs(cfg)
    fixed = fixed_macs(cfg) + sum(b["conv1"] + b["skip"] for b in per_block)
    dense = fixed + sum(b["conv2"] for b in per_block)
    if not masks:
        return 1.0
    batch = np.asarray(masks[0][0]).reshape(-1, cfg.block_geometry()[0][2]).shape[0]
    total = 0.0
    for i in range(batch):
        g = fixed
        for b, (cm, sm) in zip(per_block, masks):
            cm = np.asarray(cm).reshape(batch, -1)[i]
            sm = np.asarray(sm).reshape(batch, -1)[i]
            g += b["conv2"] * cm.mean() * sm.mean()
        total += g
    return total / (dense * batch)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DGCK"
CKPT_VERSION = 1


def save_checkpoint(model: DynamicNet, path, extra: Optional[dict] = None) -> None:
    header = {"version": CKPT_VERSION, "network": model.config.to_dict(), **(extra or {})}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = model.state_arrays()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(b)))
            fh.write(b)
            T.write_tensor(fh, arrays[name])


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic {magic!r} at byte 0)")
        head = fh.read(8)
        if len(head) != 8:
            raise FormatError(f"{path}: truncated header at byte 4")
        version, hlen = struct.unpack("<II", head)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version} does not match supported version {CKPT_VERSION}")
        raw = fh.read(hlen)
        if len(raw) != hlen:
            raise FormatError(f"{path}: truncated config header at byte 12")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt config header ({exc})") from None
        cnt = fh.read(4)
        if len(cnt) != 4:
            raise FormatError(f"{path}: truncated tensor table at byte {fh.tell()}")
        (count,) = struct.unpack("<I", cnt)
        arrays = {}
        for _ in range(count):
            pos = fh.tell()
            ln = fh.read(2)
            if len(ln) != 2:
                raise FormatError(f"{path}: truncated tensor name at byte {pos}")
            name = fh.read(struct.unpack("<H", ln)[0])
            try:
                arrays[name.decode("utf-8")] = T.read_tensor(fh)
            except UnicodeDecodeError:
                raise FormatError(f"{path}: corrupt tensor name at byte {pos}") from None
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor table at byte {fh.tell() - 1}")
    return header, arrays


def load_checkpoint(path, prompts: Optional[PromptBank] = None) -> Tuple[DynamicNet, dict]:
    header, arrays = read_checkpoint(path)
    try:
        cfg = NetworkConfig.from_dict(header["network"])
    except (KeyError, TypeError, ValidationError) as exc:
        raise FormatError(f"{path}: bad network config in header ({exc})") from None
    model = DynamicNet(cfg, seed=0, prompts=prompts)
    model.load_state_arrays(arrays)
    return model, header
