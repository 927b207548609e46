"""Multi-domain synthetic shape images.

A class is a shape archetype rendered at a random position, scale and
rotation. A domain is a style preset applied to the rendered geometry
(palette, background texture, outline, noise, blur, contrast). Geometry
depends only on ``(seed, split, index)``, so the same sample index shows
the same shape in every domain.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Tuple

import numpy as np

from .errors import FormatError, ParseError, ValidationError

MAGIC = b"DGDS"
VERSION = 1
SIZE = 32
CHANNELS = 3
SPLITS = ("train", "val", "test")
SUPERSAMPLE = 4

SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar", "frame", "crescent", "ell", "star")


# ---------------------------------------------------------------- geometry

def _shape_inside(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    r = np.hypot(u, v)
    if name == "disk":
        return r <= 1.0
    if name == "square":
        return np.maximum(au, av) <= 0.8
    if name == "triangle":
        s3 = np.sqrt(3.0)
        return (v >= -0.5) & (s3 * u + v <= 1.0) & (-s3 * u + v <= 1.0)
    if name == "cross":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if name == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if name == "bar":
        return (au <= 1.0) & (av <= 0.3)
    if name == "frame":
        m = np.maximum(au, av)
        return (m <= 0.85) & (m >= 0.5)
    if name == "crescent":
        return (r <= 1.0) & (np.hypot(u - 0.45, v) > 0.75)
    if name == "ell":
        return (((u >= -0.8) & (u <= -0.3) & (av <= 0.8))
                | ((au <= 0.8) & (v >= 0.3) & (v <= 0.8)))
    if name == "star":
        theta = np.arctan2(v, u)
        return r <= 0.6 + 0.4 * np.cos(5.0 * theta)
    raise ValidationError(f"unknown shape {name!r}")


def render_geometry(shape: str, rng: np.random.Generator, size: int = SIZE) -> np.ndarray:
    """Anti-aliased coverage mask in [0, 1] for one randomly placed shape."""
    radius = rng.uniform(0.22, 0.34) * size
    margin = radius * 0.9
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = _shape_inside(shape, u, v).astype(np.float64)
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


# ---------------------------------------------------------------- styles

def _blur(img: np.ndarray, passes: int = 1) -> np.ndarray:
    """Separable [1 2 1]/4 blur on the last two axes (edge-replicated)."""
    for _ in range(passes):
        p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
        img = (p[..., :-2, 1:-1] + 2 * p[..., 1:-1, 1:-1] + p[..., 2:, 1:-1]) / 4.0
        p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
        img = (p[..., 1:-1, :-2] + 2 * p[..., 1:-1, 1:-1] + p[..., 1:-1, 2:]) / 4.0
    return img


def _edges(mask: np.ndarray, width: int = 1) -> np.ndarray:
    """Outline band of a coverage mask: dilation minus erosion."""
    p = np.pad(mask, width, mode="constant")
    k = 2 * width + 1
    h, w = mask.shape
    stack = np.stack([p[i:i + h, j:j + w] for i in range(k) for j in range(k)])
    return np.clip(stack.max(axis=0) - stack.min(axis=0), 0.0, 1.0)


def _gradient_field(rng, size=SIZE) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    a = rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.5 * (np.cos(a) * (xx - 0.5) + np.sin(a) * (yy - 0.5)) * 1.4


def _rand_color(rng, lo=0.1, hi=0.9) -> np.ndarray:
    return rng.uniform(lo, hi, size=(3, 1, 1))


def _compose(fg: np.ndarray, bg: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return bg * (1.0 - mask) + fg * mask


_LUMA = np.array([0.299, 0.587, 0.114]).reshape(3, 1, 1)


def _contrasting_color(rng, other: np.ndarray, min_gap: float = 0.3) -> np.ndarray:
    """Random colour whose luminance differs from ``other`` by at least ``min_gap``."""
    ref = float((other * _LUMA).sum())
    for _ in range(64):
        c = _rand_color(rng, 0.02, 0.98)
        if abs(float((c * _LUMA).sum()) - ref) >= min_gap:
            return c
    return np.full((3, 1, 1), 0.95 if ref < 0.5 else 0.05)


def _style_photo(mask, rng):
    g = _gradient_field(rng)
    base = _rand_color(rng, 0.2, 0.8)
    bg = base * (0.7 + 0.3 * g) + _rand_color(rng, -0.1, 0.1)
    shade = 0.8 + 0.2 * _gradient_field(rng)
    fg = _contrasting_color(rng, base) * shade
    img = _compose(fg, bg, mask) * rng.uniform(0.55, 1.1)  # exposure
    return img + rng.normal(0.0, 0.03, img.shape)


def _style_sketch(mask, rng):
    sheet = 0.93 + rng.normal(0.0, 0.02, (1, SIZE, SIZE))
    stroke = _edges(mask, 1)
    ink = rng.uniform(0.05, 0.3)
    hatch_phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij")
    hatch = 0.5 + 0.5 * np.sin((xx + yy) * 1.3 + hatch_phase)
    tone = sheet - 0.25 * mask * hatch
    img = tone * (1.0 - stroke) + ink * stroke
    return np.repeat(img, 3, axis=0)


def _style_cartoon(mask, rng):
    bg_color = _rand_color(rng, 0.5, 1.0)
    bg = bg_color * np.ones((3, SIZE, SIZE))
    hard = (mask >= 0.5).astype(np.float64)
    fg = np.zeros((3, 1, 1))
    fg[rng.integers(3)] = 1.0
    fg = np.clip(fg + rng.uniform(0.0, 0.4, (3, 1, 1)), 0, 1)
    fg = fg * 0.55 if abs(float(((fg - bg_color) * _LUMA).sum())) < 0.3 else fg
    img = _compose(fg, bg, hard)
    outline = _edges(hard, 1)
    return img * (1.0 - outline)


def _style_night(mask, rng):
    img = _style_photo(mask, rng)
    tint = np.array([0.35, 0.4, 0.7]).reshape(3, 1, 1)
    img = 0.08 + 0.8 * img * tint
    return img + rng.normal(0.0, 0.03, img.shape)


def _style_art(mask, rng):
    yy, xx = np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij")
    f1, f2 = rng.uniform(0.3, 0.9, 2)
    a = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(f1 * (np.cos(a) * xx + np.sin(a) * yy))
    swirl = 0.5 + 0.5 * np.sin(f2 * (-np.sin(a) * xx + np.cos(a) * yy) + 1.0)
    bg = _rand_color(rng) * stripes + _rand_color(rng) * (1.0 - stripes)
    fg = _rand_color(rng) * swirl + _rand_color(rng) * (1.0 - swirl)
    return _blur(_compose(fg, bg, mask), 1)


def _style_foggy(mask, rng):
    img = _style_photo(mask, rng)
    fog = rng.uniform(0.45, 0.65)
    return _blur(img * (1.0 - fog) + 0.75 * fog, 1)


PRESETS: Dict[str, Callable] = {
    "photo": _style_photo,
    "sketch": _style_sketch,
    "cartoon": _style_cartoon,
    "night": _style_night,
    "art": _style_art,
    "foggy": _style_foggy,
}
DEFAULT_DOMAINS = ("photo", "sketch", "cartoon", "night")


# ---------------------------------------------------------------- datasets

@dataclass
class DomainDataset:
    domain_name: str
    images: np.ndarray  # N x 3 x H x W, float64 in [0, 1]
    labels: np.ndarray  # N, int64
    num_classes: int
    split: str = "train"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, int]]:
        for img, lab in zip(self.images, self.labels):
            yield img, int(lab)

    def subset(self, idx, split: str) -> "DomainDataset":
        idx = np.asarray(idx)
        return DomainDataset(self.domain_name, self.images[idx].copy(), self.labels[idx].copy(),
                             self.num_classes, split, self.seed)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def equals(self, other: "DomainDataset") -> bool:
        return (self.domain_name == other.domain_name and self.split == other.split
                and self.seed == other.seed and self.num_classes == other.num_classes
                and self.images.tobytes() == other.images.tobytes()
                and np.array_equal(self.labels, other.labels))


def _sample_streams(seed: int, split: str, index: int, preset: str):
    base = [seed, SPLITS.index(split), index]
    geo = np.random.default_rng(np.random.SeedSequence(base))
    sty = np.random.default_rng(np.random.SeedSequence(base + [zlib.crc32(preset.encode("utf-8"))]))
    return geo, sty


def _check_preset(preset: str):
    if preset not in PRESETS:
        raise ValidationError(f"unknown domain preset {preset!r}; available: {', '.join(PRESETS)}")


def geometry_for(seed: int, split: str, index: int, num_classes: int) -> np.ndarray:
    geo, _ = _sample_streams(seed, split, index, "")
    return render_geometry(SHAPES[index % num_classes], geo)


def render_sample(preset: str, seed: int, split: str, index: int, num_classes: int) -> Tuple[np.ndarray, int]:
    _check_preset(preset)
    label = index % num_classes
    geo, sty = _sample_streams(seed, split, index, preset)
    mask = render_geometry(SHAPES[label], geo)
    img = PRESETS[preset](mask, sty)
    return np.clip(img, 0.0, 1.0), label


def domain_seed(seed: int, domain: str) -> int:
    """Per-domain generation seed, so separate domain files do not share geometry."""
    return zlib.crc32(f"{seed}:{domain}".encode("utf-8"))


def generate(domain: str, num_classes: int = 4, n: int = 400, seed: int = 0, split: str = "train") -> DomainDataset:
    """Render ``n`` class-balanced samples (label = index mod K) in one domain style."""
    _check_preset(domain)
    if not 2 <= num_classes <= len(SHAPES):
        raise ValidationError(f"class count must be in [2, {len(SHAPES)}], got {num_classes}")
    if n < num_classes:
        raise ValidationError(f"need at least one sample per class (n={n}, K={num_classes})")
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got {split!r}")
    images = np.empty((n, CHANNELS, SIZE, SIZE))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        images[i], labels[i] = render_sample(domain, seed, split, i, num_classes)
    return DomainDataset(domain, images, labels, num_classes, split, seed)


# ---------------------------------------------------------------- file format

_HEAD = struct.Struct("<4sIIIIIIQ")  # magic, version, K, n, C, H, W, seed


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save(ds: DomainDataset, path) -> None:
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, ds.num_classes, n, c, h, w, ds.seed))
        fh.write(_pack_str(ds.domain_name))
        fh.write(_pack_str(ds.split))
        rec = np.empty(n, dtype=[("label", "<u4"), ("pixels", "<f8", (c, h, w))])
        rec["label"] = ds.labels
        rec["pixels"] = ds.images
        fh.write(rec.tobytes())


def load(path) -> DomainDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise FormatError(f"{path}: truncated header at byte {len(raw)} (need {_HEAD.size})")
    magic, version, k, n, c, h, w, seed = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"{path}: dataset version {version} is not supported (expected {VERSION})")
    off = _HEAD.size
    strings = []
    for _ in range(2):
        if off + 2 > len(raw):
            raise FormatError(f"{path}: truncated string length at byte {off}")
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + ln > len(raw):
            raise FormatError(f"{path}: truncated string at byte {off}")
        try:
            strings.append(raw[off:off + ln].decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError(f"{path}: invalid text at byte {off}") from None
        off += ln
    domain, split = strings
    dt = np.dtype([("label", "<u4"), ("pixels", "<f8", (c, h, w))])
    need = off + n * dt.itemsize
    if len(raw) != need:
        where = min(len(raw), need)
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)} (mismatch at byte {where})")
    rec = np.frombuffer(raw, dtype=dt, count=n, offset=off)
    labels = rec["label"].astype(np.int64)
    if n and labels.max() >= k:
        raise FormatError(f"{path}: label {labels.max()} out of range for K={k}")
    return DomainDataset(domain, rec["pixels"].astype(np.float64), labels, k, split, seed)


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    domain: str
    split: str
    path: Path


def write_manifest(path, entries: List[ManifestEntry]) -> None:
    path = Path(path)
    lines = ["# domain\tsplit\tpath"]
    for e in entries:
        p = Path(e.path)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{e.domain}\t{e.split}\t{p}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> List[ManifestEntry]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError("expected '<domain><TAB><split><TAB><path>'", lineno)
        domain, split, p = (x.strip() for x in parts)
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}", lineno)
        p = Path(p)
        out.append(ManifestEntry(domain, split, p if p.is_absolute() else path.parent / p))
    return out
