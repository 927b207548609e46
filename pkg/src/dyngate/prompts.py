"""Scene prompts and deterministic stand-in text embeddings.

Each whitespace token is hashed together with a global seed into a
pseudo-random unit vector. Real encoder outputs can be loaded from a text
file instead (see :func:`load_embeddings`).
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from .errors import FormatError, ParseError, UnknownDomainError, ValidationError

TEMPLATE = "an image taken in "
DEFAULT_DIM = 32
DEFAULT_TOKENS = 8
PAD_TOKEN = "<pad>"


def expand_template(scene_name: str) -> str:
    if not scene_name or not scene_name.strip():
        raise ValidationError("scene name must be non-empty")
    return TEMPLATE + scene_name


def _token_vector(token: str, d: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x00{token}".encode("utf-8"), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def embed(text: str, d_text: int = DEFAULT_DIM, tokens: int = DEFAULT_TOKENS, seed: int = 0) -> np.ndarray:
    """Return a ``tokens x d_text`` matrix of unit rows; padded with a fixed pad vector."""
    if d_text < 8:
        raise ValidationError(f"d_text must be >= 8, got {d_text}")
    if tokens < 1:
        raise ValidationError(f"token count must be >= 1, got {tokens}")
    words = text.split()[:tokens]
    words += [PAD_TOKEN] * (tokens - len(words))
    return np.stack([_token_vector(w, d_text, seed) for w in words])


def _normalize_rows(mat: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FormatError(f"embedding for {name!r} has a zero row and cannot be normalised")
    return mat / norms


def load_embeddings(path, d_text: int = DEFAULT_DIM) -> Dict[str, np.ndarray]:
    """Parse ``name<TAB>v1 v2 ...`` lines into ``tokens x d_text`` unit-row matrices.

    Values are row-major; ``#`` starts a comment line. All entries must hold
    the same number of values, a multiple of ``d_text``.
    """
    out: Dict[str, np.ndarray] = {}
    width = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise ParseError("expected '<scene name><TAB><values>'", lineno)
        name, values = line.split("\t", 1)
        name = name.strip()
        if not name:
            raise ParseError("empty scene name", lineno)
        try:
            vec = np.array([float(v) for v in values.split()], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"bad number ({exc})", lineno) from None
        if vec.size == 0 or not np.all(np.isfinite(vec)):
            raise ParseError("expected finite values", lineno)
        if width is None:
            if vec.size % d_text:
                raise FormatError(f"line {lineno}: {vec.size} values is not a multiple of d_text={d_text}")
            width = vec.size
        elif vec.size != width:
            raise FormatError(f"line {lineno}: entry {name!r} has {vec.size} values, earlier entries have {width}")
        out[name] = _normalize_rows(vec.reshape(-1, d_text), name)
    return out


class PromptBank:
    """Resolves scene names to ``tokens x d_text`` prompt matrices."""

    def __init__(self, d_text: int = DEFAULT_DIM, tokens: int = DEFAULT_TOKENS, seed: int = 0,
                 table: Optional[Mapping[str, np.ndarray]] = None, known=None):
        self.d_text = d_text
        self.tokens = tokens
        self.seed = seed
        self.table = {}
        for name, vec in (table or {}).items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.size != tokens * d_text:
                raise FormatError(f"embedding for {name!r} has {vec.size} values, expected {tokens}x{d_text}")
            self.table[name] = _normalize_rows(vec.reshape(tokens, d_text), name)
        self.known = set(known) if known is not None else None

    @classmethod
    def from_file(cls, path, d_text: int, tokens: int, seed: int = 0) -> "PromptBank":
        return cls(d_text, tokens, seed, table=load_embeddings(path, d_text))

    def fallback(self) -> np.ndarray:
        return embed(TEMPLATE.strip(), self.d_text, self.tokens, self.seed)

    def get(self, scene_name: str, strict: bool = False) -> np.ndarray:
        if scene_name in self.table:
            return self.table[scene_name]
        known = self.known if self.known is not None else (set(self.table) if self.table else None)
        if known is not None and scene_name not in known:
            if strict:
                raise UnknownDomainError(f"no prompt embedding for scene {scene_name!r}")
            return self.fallback()
        if not scene_name:
            if strict:
                raise UnknownDomainError("empty scene name")
            return self.fallback()
        return embed(expand_template(scene_name), self.d_text, self.tokens, self.seed)
