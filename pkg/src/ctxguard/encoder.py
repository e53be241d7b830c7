"""Deterministic text encoding and the similarity metrics used by retrieval.

The encoder is a seeded hashed bag-of-n-grams featurizer: every n-gram is
hashed into one of ``hash_buckets`` buckets, the bucket is folded onto one of
``dimension`` vector components, and a second hash bit decides the sign of the
contribution (signed hashing reduces collision bias at small dimensions).
Identical text always produces bit-identical vectors, which makes retrieval
results exactly reproducible.
"""

from __future__ import annotations

import hashlib
import json
import re
import sys
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

METRICS = ("cosine", "dot", "lexical")
NORM_MODES = ("unit", "raw")


class EncoderError(ValueError):
    """Invalid encoder configuration or incompatible operands."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; punctuation is dropped."""
    return TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class EncoderConfig:
    ngram_orders: tuple[int, ...] = (1, 2)
    hash_buckets: int = 1 << 18
    hash_seed: int = 9241
    dimension: int = 64
    metric: str = "cosine"
    norm_mode: str = "unit"

    def __post_init__(self) -> None:
        if not self.ngram_orders:
            raise EncoderError("ngram_orders must be nonempty")
        if any(n < 1 for n in self.ngram_orders):
            raise EncoderError(f"ngram orders must be >= 1, got {self.ngram_orders}")
        if self.dimension < 1:
            raise EncoderError(f"dimension must be >= 1, got {self.dimension}")
        if self.hash_buckets < self.dimension:
            raise EncoderError(
                f"hash_buckets ({self.hash_buckets}) must be >= dimension ({self.dimension})"
            )
        if self.metric not in METRICS:
            raise EncoderError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.norm_mode not in NORM_MODES:
            raise EncoderError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        object.__setattr__(self, "ngram_orders", tuple(sorted(set(self.ngram_orders))))

    @property
    def seed_bytes(self) -> bytes:
        return self.hash_seed.to_bytes(8, "little", signed=False)

    def to_dict(self) -> dict:
        return {
            "ngram_orders": list(self.ngram_orders),
            "hash_buckets": self.hash_buckets,
            "hash_seed": self.hash_seed,
            "dimension": self.dimension,
            "metric": self.metric,
            "norm_mode": self.norm_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        if "ngram_orders" in known:
            known["ngram_orders"] = tuple(known["ngram_orders"])
        return cls(**known)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Embedding:
    """A fixed-dimension vector plus the token set it was derived from.

    The token set rides along because the lexical similarity metric is a
    Jaccard overlap of token sets, which cannot be recovered from the dense
    vector.
    """

    values: np.ndarray
    norm_mode: str
    tokens: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        self.values.setflags(write=False)

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    def is_zero(self) -> bool:
        return not np.any(self.values)


def ngrams(tokens: list[str], orders: Iterable[int]) -> list[str]:
    out: list[str] = []
    for n in orders:
        if n == 1:
            out.extend(tokens)
        else:
            out.extend(" ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return out


def _hash_ngram(gram: str, seed_bytes: bytes) -> tuple[int, float]:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=16, key=seed_bytes).digest()
    bucket_hash = int.from_bytes(digest[:8], "little")
    sign = 1.0 if digest[8] & 1 else -1.0
    return bucket_hash, sign


def embed(text: str, cfg: EncoderConfig) -> Embedding:
    """Hash n-grams of ``text`` into a ``cfg.dimension`` vector.

    Empty text (or text with no alphanumeric tokens) yields the zero vector
    with norm_mode ``raw``. Deterministic for a fixed (text, cfg).
    """
    tokens = tokenize(text)
    vec = np.zeros(cfg.dimension, dtype=np.float64)
    for gram in ngrams(tokens, cfg.ngram_orders):
        bucket_hash, sign = _hash_ngram(gram, cfg.seed_bytes)
        bucket = bucket_hash % cfg.hash_buckets
        vec[bucket % cfg.dimension] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return Embedding(vec, "raw", frozenset())
    if cfg.norm_mode == "unit":
        vec /= norm
    token_set = frozenset(sys.intern(t) for t in tokens)
    return Embedding(vec, cfg.norm_mode, token_set)


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 0.0
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def similarity(a: Embedding, b: Embedding, metric: str) -> float:
    """Score two embeddings: cosine in [-1, 1], dot unbounded, lexical in [0, 1]."""
    if metric not in METRICS:
        raise EncoderError(f"unknown metric {metric!r}")
    if metric == "lexical":
        return jaccard(a.tokens, b.tokens)
    if a.dimension != b.dimension:
        raise EncoderError(f"dimension mismatch: {a.dimension} vs {b.dimension}")
    dot = float(np.dot(a.values, b.values))
    if metric == "dot":
        return dot
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)
