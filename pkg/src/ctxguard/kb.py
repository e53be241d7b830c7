"""Labeled exemplar store with an exact similarity index and snapshot reads.

Writers (inserts, promotions, synthetic batches) go through a single lock and
become visible only when a new snapshot is published; readers pin one
immutable snapshot for the duration of a request, so retrieval never blocks
on ingestion. The reference index is an exact full scan -- correctness tests
compare it against brute force, so there is no approximation anywhere in
this module.

Similarity scores are quantized to SCORE_DECIMALS places before thresholding
and ordering: different float summation orders (vectorized scan vs per-entry
dot) disagree in the last ulp, and without quantization mathematically tied
entries would sort differently across equivalent implementations.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .encoder import Embedding, EncoderConfig, embed, jaccard

LABELS = ("safe", "unsafe")
SOURCES = ("seed", "feedback", "synthetic", "adversarial")

KB_FORMAT_VERSION = 1

SCORE_DECIMALS = 12


def quantize_scores(scores: np.ndarray) -> np.ndarray:
    return np.round(scores, SCORE_DECIMALS)


class KbError(ValueError):
    """Invalid knowledge-base operation."""


class KbLoadError(KbError):
    """A KB file failed to parse; ``record_index`` names the offending record."""

    def __init__(self, message: str, record_index: int | None = None):
        super().__init__(message)
        self.record_index = record_index


@dataclass(frozen=True)
class KbEntry:
    entry_id: int
    text: str
    label: str
    embedding: Embedding
    source: str = "seed"
    timestamp_ms: int = 0
    confidence: float = 1.0

    @property
    def token_set(self) -> frozenset[str]:
        return self.embedding.tokens

    def to_record(self) -> dict:
        return {
            "id": self.entry_id,
            "text": self.text,
            "label": self.label,
            "source": self.source,
            "timestamp": self.timestamp_ms,
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class ContextSet:
    """Ordered retrieval result: (entry_id, score) pairs, best first."""

    items: tuple[tuple[int, float], ...]
    k_requested: int

    def __len__(self) -> int:
        return len(self.items)

    @property
    def entry_ids(self) -> tuple[int, ...]:
        return tuple(eid for eid, _ in self.items)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(s for _, s in self.items)

    def to_dict(self) -> dict:
        return {"items": [[eid, score] for eid, score in self.items], "k": self.k_requested}

    @classmethod
    def from_dict(cls, d: dict) -> "ContextSet":
        return cls(tuple((int(e), float(s)) for e, s in d["items"]), int(d["k"]))


EMPTY_CONTEXT = ContextSet((), 0)


def order_candidates(scores: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Rows sorted by score descending, entry id ascending."""
    return rows[np.lexsort((ids[rows], -scores[rows]))]


def select_topk(
    scores: np.ndarray, ids: np.ndarray, eligible: np.ndarray, k: int
) -> list[tuple[int, float]]:
    """Pick the k best eligible rows under the (score desc, id asc) order.

    Exact: when more than k rows are eligible the k-th largest score is found
    by partitioning and every row tied with it is kept for the final sort, so
    ties never truncate arbitrarily.
    """
    if k <= 0 or eligible.size == 0:
        return []
    if eligible.size > k:
        sub = scores[eligible]
        kth = np.partition(sub, eligible.size - k)[eligible.size - k]
        eligible = eligible[sub >= kth]
    ordered = order_candidates(scores, ids, eligible)[:k]
    return [(int(ids[r]), float(scores[r])) for r in ordered]


class KbSnapshot:
    """Immutable published view of the KB: entries plus scan arrays.

    ``scan_dtype`` picks the matrix precision for the full scan. float64 (the
    default) makes scores bit-compatible with a per-entry float64 oracle;
    float32 halves the memory traffic of the hot serving path (the scan stays
    exact and deterministic, scores just carry float32 rounding).
    """

    def __init__(self, epoch: int, entries: tuple[KbEntry, ...], scan_dtype=np.float64):
        self.epoch = epoch
        self.entries = entries
        self.scan_dtype = np.dtype(scan_dtype)
        self._by_id = {e.entry_id: e for e in entries}
        n = len(entries)
        d = entries[0].embedding.dimension if n else 0
        matrix = np.zeros((n, d), dtype=self.scan_dtype)
        row_norms = np.zeros(n)
        for i, e in enumerate(entries):
            matrix[i] = e.embedding.values
            row_norms[i] = np.linalg.norm(e.embedding.values)
        matrix.setflags(write=False)
        self.matrix = matrix
        self.row_norms = row_norms
        inv = np.zeros(n)
        np.divide(1.0, row_norms, out=inv, where=row_norms > 0)
        self._inv_norms = inv
        self.ids = np.array([e.entry_id for e in entries], dtype=np.int64)
        self.adversarial = np.array([e.source == "adversarial" for e in entries], dtype=bool)
        self._row_of_id = {e.entry_id: i for i, e in enumerate(entries)}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entry_id: int) -> bool:
        return entry_id in self._by_id

    def get(self, entry_id: int) -> KbEntry:
        try:
            return self._by_id[entry_id]
        except KeyError:
            raise KbError(f"entry id {entry_id} not in snapshot epoch {self.epoch}") from None

    def scan_scores(self, emb: Embedding, metric: str) -> np.ndarray:
        """Similarity of ``emb`` against every snapshot row, in row order."""
        n = len(self.entries)
        if n == 0:
            return np.zeros(0)
        if metric == "lexical":
            return quantize_scores(np.array([jaccard(emb.tokens, e.token_set) for e in self.entries]))
        query = emb.values
        if self.scan_dtype != query.dtype:
            query = query.astype(self.scan_dtype)
        dots = (self.matrix @ query).astype(np.float64, copy=False)
        if metric == "dot":
            return quantize_scores(dots)
        qnorm = float(np.linalg.norm(emb.values))
        if qnorm == 0.0:
            return np.zeros(n)
        out = dots * self._inv_norms
        out *= 1.0 / qnorm
        return quantize_scores(out)

    def eligible_rows(
        self,
        scores: np.ndarray,
        lo: float,
        hi: float | None = None,
        exclude_ids: Iterable[int] = (),
        include_adversarial: bool = False,
    ) -> np.ndarray:
        mask = scores >= lo
        if hi is not None:
            mask &= scores <= hi
        if not include_adversarial:
            mask &= ~self.adversarial
        for eid in exclude_ids:
            row = self._row_of_id.get(eid)
            if row is not None:
                mask[row] = False
        return np.flatnonzero(mask)


class KnowledgeBase:
    """Exemplar store: single-writer ingestion, lock-free snapshot reads."""

    def __init__(self, cfg: EncoderConfig, scan_dtype: str | np.dtype = np.float64):
        self.cfg = cfg
        self.scan_dtype = np.dtype(scan_dtype)
        self._entries: dict[int, KbEntry] = {}
        self._next_id = 0
        self._write_lock = threading.Lock()
        self._snapshot = KbSnapshot(0, (), self.scan_dtype)

    # -- ingestion ---------------------------------------------------------

    def insert(
        self,
        text: str,
        label: str,
        *,
        source: str = "seed",
        timestamp_ms: int | None = None,
        confidence: float = 1.0,
        entry_id: int | None = None,
    ) -> int:
        if not text or not text.strip():
            raise KbError("entry text must be nonempty")
        if label not in LABELS:
            raise KbError(f"label must be one of {LABELS}, got {label!r}")
        if source not in SOURCES:
            raise KbError(f"source must be one of {SOURCES}, got {source!r}")
        if timestamp_ms is None:
            timestamp_ms = int(time.time() * 1000)
        emb = embed(text, self.cfg)
        with self._write_lock:
            if entry_id is None:
                entry_id = self._next_id
            elif entry_id in self._entries:
                raise KbError(f"entry id {entry_id} already present")
            self._next_id = max(self._next_id, entry_id + 1)
            self._entries[entry_id] = KbEntry(
                entry_id=entry_id,
                text=text,
                label=label,
                embedding=emb,
                source=source,
                timestamp_ms=timestamp_ms,
                confidence=float(confidence),
            )
        return entry_id

    def publish_snapshot(self) -> int:
        """Atomically expose all inserted entries; the epoch always advances."""
        with self._write_lock:
            entries = tuple(self._entries[k] for k in sorted(self._entries))
            snap = KbSnapshot(self._snapshot.epoch + 1, entries, self.scan_dtype)
            self._snapshot = snap
            return snap.epoch

    # -- lookups -----------------------------------------------------------

    @property
    def snapshot(self) -> KbSnapshot:
        return self._snapshot

    @property
    def epoch(self) -> int:
        return self._snapshot.epoch

    def get(self, entry_id: int) -> KbEntry:
        """Resolve an id across published and not-yet-published entries."""
        try:
            return self._entries[entry_id]
        except KeyError:
            raise KbError(f"entry id {entry_id} not in knowledge base") from None

    def __len__(self) -> int:
        return len(self._entries)

    def pending_count(self) -> int:
        return len(self._entries) - len(self._snapshot)

    # -- retrieval ---------------------------------------------------------

    def retrieve_topk(
        self,
        text: str,
        k: int,
        epsilon: float,
        *,
        exclude_ids: Sequence[int] = (),
        include_adversarial: bool = False,
        snapshot: KbSnapshot | None = None,
        embedding: Embedding | None = None,
    ) -> ContextSet:
        """Up to ``k`` entries with sim >= 1 - epsilon, score desc then id asc."""
        if k < 0:
            raise KbError(f"k must be >= 0, got {k}")
        if not 0.0 <= epsilon <= 1.0:
            raise KbError(f"epsilon must be in [0, 1], got {epsilon}")
        snap = snapshot if snapshot is not None else self._snapshot
        if len(snap) == 0 or k == 0:
            return ContextSet((), k)
        emb = embedding if embedding is not None else embed(text, self.cfg)
        scores = snap.scan_scores(emb, self.cfg.metric)
        eligible = snap.eligible_rows(
            scores, 1.0 - epsilon, None, exclude_ids, include_adversarial
        )
        return ContextSet(tuple(select_topk(scores, snap.ids, eligible, k)), k)

    def retrieve_relaxed(
        self,
        text: str,
        delta: float,
        epsilon: float,
        *,
        exclude_ids: Sequence[int] = (),
        include_adversarial: bool = False,
        snapshot: KbSnapshot | None = None,
        embedding: Embedding | None = None,
    ) -> ContextSet:
        """Every entry in the band delta <= sim <= 1 - epsilon (no K cap)."""
        if delta < 0.0 or epsilon > 1.0:
            raise KbError(f"need 0 <= delta and epsilon <= 1, got delta={delta} epsilon={epsilon}")
        if delta >= epsilon:
            raise KbError(f"relaxed retrieval requires delta < epsilon, got {delta} >= {epsilon}")
        snap = snapshot if snapshot is not None else self._snapshot
        if len(snap) == 0:
            return ContextSet((), 0)
        emb = embedding if embedding is not None else embed(text, self.cfg)
        scores = snap.scan_scores(emb, self.cfg.metric)
        eligible = snap.eligible_rows(
            scores, delta, 1.0 - epsilon, exclude_ids, include_adversarial
        )
        ordered = order_candidates(scores, snap.ids, eligible)
        items = tuple((int(snap.ids[r]), float(scores[r])) for r in ordered)
        return ContextSet(items, len(items))

    # -- persistence -------------------------------------------------------

    def persist(self, path: str) -> None:
        """Header line + one JSON record per entry; text is the source of truth."""
        snap_entries = tuple(self._entries[k] for k in sorted(self._entries))
        header = {
            "format": KB_FORMAT_VERSION,
            "encoder": self.cfg.config_hash(),
            "count": len(snap_entries),
        }
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for e in snap_entries:
                f.write(json.dumps(e.to_record(), sort_keys=True, ensure_ascii=False) + "\n")

    @classmethod
    def load(
        cls, path: str, cfg: EncoderConfig, scan_dtype: str | np.dtype = np.float64
    ) -> "KnowledgeBase":
        """Re-embeds every record under ``cfg``; rejects mismatched encoders."""
        kb = cls(cfg, scan_dtype)
        with open(path, "r", encoding="utf-8") as f:
            header_line = f.readline()
            if not header_line.strip():
                raise KbLoadError("empty KB file: missing header")
            try:
                header = json.loads(header_line)
            except json.JSONDecodeError as exc:
                raise KbLoadError(f"unparseable KB header: {exc}") from exc
            if header.get("format") != KB_FORMAT_VERSION:
                raise KbLoadError(f"unsupported KB format {header.get('format')!r}")
            if header.get("encoder") != cfg.config_hash():
                raise KbLoadError(
                    "KB file was written under a different encoder config "
                    f"(file {str(header.get('encoder'))[:12]}..., "
                    f"current {cfg.config_hash()[:12]}...)"
                )
            expected = int(header.get("count", 0))
            index = 0
            for line in f:
                if not line.strip():
                    continue
                if index >= expected:
                    raise KbLoadError(
                        f"record {index}: more records than header count {expected}",
                        record_index=index,
                    )
                try:
                    rec = json.loads(line)
                    kb.insert(
                        rec["text"],
                        rec["label"],
                        source=rec.get("source", "seed"),
                        timestamp_ms=int(rec.get("timestamp", 0)),
                        confidence=float(rec.get("confidence", 1.0)),
                        entry_id=int(rec["id"]),
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError, KbError) as exc:
                    if isinstance(exc, KbLoadError):
                        raise
                    raise KbLoadError(f"record {index}: {exc}", record_index=index) from exc
                index += 1
            if index != expected:
                raise KbLoadError(
                    f"record {index}: file truncated, header promised {expected} records",
                    record_index=index,
                )
        kb.publish_snapshot()
        return kb
