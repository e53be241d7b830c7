"""Human-in-the-loop knowledge base evolution.

Feedback labels accumulate per normalized query text; a record is promoted
into the KB only when the confidence gate passes (all labels agree and there
are at least k of them). Synthetic query/label pairs come from policy-driven
generation behind a pluggable interface, with a deterministic template
generator as the default. Promotions and synthetic rows stay invisible to
retrieval until a refresh publishes the next snapshot.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .kb import LABELS, KnowledgeBase

FEEDBACK_SOURCES = ("end_user", "operator", "grader_model")


class FeedbackError(ValueError):
    pass


@dataclass(frozen=True)
class LabelEvent:
    label: str
    source: str
    timestamp_ms: int

    def to_dict(self) -> dict:
        return {"label": self.label, "source": self.source, "timestamp": self.timestamp_ms}


@dataclass
class FeedbackRecord:
    query_text: str
    labels: list[LabelEvent] = field(default_factory=list)
    status: str = "pending"  # pending | accepted | rejected

    def to_dict(self) -> dict:
        return {
            "query_text": self.query_text,
            "labels": [e.to_dict() for e in self.labels],
            "status": self.status,
        }


def normalize_query(text: str) -> str:
    return " ".join(text.lower().split())


def confidence(record: FeedbackRecord, k: int) -> bool:
    """True iff all labels agree and there are at least k of them."""
    if k < 1:
        raise FeedbackError(f"k must be >= 1, got {k}")
    if not record.labels:
        return False
    first = record.labels[0].label
    unanimous = all(e.label == first for e in record.labels)
    return unanimous and len(record.labels) >= k


@dataclass(frozen=True)
class PolicySpec:
    policy_id: str
    target_label: str
    prompt_text: str
    few_shot_examples: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.prompt_text.strip():
            raise FeedbackError("policy prompt_text must be nonempty")
        if self.target_label not in LABELS:
            raise FeedbackError(f"target_label must be one of {LABELS}")

    def to_dict(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "target_label": self.target_label,
            "prompt_text": self.prompt_text,
            "few_shot_examples": list(self.few_shot_examples),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySpec":
        return cls(
            policy_id=str(d["policy_id"]),
            target_label=str(d["target_label"]),
            prompt_text=str(d["prompt_text"]),
            few_shot_examples=tuple(d.get("few_shot_examples", ())),
        )

    @classmethod
    def load(cls, path: str) -> "PolicySpec":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")


class GeneratorInterface(Protocol):
    """Turns a policy into query/label pairs; an external LLM plugs in here."""

    def generate(self, policy: PolicySpec, n: int, rng: np.random.Generator) -> list[tuple[str, str]]:
        ...


_VARIATION_WORDS = (
    "please", "right now", "for a friend", "asap", "again",
    "in detail", "quickly", "this week", "once more", "tonight",
)


class TemplateGenerator:
    """Slot-fills policy phrases with few-shot fragments; seeded, offline."""

    def generate(self, policy: PolicySpec, n: int, rng: np.random.Generator) -> list[tuple[str, str]]:
        prompt_tokens = policy.prompt_text.lower().split()
        out = []
        for i in range(n):
            parts = list(prompt_tokens)
            if policy.few_shot_examples:
                shot = policy.few_shot_examples[int(rng.integers(len(policy.few_shot_examples)))]
                take = shot.lower().split()
                parts.extend(take[: max(3, len(take) // 2)])
            parts.append(_VARIATION_WORDS[int(rng.integers(len(_VARIATION_WORDS)))])
            parts.append(f"variant{i}")
            out.append((" ".join(parts), policy.target_label))
        return out


class FeedbackStore:
    """Aggregates label events and feeds the KB through the confidence gate.

    Submissions are serialized per store; the KB snapshot only changes on
    refresh, so readers never see half-applied batches. An append-only JSONL
    log (one label event per line) makes the stream auditable.
    """

    def __init__(
        self,
        kb: KnowledgeBase,
        *,
        k: int = 3,
        log_path: str | None = None,
        clock=None,
    ):
        self.kb = kb
        self.k = k
        self.log_path = log_path
        self._clock = clock if clock is not None else (lambda: int(time.time() * 1000))
        self._records: dict[str, FeedbackRecord] = {}
        self._lock = threading.Lock()

    # -- feedback aggregation ---------------------------------------------------

    def submit(self, query_text: str, label: str, source: str = "end_user") -> FeedbackRecord:
        if label not in LABELS:
            raise FeedbackError(f"label must be one of {LABELS}, got {label!r}")
        if source not in FEEDBACK_SOURCES:
            raise FeedbackError(f"source must be one of {FEEDBACK_SOURCES}, got {source!r}")
        key = normalize_query(query_text)
        if not key:
            raise FeedbackError("query text must be nonempty")
        event = LabelEvent(label, source, self._clock())
        with self._lock:
            record = self._records.setdefault(key, FeedbackRecord(key))
            record.labels.append(event)
        if self.log_path:
            line = {
                "query_hash": hashlib.sha256(key.encode("utf-8")).hexdigest(),
                "label": label,
                "source": source,
                "timestamp": event.timestamp_ms,
            }
            with open(self.log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(line, sort_keys=True) + "\n")
        return record

    def record_for(self, query_text: str) -> FeedbackRecord | None:
        return self._records.get(normalize_query(query_text))

    def records(self, status: str | None = None) -> list[FeedbackRecord]:
        out = list(self._records.values())
        if status is not None:
            out = [r for r in out if r.status == status]
        return out

    def is_confident(self, record: FeedbackRecord) -> bool:
        return confidence(record, self.k)

    # -- promotion ---------------------------------------------------------------

    def promote(self, query_text: str) -> int:
        """Insert a confident record as a feedback-sourced KB entry.

        The stored confidence is n / (n + k): any value monotone in the label
        count works for ranking metadata, this one stays in (0, 1).
        """
        record = self.record_for(query_text)
        if record is None:
            raise FeedbackError(f"no feedback record for {query_text!r}")
        with self._lock:
            if record.status != "pending":
                raise FeedbackError(f"record already {record.status}")
            if not confidence(record, self.k):
                raise FeedbackError(
                    f"record not confident: {len(record.labels)} labels, need {self.k} consistent"
                )
            n = len(record.labels)
            entry_id = self.kb.insert(
                record.query_text,
                record.labels[0].label,
                source="feedback",
                timestamp_ms=self._clock(),
                confidence=n / (n + self.k),
            )
            record.status = "accepted"
        return entry_id

    def reject(self, query_text: str) -> FeedbackRecord:
        """Operator action; rejection is terminal."""
        record = self.record_for(query_text)
        if record is None:
            raise FeedbackError(f"no feedback record for {query_text!r}")
        with self._lock:
            if record.status != "pending":
                raise FeedbackError(f"record already {record.status}")
            record.status = "rejected"
        return record

    # -- synthetic generation ------------------------------------------------------

    def synth_generate(
        self,
        policy: PolicySpec,
        n: int,
        rng: np.random.Generator,
        generator: GeneratorInterface | None = None,
    ) -> list[tuple[str, str]]:
        if n < 1:
            raise FeedbackError(f"n must be >= 1, got {n}")
        gen = generator if generator is not None else TemplateGenerator()
        try:
            pairs = gen.generate(policy, n, rng)
        except Exception as exc:
            raise FeedbackError(f"generator failed for policy {policy.policy_id}: {exc}") from exc
        return pairs

    def add_synthetic(self, pairs: Sequence[tuple[str, str]]) -> list[int]:
        ids = []
        now = self._clock()
        for text, label in pairs:
            ids.append(
                self.kb.insert(text, label, source="synthetic", timestamp_ms=now, confidence=1.0)
            )
        return ids

    # -- refresh ----------------------------------------------------------------------

    def refresh(self) -> int:
        """Publish everything staged since the last snapshot; epoch advances."""
        return self.kb.publish_snapshot()
