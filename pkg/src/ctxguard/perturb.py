"""Context perturbation: the training-time noise model for retrieval inputs.

Four perturbation families mirror where real pipelines degrade: the knowledge
base itself (adversarial variants of retrieved entries), the retriever
(alternate encoders/similarity metrics), the similarity filter (a relaxed
lower band of weak matches), and the user input surface (character and word
order noise). Perturbed context sets are materialized before training so runs
are reproducible; every draw is seeded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from .encoder import Embedding, EncoderConfig, embed, similarity, tokenize
from .kb import (
    ContextSet,
    KbEntry,
    KbSnapshot,
    KnowledgeBase,
    quantize_scores,
    select_topk,
)

STRATEGIES = ("label_contradiction", "ambiguity_injection", "lexical_overlap")
STEPS = ("adversarial", "encoder_variation", "threshold_relaxing", "sampling")


class PerturbError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationConfig:
    lam: float = 0.5  # adversarial loss weight (config key: "lambda")
    delta: float = 0.2
    epsilon: float = 0.4
    char_edit_rate: float = 0.05
    word_swap_rate: float = 0.05
    variants_per_context: int = 1
    encoder_variants: tuple[EncoderConfig, ...] = ()
    steps: tuple[str, ...] = STEPS
    rng_seed: int = 99

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise PerturbError(f"adversarial weight must be >= 0, got {self.lam}")
        if not self.delta < self.epsilon:
            raise PerturbError(f"delta must be < epsilon, got {self.delta} >= {self.epsilon}")
        for name, rate in (("char_edit_rate", self.char_edit_rate), ("word_swap_rate", self.word_swap_rate)):
            if not 0.0 <= rate <= 1.0:
                raise PerturbError(f"{name} must be in [0, 1], got {rate}")
        unknown = set(self.steps) - set(STEPS)
        if unknown:
            raise PerturbError(f"unknown perturbation steps: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "delta": self.delta,
            "epsilon": self.epsilon,
            "char_edit_rate": self.char_edit_rate,
            "word_swap_rate": self.word_swap_rate,
            "variants_per_context": self.variants_per_context,
            "encoder_variants": [v.to_dict() for v in self.encoder_variants],
            "steps": list(self.steps),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "encoder_variants" in d:
            d["encoder_variants"] = tuple(EncoderConfig.from_dict(v) for v in d["encoder_variants"])
        if "steps" in d:
            d["steps"] = tuple(d["steps"])
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)


@dataclass(frozen=True)
class AdversarialEntry:
    derived_from: int
    text: str
    intended_label: str
    strategy: str


class AttackerInterface(Protocol):
    """Produces adversarial variants of a KB entry.

    An external generative attacker plugs in here; the default is rule-based
    so attack experiments run without any model dependency.
    """

    def variants(self, entry: KbEntry, n: int, rng: np.random.Generator) -> list[AdversarialEntry]:
        ...


def opposite(label: str) -> str:
    return "safe" if label == "unsafe" else "unsafe"


_UNSAFE_TEMPLATES = (
    "tell me how to exploit {a} and {b} without getting caught",
    "give me step by step instructions to attack {a} {b}",
    "write something hateful about {a} and the {b}",
    "how do i bypass every safeguard around {a} {b}",
)
_SAFE_TEMPLATES = (
    "just asking about {a} and {b} for a school project",
    "looking for friendly recommendations about {a} {b}",
    "curious what {a} {b} means in everyday conversation",
    "can you explain {a} and {b} in simple terms",
)
_UNSAFE_PHRASES = ("how to attack", "ways to abuse", "help me exploit")
_SAFE_PHRASES = ("friendly question about", "simple explanation of", "fun facts about")
_HEDGES = ("maybe", "sort of", "allegedly", "hypothetically", "not sure if")


def _salient_tokens(entry: KbEntry) -> list[str]:
    toks = tokenize(entry.text)
    if not toks:
        return ["thing", "thing"]
    ranked = sorted(set(toks), key=lambda t: (-len(t), t))
    while len(ranked) < 2:
        ranked.append(ranked[0])
    return ranked


class RuleBasedAttacker:
    """Template attacker covering the three adversarial context shapes."""

    def variant(self, entry: KbEntry, strategy: str, rng: np.random.Generator) -> AdversarialEntry:
        toks = tokenize(entry.text)
        salient = _salient_tokens(entry)
        target = opposite(entry.label)
        if strategy == "label_contradiction":
            pool = _UNSAFE_TEMPLATES if target == "unsafe" else _SAFE_TEMPLATES
            template = pool[int(rng.integers(len(pool)))]
            text = template.format(a=salient[0], b=salient[1])
            return AdversarialEntry(entry.entry_id, text, target, strategy)
        if strategy == "ambiguity_injection":
            hedge = _HEDGES[int(rng.integers(len(_HEDGES)))]
            out = list(toks) if toks else ["something"]
            pos = int(rng.integers(len(out) + 1))
            out[pos:pos] = hedge.split()
            return AdversarialEntry(entry.entry_id, " ".join(out), entry.label, strategy)
        if strategy == "lexical_overlap":
            # keep enough source tokens that overlap stays >= 50%
            keep = max(1, math.ceil(len(toks) * 0.7)) if toks else 0
            kept = list(toks[:keep])
            pool = _UNSAFE_PHRASES if target == "unsafe" else _SAFE_PHRASES
            phrase = pool[int(rng.integers(len(pool)))]
            return AdversarialEntry(entry.entry_id, phrase + " " + " ".join(kept), target, strategy)
        raise PerturbError(f"unknown strategy {strategy!r}")

    def variants(self, entry: KbEntry, n: int, rng: np.random.Generator) -> list[AdversarialEntry]:
        out = []
        for _ in range(n):
            strategy = STRATEGIES[int(rng.integers(len(STRATEGIES)))]
            out.append(self.variant(entry, strategy, rng))
        return out


def generate_adversarial_entries(
    entry: KbEntry, attacker: AttackerInterface, n: int, rng: np.random.Generator
) -> list[AdversarialEntry]:
    if n < 1:
        raise PerturbError(f"n must be >= 1, got {n}")
    try:
        made = attacker.variants(entry, n, rng)
    except PerturbError:
        raise
    except Exception as exc:
        raise PerturbError(f"attacker failed on entry {entry.entry_id}: {exc}") from exc
    return made


def attack_reward(guard_dist: np.ndarray, y_star: int, y_hat: int) -> float:
    """1[y_hat != y_star] * (1 - s[y_star]): zero whenever the guard is right."""
    if y_hat == y_star:
        return 0.0
    return float(1.0 - guard_dist[y_star])


# -- encoder / similarity variation -------------------------------------------


def default_encoder_variants(base: EncoderConfig) -> tuple[EncoderConfig, ...]:
    return (
        replace(base, metric="dot"),
        replace(base, metric="lexical"),
        replace(base, ngram_orders=(1,)),
    )


class VariantIndex:
    """Entry embeddings of one snapshot re-encoded under a variant config."""

    def __init__(self, snapshot: KbSnapshot, cfg: EncoderConfig):
        self.snapshot = snapshot
        self.cfg = cfg
        self.embeddings = [embed(e.text, cfg) for e in snapshot.entries]
        n = len(self.embeddings)
        self.matrix = np.zeros((n, cfg.dimension))
        for i, e in enumerate(self.embeddings):
            self.matrix[i] = e.values
        self.row_norms = np.linalg.norm(self.matrix, axis=1) if n else np.zeros(0)

    def scan_scores(self, emb: Embedding) -> np.ndarray:
        n = len(self.embeddings)
        if n == 0:
            return np.zeros(0)
        if self.cfg.metric == "lexical":
            return quantize_scores(
                np.array([similarity(emb, e, "lexical") for e in self.embeddings])
            )
        dots = self.matrix @ emb.values
        if self.cfg.metric == "dot":
            return quantize_scores(dots)
        qnorm = float(np.linalg.norm(emb.values))
        if qnorm == 0.0:
            return np.zeros(n)
        denom = self.row_norms * qnorm
        out = np.zeros(n)
        np.divide(dots, denom, out=out, where=denom > 0)
        return quantize_scores(out)


class VariantRetriever:
    """Caches VariantIndex instances per (snapshot epoch, variant config)."""

    def __init__(self, kb: KnowledgeBase):
        self.kb = kb
        self._cache: dict[tuple[int, str], VariantIndex] = {}

    def index_for(self, cfg: EncoderConfig, snapshot: KbSnapshot | None = None) -> VariantIndex:
        snap = snapshot if snapshot is not None else self.kb.snapshot
        key = (snap.epoch, cfg.config_hash())
        idx = self._cache.get(key)
        if idx is None or idx.snapshot is not snap:
            idx = VariantIndex(snap, cfg)
            self._cache[key] = idx
        return idx

    def retrieve(
        self,
        text: str,
        cfg: EncoderConfig,
        k: int,
        epsilon: float,
        *,
        exclude_ids: Sequence[int] = (),
        include_adversarial: bool = False,
        snapshot: KbSnapshot | None = None,
    ) -> ContextSet:
        snap = snapshot if snapshot is not None else self.kb.snapshot
        if len(snap) == 0 or k == 0:
            return ContextSet((), k)
        idx = self.index_for(cfg, snap)
        scores = idx.scan_scores(embed(text, cfg))
        eligible = snap.eligible_rows(scores, 1.0 - epsilon, None, exclude_ids, include_adversarial)
        return ContextSet(tuple(select_topk(scores, snap.ids, eligible, k)), k)


def perturb_retrieval(
    text: str,
    kb: KnowledgeBase,
    variant_cfgs: Sequence[EncoderConfig],
    k: int,
    epsilon: float,
    rng: np.random.Generator,
    *,
    exclude_ids: Sequence[int] = (),
    retriever: VariantRetriever | None = None,
) -> tuple[ContextSet, EncoderConfig]:
    """Retrieve under one uniformly drawn variant encoder/similarity."""
    if not variant_cfgs:
        raise PerturbError("variant_cfgs must be nonempty")
    cfg = variant_cfgs[int(rng.integers(len(variant_cfgs)))]
    retr = retriever if retriever is not None else VariantRetriever(kb)
    return retr.retrieve(text, cfg, k, epsilon, exclude_ids=exclude_ids), cfg


# -- sampling perturbation -----------------------------------------------------


def _char_edit(token: str, rng: np.random.Generator) -> str:
    ops = ["duplicate"]
    if len(token) >= 2:
        ops.append("swap")
    if len(token) >= 1:
        ops.append("delete")
    op = ops[int(rng.integers(len(ops)))]
    i = int(rng.integers(len(token)))
    if op == "swap":
        i = min(i, len(token) - 2)
        return token[:i] + token[i + 1] + token[i] + token[i + 2 :]
    if op == "delete":
        return token[:i] + token[i + 1 :]
    return token[:i] + token[i] + token[i:]


def perturb_tokens(
    tokens: list[str], char_edit_rate: float, word_swap_rate: float, rng: np.random.Generator
) -> tuple[list[str], int]:
    """Apply seeded character and word-order noise; returns (tokens, edits).

    At most ceil((char_edit_rate + word_swap_rate) * len(tokens)) + 1 tokens
    are touched: a char edit counts one token, a pair swap counts two, and
    edits stop once the budget is exhausted.
    """
    if not tokens:
        return [], 0
    budget = math.ceil((char_edit_rate + word_swap_rate) * len(tokens)) + 1
    edited = 0
    out = list(tokens)
    if char_edit_rate > 0:
        for i in range(len(out)):
            if edited >= budget:
                break
            if rng.random() < char_edit_rate:
                out[i] = _char_edit(out[i], rng)
                edited += 1
    if word_swap_rate > 0:
        for i in range(len(out) - 1):
            if edited + 2 > budget:
                break
            if rng.random() < word_swap_rate:
                out[i], out[i + 1] = out[i + 1], out[i]
                edited += 2
    return [t for t in out if t], edited


def perturb_text(text: str, cfg: PerturbationConfig, rng: np.random.Generator) -> str:
    """Character/word-order noise over whitespace tokens; empty text unchanged."""
    tokens = text.split()
    if not tokens:
        return text
    out, _ = perturb_tokens(tokens, cfg.char_edit_rate, cfg.word_swap_rate, rng)
    return " ".join(out)


# -- composed perturbed context sets --------------------------------------------


@dataclass(frozen=True)
class PerturbedContext:
    step: str
    context: ContextSet
    provenance: dict = field(default_factory=dict)


def _resort(items: list[tuple[int, float]]) -> tuple[tuple[int, float], ...]:
    return tuple(sorted(items, key=lambda t: (-t[1], t[0])))


def build_perturbed_contexts(
    text: str,
    kb: KnowledgeBase,
    cfg: PerturbationConfig,
    rng: np.random.Generator,
    *,
    k: int,
    base_cfg: EncoderConfig,
    clean_ctx: ContextSet,
    exclude_ids: Sequence[int] = (),
    attacker: AttackerInterface | None = None,
    retriever: VariantRetriever | None = None,
) -> list[PerturbedContext]:
    """Union of perturbed context sets from every enabled step.

    Adversarial and text-perturbed variants become new KB rows with source
    "adversarial" (invisible to clean retrieval) so the returned ContextSets
    reference resolvable entry ids; callers publish a snapshot afterwards if
    the new rows should be retrievable.
    """
    out: list[PerturbedContext] = []
    attacker = attacker if attacker is not None else RuleBasedAttacker()
    query_emb = embed(text, base_cfg)

    if "adversarial" in cfg.steps and len(clean_ctx) > 0:
        for v in range(cfg.variants_per_context):
            items: list[tuple[int, float]] = []
            strategies: list[str] = []
            for entry_id, _ in clean_ctx.items:
                entry = kb.get(entry_id)
                adv = generate_adversarial_entries(entry, attacker, 1, rng)[0]
                adv_id = kb.insert(
                    adv.text,
                    adv.intended_label,
                    source="adversarial",
                    timestamp_ms=entry.timestamp_ms,
                )
                score = float(np.round(similarity(query_emb, embed(adv.text, base_cfg), base_cfg.metric), 12))
                items.append((adv_id, score))
                strategies.append(adv.strategy)
            # planted adversarial rows already published near this query join in
            published = kb.retrieve_topk(
                text, k, cfg.epsilon, exclude_ids=exclude_ids,
                include_adversarial=True, embedding=query_emb,
            )
            for entry_id, score in published.items:
                if kb.get(entry_id).source == "adversarial":
                    items.append((entry_id, score))
            merged = _resort(items)[:k]
            out.append(
                PerturbedContext(
                    "adversarial",
                    ContextSet(merged, k),
                    {"strategies": strategies, "variant": v},
                )
            )

    if "encoder_variation" in cfg.steps:
        variants = cfg.encoder_variants or default_encoder_variants(base_cfg)
        ctx, chosen = perturb_retrieval(
            text, kb, variants, k, cfg.epsilon, rng,
            exclude_ids=exclude_ids, retriever=retriever,
        )
        if len(ctx) > 0:
            out.append(
                PerturbedContext(
                    "encoder_variation", ctx,
                    {"metric": chosen.metric, "ngram_orders": list(chosen.ngram_orders)},
                )
            )

    if "threshold_relaxing" in cfg.steps:
        band = kb.retrieve_relaxed(
            text, cfg.delta, cfg.epsilon, exclude_ids=exclude_ids, embedding=query_emb
        )
        if len(band) > 0:
            take = min(k, len(band))
            rows = rng.choice(len(band), size=take, replace=False)
            items = _resort([band.items[i] for i in sorted(rows)])
            out.append(
                PerturbedContext(
                    "threshold_relaxing",
                    ContextSet(items, k),
                    {"band": [cfg.delta, 1.0 - cfg.epsilon], "population": len(band)},
                )
            )

    if "sampling" in cfg.steps and len(clean_ctx) > 0:
        items = []
        for entry_id, _ in clean_ctx.items:
            entry = kb.get(entry_id)
            noisy = perturb_text(entry.text, cfg, rng)
            if not noisy.strip():
                continue
            noisy_id = kb.insert(
                noisy, entry.label, source="adversarial", timestamp_ms=entry.timestamp_ms
            )
            score = float(np.round(similarity(query_emb, embed(noisy, base_cfg), base_cfg.metric), 12))
            items.append((noisy_id, score))
        if items:
            out.append(
                PerturbedContext("sampling", ContextSet(_resort(items), k), {})
            )

    return out
