"""Synthetic corpora with planted retrieval structure.

Three constructions back the relative, oracle-style experiments:

* a clustered corpus whose knowledge base hides label-flipped near-duplicate
  "trap" rows (source "adversarial") next to a configurable fraction of
  queries -- clean retrieval never sees them, perturbed retrieval does;
* a corpus with an exactly planted fraction of label-mismatched nearest
  neighbors, for the context-label distribution diagnostic;
* a corpus with an exactly planted near-duplicate coverage fraction.

All text is built from generated pseudo-words so similarity structure is
fully controlled; the label is decided by which marker-word family appears.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig
from .kb import KnowledgeBase
from .training import DatasetRow

_SYLLABLES = (
    "ba be bi bo bu da de di do du fa fe fi fo fu ga ge gi go gu "
    "ka ke ki ko ku la le li lo lu ma me mi mo mu na ne ni no nu "
    "pa pe pi po pu ra re ri ro ru sa se si so su ta te ti to tu "
    "va ve vi vo vu za ze zi zo zu"
).split()


def pseudo_words(rng: np.random.Generator, count: int, min_syl: int = 2, max_syl: int = 3) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        n = int(rng.integers(min_syl, max_syl + 1))
        w = "".join(_SYLLABLES[int(rng.integers(len(_SYLLABLES)))] for _ in range(n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass
class TrapCorpus:
    train: list[DatasetRow]
    test: list[DatasetRow]
    kb: KnowledgeBase
    train_ids: list[int]
    trap_fraction: float
    safe_markers: list[str]
    unsafe_markers: list[str]


def build_trap_corpus(
    n_train: int,
    n_test: int,
    trap_fraction: float,
    seed: int,
    cfg: EncoderConfig,
    *,
    n_clusters: int = 40,
    fillers_per_cluster: int = 12,
) -> TrapCorpus:
    """Clustered queries whose label is carried by two tail marker words.

    Each cluster shares an ordered filler template, so same-cluster texts
    retrieve each other with high similarity. A trap is a copy of its query
    with only the two markers swapped to the opposite family: it carries the
    flipped label, sits strictly closer to the query than any cluster mate,
    and enters the KB with source "adversarial" so only perturbed retrieval
    surfaces it.
    """
    rng = np.random.default_rng(seed)
    filler_vocab = pseudo_words(rng, 60 + 2 * n_clusters)
    safe_markers = pseudo_words(rng, 8)
    unsafe_markers = pseudo_words(rng, 8)
    markers = {"safe": safe_markers, "unsafe": unsafe_markers}

    clusters = []
    for c in range(n_clusters):
        base = [filler_vocab[int(rng.integers(len(filler_vocab)))] for _ in range(fillers_per_cluster)]
        clusters.append({"label": "safe" if c % 2 == 0 else "unsafe", "base": base})

    total = n_train + n_test
    rows: list[DatasetRow] = []
    for i in range(total):
        cluster = clusters[i % n_clusters]
        tokens = list(cluster["base"])
        # one replaced filler keeps members distinct but close
        tokens[int(rng.integers(len(tokens)))] = filler_vocab[int(rng.integers(len(filler_vocab)))]
        fam = markers[cluster["label"]]
        tokens.append(fam[int(rng.integers(len(fam)))])
        tokens.append(fam[int(rng.integers(len(fam)))])
        rows.append(DatasetRow(" ".join(tokens), cluster["label"]))

    order = rng.permutation(total)
    train_rows = [rows[i] for i in order[:n_train]]
    test_rows = [rows[i] for i in order[n_train:]]

    kb = KnowledgeBase(cfg)
    train_ids = [kb.insert(r.text, r.label, timestamp_ms=0) for r in train_rows]

    def plant_trap(row: DatasetRow) -> None:
        tokens = row.text.split()
        flipped = "unsafe" if row.label == "safe" else "safe"
        fam = markers[flipped]
        tokens[-2] = fam[int(rng.integers(len(fam)))]
        tokens[-1] = fam[int(rng.integers(len(fam)))]
        kb.insert(" ".join(tokens), flipped, source="adversarial", timestamp_ms=0)

    for row in train_rows + test_rows:
        if rng.random() < trap_fraction:
            plant_trap(row)
    kb.publish_snapshot()
    return TrapCorpus(
        train_rows, test_rows, kb, train_ids, trap_fraction, safe_markers, unsafe_markers
    )


@dataclass
class PlantedDiagnostics:
    queries: list[DatasetRow]
    kb: KnowledgeBase
    planted_fraction: float


def build_mismatch_corpus(
    n: int, mismatch_fraction: float, seed: int, cfg: EncoderConfig
) -> PlantedDiagnostics:
    """Every query has a same-label support neighbor; an exact fraction also
    has a label-flipped exact duplicate that wins the top-1 slot."""
    rng = np.random.default_rng(seed)
    vocab = pseudo_words(rng, n * 7 + 16)
    kb = KnowledgeBase(cfg)
    queries: list[DatasetRow] = []
    n_planted = round(n * mismatch_fraction)
    planted = set(rng.choice(n, size=n_planted, replace=False).tolist())
    for i in range(n):
        tokens = vocab[i * 6 : i * 6 + 6]
        label = "safe" if rng.random() < 0.5 else "unsafe"
        text = " ".join(tokens)
        queries.append(DatasetRow(text, label))
        support = " ".join(tokens + [vocab[n * 6 + int(rng.integers(16))]])
        kb.insert(support, label, timestamp_ms=0)
        if i in planted:
            flipped = "unsafe" if label == "safe" else "safe"
            kb.insert(text, flipped, timestamp_ms=0)
    kb.publish_snapshot()
    return PlantedDiagnostics(queries, kb, n_planted / n if n else 0.0)


def build_coverage_corpus(
    n: int, coverage_fraction: float, seed: int, cfg: EncoderConfig
) -> PlantedDiagnostics:
    """An exact fraction of queries has an exact duplicate in the KB; the
    rest share no tokens with any KB row."""
    rng = np.random.default_rng(seed)
    vocab = pseudo_words(rng, n * 7)
    kb = KnowledgeBase(cfg)
    queries: list[DatasetRow] = []
    n_covered = round(n * coverage_fraction)
    covered = set(rng.choice(n, size=n_covered, replace=False).tolist())
    for i in range(n):
        tokens = vocab[i * 6 : i * 6 + 6]
        label = "safe" if rng.random() < 0.5 else "unsafe"
        text = " ".join(tokens)
        queries.append(DatasetRow(text, label))
        if i in covered:
            kb.insert(text, label, timestamp_ms=0)
    kb.publish_snapshot()
    return PlantedDiagnostics(queries, kb, n_covered / n if n else 0.0)
