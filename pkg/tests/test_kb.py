from __future__ import annotations

import numpy as np
import pytest

from ctxguard.encoder import EncoderConfig, embed, similarity
from ctxguard.kb import KbError, KbLoadError, KnowledgeBase

CFG = EncoderConfig()

WORDS = (
    "river stone cloud meadow lantern copper violet harbor thimble ember "
    "saddle willow ridge falcon orchid tunnel marble cedar prism anchor"
).split()


def random_text(rng: np.random.Generator, lo: int = 3, hi: int = 9) -> str:
    n = int(rng.integers(lo, hi))
    return " ".join(rng.choice(WORDS, size=n, replace=True))


def seeded_kb(rng: np.random.Generator, n: int, cfg: EncoderConfig = CFG) -> KnowledgeBase:
    kb = KnowledgeBase(cfg)
    for _ in range(n):
        label = "unsafe" if rng.random() < 0.5 else "safe"
        kb.insert(random_text(rng), label, timestamp_ms=0)
    kb.publish_snapshot()
    return kb


def brute_force_topk(kb: KnowledgeBase, text: str, k: int, epsilon: float) -> list[tuple[int, float]]:
    """Independent oracle: per-entry scoring + threshold + total-order sort.

    Applies the contract's score quantization, then sorts by (score desc,
    id asc) -- everything else is computed entry by entry, independently of
    the vectorized production scan.
    """
    q = embed(text, kb.cfg)
    scored = []
    for e in kb.snapshot.entries:
        if e.source == "adversarial":
            continue
        s = float(np.round(similarity(q, e.embedding, kb.cfg.metric), 12))
        if s >= 1.0 - epsilon:
            scored.append((e.entry_id, s))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def brute_force_band(kb: KnowledgeBase, text: str, delta: float, epsilon: float) -> list[tuple[int, float]]:
    q = embed(text, kb.cfg)
    scored = []
    for e in kb.snapshot.entries:
        if e.source == "adversarial":
            continue
        s = float(np.round(similarity(q, e.embedding, kb.cfg.metric), 12))
        if delta <= s <= 1.0 - epsilon:
            scored.append((e.entry_id, s))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


# -- insert / lookup ----------------------------------------------------------


def test_insert_and_lookup():
    kb = KnowledgeBase(CFG)
    eid = kb.insert("free offer", "safe")
    e = kb.get(eid)
    assert e.text == "free offer"
    assert e.label == "safe"
    assert e.source == "seed"


def test_insert_distinct_ids():
    kb = KnowledgeBase(CFG)
    assert kb.insert("one", "safe") != kb.insert("two", "unsafe")


def test_insert_rejects_empty_text():
    kb = KnowledgeBase(CFG)
    with pytest.raises(KbError):
        kb.insert("", "safe")
    with pytest.raises(KbError):
        kb.insert("   ", "safe")


def test_insert_rejects_bad_label():
    kb = KnowledgeBase(CFG)
    with pytest.raises(KbError):
        kb.insert("text", "harmful")


# -- snapshots ----------------------------------------------------------------


def test_publish_epoch_monotonic():
    kb = KnowledgeBase(CFG)
    e1 = kb.publish_snapshot()
    e2 = kb.publish_snapshot()
    assert e2 == e1 + 1


def test_snapshot_immutability():
    kb = KnowledgeBase(CFG)
    kb.insert("first entry", "safe")
    kb.publish_snapshot()
    old = kb.snapshot
    kb.insert("second entry", "unsafe")
    kb.publish_snapshot()
    assert len(old) == 1
    assert len(kb.snapshot) == 2


def test_insert_visible_after_publish():
    kb = KnowledgeBase(CFG)
    eid = kb.insert("unique probe text", "unsafe")
    assert len(kb.retrieve_topk("unique probe text", 3, 0.5)) == 0
    kb.publish_snapshot()
    ctx = kb.retrieve_topk("unique probe text", 3, 0.5)
    assert ctx.entry_ids == (eid,)


# -- retrieval ----------------------------------------------------------------


def test_retrieve_empty_kb():
    kb = KnowledgeBase(CFG)
    kb.publish_snapshot()
    assert kb.retrieve_topk("anything", 5, 0.4).items == ()


def test_retrieve_exact_match_ranks_first():
    rng = np.random.default_rng(0)
    kb = seeded_kb(rng, 30)
    eid = kb.insert("a very particular probe sentence", "unsafe", timestamp_ms=0)
    kb.publish_snapshot()
    ctx = kb.retrieve_topk("a very particular probe sentence", 3, 0.1)
    assert ctx.items[0][0] == eid
    assert ctx.items[0][1] == pytest.approx(1.0)


def test_retrieve_topk_matches_brute_force():
    rng = np.random.default_rng(7)
    kb = seeded_kb(rng, 10)
    probe = random_text(rng)
    got = kb.retrieve_topk(probe, 3, 0.5)
    want = brute_force_topk(kb, probe, 3, 0.5)
    assert list(got.items) == pytest.approx(want)


def test_retrieve_topk_oracle_sweep():
    rng = np.random.default_rng(21)
    for trial in range(10):
        kb = seeded_kb(rng, int(rng.integers(5, 120)))
        for _ in range(10):
            probe = random_text(rng)
            k = int(rng.integers(0, 8))
            eps = float(rng.random())
            got = kb.retrieve_topk(probe, k, eps)
            want = brute_force_topk(kb, probe, k, eps)
            assert got.entry_ids == tuple(e for e, _ in want)
            np.testing.assert_allclose(got.scores, [s for _, s in want], atol=1e-9)


def test_retrieve_relaxed_matches_brute_force():
    rng = np.random.default_rng(3)
    kb = seeded_kb(rng, 60)
    probe = random_text(rng)
    got = kb.retrieve_relaxed(probe, 0.2, 0.3)
    want = brute_force_band(kb, probe, 0.2, 0.3)
    assert got.entry_ids == tuple(e for e, _ in want)
    np.testing.assert_allclose(got.scores, [s for _, s in want], atol=1e-9)


def test_retrieve_relaxed_rejects_delta_ge_epsilon():
    kb = KnowledgeBase(CFG)
    with pytest.raises(KbError):
        kb.retrieve_relaxed("x", 0.5, 0.5)
    with pytest.raises(KbError):
        kb.retrieve_relaxed("x", 0.6, 0.4)


def test_relaxed_union_covers_threshold():
    # relaxed band plus the strict acceptance region tile {sim >= delta}
    rng = np.random.default_rng(11)
    kb = seeded_kb(rng, 80)
    probe = random_text(rng)
    delta, eps = 0.1, 0.3
    band = set(kb.retrieve_relaxed(probe, delta, eps).entry_ids)
    strict = {e for e, s in brute_force_topk(kb, probe, 10**6, eps)}
    everything = {e for e, s in brute_force_topk(kb, probe, 10**6, 1.0 - delta)}
    assert band | strict == everything
    assert band.isdisjoint(strict)


def test_epsilon_monotonicity():
    rng = np.random.default_rng(5)
    kb = seeded_kb(rng, 50)
    probe = random_text(rng)
    small = set(kb.retrieve_topk(probe, 10**6, 0.2).entry_ids)
    large = set(kb.retrieve_topk(probe, 10**6, 0.7).entry_ids)
    assert small <= large


def test_tie_break_ascending_id():
    kb = KnowledgeBase(CFG)
    a = kb.insert("identical twin text", "safe", timestamp_ms=0)
    b = kb.insert("identical twin text", "unsafe", timestamp_ms=0)
    kb.publish_snapshot()
    ctx = kb.retrieve_topk("identical twin text", 2, 0.5)
    assert ctx.entry_ids == (a, b)


def test_exclude_ids():
    kb = KnowledgeBase(CFG)
    a = kb.insert("the same words", "safe", timestamp_ms=0)
    b = kb.insert("the same words", "unsafe", timestamp_ms=0)
    kb.publish_snapshot()
    ctx = kb.retrieve_topk("the same words", 2, 0.5, exclude_ids=(a,))
    assert ctx.entry_ids == (b,)


def test_adversarial_entries_hidden_by_default():
    kb = KnowledgeBase(CFG)
    kb.insert("plain entry text", "safe", timestamp_ms=0)
    adv = kb.insert("plain entry text", "unsafe", source="adversarial", timestamp_ms=0)
    kb.publish_snapshot()
    assert adv not in kb.retrieve_topk("plain entry text", 5, 0.5).entry_ids
    assert adv in kb.retrieve_topk("plain entry text", 5, 0.5, include_adversarial=True).entry_ids


def test_retrieval_deterministic():
    rng = np.random.default_rng(13)
    kb = seeded_kb(rng, 40)
    probe = random_text(rng)
    assert kb.retrieve_topk(probe, 5, 0.6).items == kb.retrieve_topk(probe, 5, 0.6).items


# -- persistence ----------------------------------------------------------------


def test_persist_load_roundtrip(tmp_path):
    rng = np.random.default_rng(17)
    kb = seeded_kb(rng, 100)
    path = tmp_path / "kb.jsonl"
    kb.persist(str(path))
    loaded = KnowledgeBase.load(str(path), CFG)
    assert len(loaded) == len(kb)
    for _ in range(25):
        probe = random_text(rng)
        assert kb.retrieve_topk(probe, 5, 0.5).items == loaded.retrieve_topk(probe, 5, 0.5).items


def test_load_truncated_file_names_record(tmp_path):
    rng = np.random.default_rng(19)
    kb = seeded_kb(rng, 10)
    path = tmp_path / "kb.jsonl"
    kb.persist(str(path))
    lines = path.read_text().splitlines()
    (tmp_path / "trunc.jsonl").write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(KbLoadError) as err:
        KnowledgeBase.load(str(tmp_path / "trunc.jsonl"), CFG)
    assert err.value.record_index == 7


def test_load_corrupt_record_names_record(tmp_path):
    rng = np.random.default_rng(23)
    kb = seeded_kb(rng, 5)
    path = tmp_path / "kb.jsonl"
    kb.persist(str(path))
    lines = path.read_text().splitlines()
    lines[3] = "{this is not json"
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(KbLoadError) as err:
        KnowledgeBase.load(str(tmp_path / "bad.jsonl"), CFG)
    assert err.value.record_index == 2


def test_load_mismatched_encoder_config(tmp_path):
    kb = KnowledgeBase(CFG)
    kb.insert("entry", "safe", timestamp_ms=0)
    path = tmp_path / "kb.jsonl"
    kb.persist(str(path))
    other = EncoderConfig(hash_seed=CFG.hash_seed + 1)
    with pytest.raises(KbLoadError):
        KnowledgeBase.load(str(path), other)


# -- concurrency ----------------------------------------------------------------


def test_concurrent_readers_never_blocked_by_writer():
    import threading
    import time as _time

    kb = KnowledgeBase(CFG)
    for i in range(50):
        kb.insert(f"seed entry number {i} river stone", "safe", timestamp_ms=0)
    kb.publish_snapshot()

    stop = threading.Event()
    writer_errors: list[Exception] = []

    def writer():
        i = 0
        try:
            while not stop.is_set():
                kb.insert(f"writer entry {i} cloud meadow", "unsafe", timestamp_ms=0)
                kb.publish_snapshot()
                i += 1
        except Exception as exc:  # pragma: no cover - failure reporting only
            writer_errors.append(exc)

    t = threading.Thread(target=writer, daemon=True)
    t.start()
    epochs = []
    worst_ms = 0.0
    try:
        for _ in range(300):
            t0 = _time.perf_counter()
            snap = kb.snapshot
            ctx = kb.retrieve_topk("river stone", 5, 0.9, snapshot=snap)
            worst_ms = max(worst_ms, (_time.perf_counter() - t0) * 1000)
            epochs.append(snap.epoch)
            for eid, _ in ctx.items:
                snap.get(eid)  # every id resolves within its own snapshot
    finally:
        stop.set()
        t.join(timeout=10)
    assert not writer_errors
    assert epochs == sorted(epochs)  # epochs only move forward
    assert worst_ms < 250.0  # readers never wait on the writer
