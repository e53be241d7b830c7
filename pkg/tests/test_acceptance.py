"""Acceptance suite: one test per criterion, one PASS line per criterion.

Run with `pytest tests/test_acceptance.py -v -s`. The heavy experiments
(robustness ratio, distillation retention, the 100k-entry 300 QPS bench)
sit at the end; everything here is relative or oracle-based, with every
tolerance pinned in the assertions.
"""

from __future__ import annotations

import itertools
import json
import os
import socket
import subprocess
import sys
import time

import numpy as np
import pytest
from click.testing import CliRunner
from starlette.testclient import TestClient

from ctxguard.cli import main as cli_main
from ctxguard.config import load_config
from ctxguard.corpus import (
    build_coverage_corpus,
    build_mismatch_corpus,
    build_trap_corpus,
    pseudo_words,
)
from ctxguard.encoder import EncoderConfig, embed, similarity
from ctxguard.feedback import FeedbackRecord, LabelEvent, confidence
from ctxguard.kb import KnowledgeBase
from ctxguard.loadgen import run_loadgen, write_report, write_samples
from ctxguard.model import (
    STUDENT_CAPACITY,
    TEACHER_CAPACITY,
    feature_dim,
    init_params,
    loss_and_grads,
)
from ctxguard.perturb import PerturbationConfig, attack_reward
from ctxguard.service import ServiceState, create_app
from ctxguard.training import (
    Schedule,
    evaluate,
    materialize_training_set,
    analyze_context_distribution,
    context_coverage_ratio,
    supervised_contextual_finetune,
    train_contextual,
    train_distilled,
)

BASE = EncoderConfig()
K, EPS = 5, 0.4
SEEDS = (1, 2, 3, 4, 5)


def announce(num: int, name: str) -> None:
    print(f"\nACCEPTANCE {num:02d} [{name}]: PASS")


# -- shared heavy fixtures ------------------------------------------------------------

_corpus_cache: dict[int, tuple] = {}


def corpus_for(seed: int):
    """Trap corpus (2k train / 500 test, 70% planted) plus materialized examples."""
    if seed not in _corpus_cache:
        c = build_trap_corpus(2000, 500, 0.7, seed=seed, cfg=BASE, n_clusters=60)
        pcfg = PerturbationConfig(rng_seed=seed * 17 + 1)
        examples = materialize_training_set(c.train, c.kb, c.train_ids, pcfg, BASE, k=K)
        _corpus_cache[seed] = (c, examples)
    return _corpus_cache[seed]


# -- criterion 1: retrieval oracle equivalence -------------------------------------------


def brute_topk(kb: KnowledgeBase, probe: str, k: int, epsilon: float):
    q = embed(probe, kb.cfg)
    scored = []
    for e in kb.snapshot.entries:
        if e.source == "adversarial":
            continue
        s = float(np.round(similarity(q, e.embedding, kb.cfg.metric), 12))
        if s >= 1.0 - epsilon:
            scored.append((e.entry_id, s))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def brute_band(kb: KnowledgeBase, probe: str, delta: float, epsilon: float):
    q = embed(probe, kb.cfg)
    scored = []
    for e in kb.snapshot.entries:
        if e.source == "adversarial":
            continue
        s = float(np.round(similarity(q, e.embedding, kb.cfg.metric), 12))
        if delta <= s <= 1.0 - epsilon:
            scored.append((e.entry_id, s))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


def test_criterion_01_retrieval_oracle_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(2024)
    vocab = pseudo_words(rng, 600)

    def text(lo=3, hi=10):
        n = int(rng.integers(lo, hi))
        return " ".join(vocab[int(rng.integers(len(vocab)))] for _ in range(n))

    sizes = [int(rng.integers(40, 300)) for _ in range(45)] + [800, 1200, 1500, 2000, 10_000]
    metrics = ["cosine"] * 30 + ["dot"] * 10 + ["lexical"] * 10
    rng.shuffle(metrics)
    checked = 0
    for kb_index, (size, metric) in enumerate(zip(sizes, metrics)):
        cfg = EncoderConfig(metric=metric)
        kb = KnowledgeBase(cfg)
        for _ in range(size):
            kb.insert(text(), "unsafe" if rng.random() < 0.5 else "safe", timestamp_ms=0)
        kb.publish_snapshot()
        n_probes = 100 if size < 5000 else 25
        for _ in range(n_probes):
            probe = text()
            k = int(rng.integers(0, 12))
            epsilon = float(rng.random())
            got = kb.retrieve_topk(probe, k, epsilon)
            want = brute_topk(kb, probe, k, epsilon)
            assert got.entry_ids == tuple(e for e, _ in want), f"kb {kb_index} topk set/order"
            np.testing.assert_allclose(got.scores, [s for _, s in want], atol=1e-9)

            delta = float(rng.random() * 0.5)
            repsilon = float(delta + (1.0 - delta) * max(rng.random(), 1e-6))
            got_band = kb.retrieve_relaxed(probe, delta, repsilon)
            want_band = brute_band(kb, probe, delta, repsilon)
            assert got_band.entry_ids == tuple(e for e, _ in want_band), f"kb {kb_index} band"
            np.testing.assert_allclose(
                got_band.scores, [s for _, s in want_band], atol=1e-9
            )
            checked += 2
    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"oracle sweep took {elapsed:.1f}s"
    assert checked >= 2 * (45 * 100 + 5 * 25)
    announce(1, "retrieval oracle equivalence")


# -- criterion 2: gradient correctness ---------------------------------------------------


def test_criterion_02_gradient_finite_differences():
    started = time.monotonic()
    h, rel_tol, probes = 1e-5, 1e-4, 50
    dim = feature_dim(BASE.dimension, K)
    rng = np.random.default_rng(77)
    x = rng.standard_normal((16, dim)) * 0.5
    y = rng.integers(0, 2, size=16)
    teacher_probs = rng.dirichlet([2.0, 2.0], size=16)
    losses = {
        "ce": dict(ce_weight=1.0, kl_weight=0.0),
        "kl": dict(ce_weight=0.0, kl_weight=1.0),
        "mixed": dict(ce_weight=0.4, kl_weight=0.6),
    }
    for capacity in (TEACHER_CAPACITY, STUDENT_CAPACITY):
        for loss_name, kw in losses.items():
            params = init_params(capacity, dim, 5)

            def loss_fn(p):
                return loss_and_grads(p, x, y, teacher_probs=teacher_probs, **kw)

            _, grads = loss_fn(params)
            arrays = list(zip(params.weights, grads.weights)) + list(
                zip(params.biases, grads.biases)
            )
            for _ in range(probes):
                ai = int(rng.integers(len(arrays)))
                p_arr, g_arr = arrays[ai]
                flat = int(rng.integers(p_arr.size))
                idx = np.unravel_index(flat, p_arr.shape)
                orig = p_arr[idx]
                p_arr[idx] = orig + h
                up, _ = loss_fn(params)
                p_arr[idx] = orig - h
                down, _ = loss_fn(params)
                p_arr[idx] = orig
                numeric = (up - down) / (2 * h)
                analytic = float(g_arr[idx])
                scale = max(abs(analytic), abs(numeric), 1e-8)
                assert abs(analytic - numeric) / scale < rel_tol, (
                    f"{capacity.role}/{loss_name} coord {idx}: "
                    f"analytic {analytic} vs numeric {numeric}"
                )
    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    announce(2, "gradient correctness vs finite differences")


# -- criterion 3: loss arithmetic ---------------------------------------------------------


def test_criterion_03_loss_arithmetic():
    c, examples = corpus_for(1)
    subset = examples[:300]
    dim = feature_dim(BASE.dimension, K)
    p0 = init_params(TEACHER_CAPACITY, dim, 11)
    a, rep_a = train_contextual(
        p0.copy(), subset, c.kb, BASE, k=K, epochs=4, lr=0.3, seed=21, lam=0.0
    )
    b, rep_b = supervised_contextual_finetune(
        p0.copy(), subset, c.kb, BASE, k=K, epochs=4, lr=0.3, seed=21
    )
    assert a.params_hash() == b.params_hash(), "lambda=0 must be bit-identical to supervised"
    assert rep_a.to_json() == rep_b.to_json()

    lam = 0.5
    _, report = train_contextual(
        p0.copy(), subset, c.kb, BASE, k=K, epochs=4, lr=0.3, seed=21, lam=lam
    )
    for row in report.rows:
        assert abs(row.l_total - (row.l_train + lam * row.l_adv)) < 1e-9
    announce(3, "loss arithmetic (lambda degeneracy + recomposition)")


# -- criterion 4: scheduler mode semantics ---------------------------------------------------


def test_criterion_04_scheduler_mode_semantics():
    c, examples = corpus_for(1)
    subset = examples[:300]
    dim = feature_dim(BASE.dimension, K)

    def fresh():
        return (
            init_params(TEACHER_CAPACITY, dim, 31),
            init_params(STUDENT_CAPACITY, dim, 32),
        )

    teacher, student = fresh()
    s_hash = student.params_hash()
    _, student_out, _ = train_distilled(
        teacher, student, subset, c.kb, BASE, Schedule((0, 0, 0, 0)), k=K, lr=0.3, seed=41
    )
    assert student_out.params_hash() == s_hash, "all-0 schedule must not touch the student"

    teacher, student = fresh()
    t_hash = teacher.params_hash()
    teacher_out, _, _ = train_distilled(
        teacher, student, subset, c.kb, BASE, Schedule((1, 1, 1, 1)), k=K, lr=0.3, seed=41
    )
    assert teacher_out.params_hash() == t_hash, "all-1 schedule must not touch the teacher"

    teacher, student = fresh()
    schedule = Schedule.canonical(9)
    t_hashes = [teacher.params_hash()]
    s_hashes = [student.params_hash()]
    _, _, report = train_distilled(
        teacher, student, subset, c.kb, BASE, schedule, k=K, lr=0.3, seed=41
    )
    t_hashes += [r.teacher_hash for r in report.rows]
    s_hashes += [r.student_hash for r in report.rows]
    for i, mode in enumerate(schedule.modes):
        assert (t_hashes[i + 1] != t_hashes[i]) == (mode in (0, 2)), f"epoch {i+1} teacher"
        assert (s_hashes[i + 1] != s_hashes[i]) == (mode in (1, 2)), f"epoch {i+1} student"
    announce(4, "scheduler mode semantics with per-epoch hash audit")


# -- criterion 5: adversarial training robustness ----------------------------------------------


def test_criterion_05_adversarial_robustness_ratio():
    started = time.monotonic()
    dim = feature_dim(BASE.dimension, K)
    drops = {"rft": [], "raft": []}
    for seed in SEEDS:
        c, examples = corpus_for(seed)
        for name, lam in (("rft", 0.0), ("raft", 0.5)):
            params = init_params(TEACHER_CAPACITY, dim, seed * 31 + 7)
            params, _ = train_contextual(
                params, examples, c.kb, BASE,
                k=K, epochs=12, lr=0.3, batch_size=32, seed=seed * 13 + 3, lam=lam,
            )
            clean = evaluate(params, c.test, c.kb, BASE, k=K, epsilon=EPS)["weighted_f1"]
            pert = evaluate(
                params, c.test, c.kb, BASE, k=K, epsilon=EPS, include_adversarial=True
            )["weighted_f1"]
            drops[name].append(clean - pert)
    rft_drop = float(np.mean(drops["rft"]))
    raft_drop = float(np.mean(drops["raft"]))
    elapsed = time.monotonic() - started
    print(
        f"  mean F1 drop under perturbed retrieval: lambda=0 {rft_drop:.4f}, "
        f"adversarial {raft_drop:.4f} ({elapsed:.0f}s)"
    )
    assert rft_drop > 0, "plain contextual training should degrade under planted traps"
    assert raft_drop <= 0.5 * rft_drop, (
        f"adversarial training drop {raft_drop:.4f} must be <= half of {rft_drop:.4f}"
    )
    assert elapsed < 600.0
    announce(5, "adversarial robustness: drop ratio <= 0.5 over 5 seeds")


# -- criterion 6: distillation retention ----------------------------------------------------


def test_criterion_06_distillation_retention():
    started = time.monotonic()
    dim = feature_dim(BASE.dimension, K)
    retentions = []
    for seed in SEEDS:
        c, examples = corpus_for(seed)
        teacher = init_params(TEACHER_CAPACITY, dim, seed * 31 + 7)
        student = init_params(STUDENT_CAPACITY, dim, seed * 31 + 8)
        assert student.n_params() <= 0.30 * teacher.n_params()
        teacher, student, _ = train_distilled(
            teacher, student, examples, c.kb, BASE, Schedule.canonical(15),
            k=K, lr=0.3, kl_weight=0.6, ce_weight=0.4, lam=0.5,
            batch_size=32, seed=seed * 13 + 3,
        )
        t_f1 = evaluate(teacher, c.test, c.kb, BASE, k=K, epsilon=EPS)["weighted_f1"]
        s_f1 = evaluate(student, c.test, c.kb, BASE, k=K, epsilon=EPS)["weighted_f1"]
        retentions.append(s_f1 / t_f1)
    mean_retention = float(np.mean(retentions))
    elapsed = time.monotonic() - started
    print(f"  student/teacher weighted F1 retention: {mean_retention:.4f} ({elapsed:.0f}s)")
    assert mean_retention >= 0.95
    assert elapsed < 600.0
    announce(6, "distillation retention >= 0.95 with <= 30% of teacher params")


# -- criterion 7: confidence gate -------------------------------------------------------------


def test_criterion_07_confidence_gate():
    # exhaustive truth table over label multisets of size <= 5, k in 1..5
    for size in range(0, 6):
        for combo in itertools.product(["safe", "unsafe"], repeat=size):
            record = FeedbackRecord(
                "q", [LabelEvent(l, "end_user", i) for i, l in enumerate(combo)]
            )
            for k in range(1, 6):
                expected = bool(combo) and len(set(combo)) == 1 and len(combo) >= k
                assert confidence(record, k) == expected, (combo, k)

    # end-to-end loop over the public API: k consistent labels -> promote ->
    # refresh -> the classify response cites the new entry
    cfg = load_config(None)
    kb = KnowledgeBase(cfg.encoder)
    kb.insert("unrelated background entry", "safe", timestamp_ms=0)
    kb.publish_snapshot()
    params = init_params(STUDENT_CAPACITY, feature_dim(cfg.encoder.dimension, cfg.kb.k), 1)
    client = TestClient(create_app(ServiceState(cfg, kb, params)))
    text = "freshly reported harmful query"
    for _ in range(3):
        r = client.post("/v1/feedback", json={"text": text, "label": "unsafe"})
        assert r.status_code == 200
    assert r.json()["confident"] is True
    entry_id = client.post("/v1/kb/promote", json={"text": text}).json()["entry_id"]
    client.post("/v1/kb/refresh")
    body = client.post("/v1/classify", json={"text": text}).json()
    assert body["context"][0][0] == entry_id
    announce(7, "confidence gate truth table + end-to-end feedback loop")


# -- criterion 8: attack reward ---------------------------------------------------------------


def test_criterion_08_attack_reward():
    rng = np.random.default_rng(88)
    for _ in range(10_000):
        p_unsafe = float(rng.random())
        dist = np.array([1.0 - p_unsafe, p_unsafe])
        y_star = int(rng.integers(0, 2))
        y_hat = int(rng.integers(0, 2))
        got = attack_reward(dist, y_star, y_hat)
        want = (1.0 if y_hat != y_star else 0.0) * (1.0 - dist[y_star])
        assert got == pytest.approx(want, abs=1e-12)
        assert 0.0 <= got <= 1.0
        if y_hat == y_star:
            assert got == 0.0
    # monotone: reward strictly increases as confidence in the truth falls
    rewards = [attack_reward(np.array([s, 1 - s]), 0, 1) for s in np.linspace(0.99, 0.01, 25)]
    assert all(b > a for a, b in zip(rewards, rewards[1:]))
    announce(8, "attack reward formula on 10k random cases")


# -- criterion 9: planted diagnostics -----------------------------------------------------------


def test_criterion_09_planted_diagnostics():
    planted = build_mismatch_corpus(500, 0.40, seed=9, cfg=BASE)
    dist = analyze_context_distribution(planted.queries, planted.kb, 0.5)
    mismatch = dist["safe_query_unsafe_context"] + dist["unsafe_query_safe_context"]
    assert mismatch == pytest.approx(planted.planted_fraction, abs=0.02)
    total = (
        dist["both_safe"] + dist["both_unsafe"]
        + dist["safe_query_unsafe_context"] + dist["unsafe_query_safe_context"]
    )
    assert total == pytest.approx(1.0, abs=1e-9)

    cov_corpus = build_coverage_corpus(400, 0.75, seed=10, cfg=BASE)
    cov = context_coverage_ratio(cov_corpus.queries, cov_corpus.kb, 0.9)
    assert cov == pytest.approx(cov_corpus.planted_fraction, abs=0.02)
    announce(9, "planted mismatch and coverage recovered within 2 points")


# -- criterion 10: latency budget -----------------------------------------------------------------


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_criterion_10_latency_budget(tmp_path):
    rng = np.random.default_rng(1001)
    vocab = pseudo_words(rng, 2000)

    def text():
        n = int(rng.integers(5, 11))
        return " ".join(vocab[int(rng.integers(len(vocab)))] for _ in range(n))

    kb = KnowledgeBase(BASE)
    for _ in range(100_000):
        kb.insert(text(), "unsafe" if rng.random() < 0.5 else "safe", timestamp_ms=0)
    kb.publish_snapshot()
    kb_path = tmp_path / "bench_kb.jsonl"
    kb.persist(str(kb_path))

    from ctxguard.model import save_params

    params = init_params(STUDENT_CAPACITY, feature_dim(BASE.dimension, K), 3)
    params_path = tmp_path / "student.ckpt"
    save_params(params, str(params_path))

    port = _free_port()
    env = dict(os.environ, OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1")
    proc = subprocess.Popen(
        [
            sys.executable, "-m", "ctxguard.cli",
            "--set", f"service.port={port}",
            "--set", "kb.scan_dtype=float32",
            "serve", "--params", str(params_path), "--kb", str(kb_path),
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.STDOUT,
        env=env,
    )
    try:
        import urllib.request

        deadline = time.monotonic() + 120
        while True:
            try:
                urllib.request.urlopen(f"http://127.0.0.1:{port}/v1/metrics", timeout=2)
                break
            except OSError:
                if proc.poll() is not None:
                    raise RuntimeError("service exited during startup")
                if time.monotonic() > deadline:
                    raise RuntimeError("service did not come up in 120s")
                time.sleep(0.5)

        queries = [text() for _ in range(512)]
        result = run_loadgen(
            f"http://127.0.0.1:{port}/v1/classify", 300.0, 60.0, queries
        )
        report = result.report()
        write_samples(result.samples, str(tmp_path / "samples.csv"))
        write_report(report, str(tmp_path / "report.json"))

        with urllib.request.urlopen(
            f"http://127.0.0.1:{port}/v1/metrics", timeout=5
        ) as resp:
            live = json.loads(resp.read())
    finally:
        proc.terminate()
        proc.wait(timeout=15)

    total_p99 = report["latency_ms"]["total"]["p99"]
    ret_p99 = report["latency_ms"]["retrieval"]["p99"]
    inf_p99 = report["latency_ms"]["inference"]["p99"]
    print(
        f"  achieved {report['achieved_qps']:.1f} qps; server p99 ms: "
        f"total {total_p99:.3f} = retrieval {ret_p99:.3f} + inference {inf_p99:.3f} (+overhead)"
    )
    assert not report["saturated"], (
        f"load generator saturated: {report['achieved_qps']:.1f} vs 300 target"
    )
    assert report["failed"] == 0
    assert total_p99 <= 10.0, f"server p99 total {total_p99:.3f} ms exceeds the 10 ms budget"
    # per-stage decomposition is reported by the service itself as well
    for stage in ("retrieval", "inference", "total"):
        assert live["stages"][stage]["quantiles_ms"]["count"] > 0
    announce(10, "latency budget: p99 retrieval+inference <= 10 ms at 300 QPS over 100k entries")


# -- criterion 11: reproducibility ------------------------------------------------------------------


def test_criterion_11_reproducibility(tmp_path):
    runner = CliRunner()
    rows = []
    rng = np.random.default_rng(5)
    vocab = pseudo_words(rng, 50)
    for i in range(30):
        label = "safe" if i % 2 == 0 else "unsafe"
        marker = "sunny" if label == "safe" else "storm"
        toks = [vocab[int(rng.integers(len(vocab)))] for _ in range(5)] + [marker]
        rows.append({"text": " ".join(toks), "label": label})
    dataset = tmp_path / "data.jsonl"
    dataset.write_text("\n".join(json.dumps(r) for r in rows) + "\n")

    small = ("--set", "encoder.dimension=16", "--set", "encoder.hash_buckets=1024",
             "--set", "kb.k=2", "--set", "training.epochs=4")

    def run_train(out):
        res = runner.invoke(
            cli_main, [*small, "train", "--dataset", str(dataset), "--out", str(out)]
        )
        assert res.exit_code == 0, res.output

    run_train(tmp_path / "t1")
    run_train(tmp_path / "t2")
    for name in ("train_report.json", "teacher.ckpt", "kb.jsonl",
                 "perturbations.jsonl", "manifest.json"):
        a = (tmp_path / "t1" / name).read_bytes()
        b = (tmp_path / "t2" / name).read_bytes()
        assert a == b, f"train artifact {name} differs between identical runs"

    def run_eval(out):
        res = runner.invoke(
            cli_main,
            [*small, "eval", "--dataset", str(dataset),
             "--params", str(tmp_path / "t1" / "teacher.ckpt"),
             "--kb", str(tmp_path / "t1" / "kb.jsonl"), "--out", str(out)],
        )
        assert res.exit_code == 0, res.output

    run_eval(tmp_path / "e1")
    run_eval(tmp_path / "e2")
    for name in ("metrics.json", "metrics.csv", "manifest.json"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()

    # bench reports are recomputed from dumped raw samples; the recomputation
    # is byte-stable (live wall-clock measurements inherently are not)
    samples = [
        {"seq": i, "scheduled_ms": i * 3.3, "status": 200, "client_us": 1000.0 + i % 13,
         "t_ret_us": 400.0 + (i % 7), "t_inf_us": 90.0, "t_tot_us": 510.0 + (i % 7),
         "budget_exceeded": 0}
        for i in range(200)
    ]
    sample_path = tmp_path / "samples.csv"
    write_samples(samples, str(sample_path))

    def run_bench(out):
        res = runner.invoke(
            cli_main,
            [*small, "bench", "--from-samples", str(sample_path),
             "--qps", "300", "--duration", "1", "--out", str(out)],
        )
        assert res.exit_code == 0, res.output

    run_bench(tmp_path / "b1")
    run_bench(tmp_path / "b2")
    assert (tmp_path / "b1" / "report.json").read_bytes() == (
        tmp_path / "b2" / "report.json"
    ).read_bytes()
    announce(11, "byte-identical train/eval artifacts and bench recomputation")
