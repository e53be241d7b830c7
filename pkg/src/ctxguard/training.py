"""Training loops: contextual fine-tuning, its adversarial variant, and
scheduled teacher/student distillation, plus evaluation and diagnostics.

The adversarial loss is the mean cross-entropy over materialized perturbed
context sets and enters the total as L_train + lambda * L_adv; with lambda =
0 the adversarial pass is skipped entirely, so a lambda-0 run is arithmetic-
for-arithmetic identical to plain supervised contextual fine-tuning.

Distillation follows a per-epoch mode schedule: mode 0 updates only the
teacher, mode 1 freezes the teacher and refines the student against its
fixed outputs, and mode 2 updates both, with the student matching the
teacher's within-epoch, post-batch-update outputs. The student loss mixes
KL(teacher || student) with cross-entropy on the gold label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig, embed
from .kb import ContextSet, KnowledgeBase
from .model import (
    GuardParams,
    LABEL_INDEX,
    OptimizerState,
    apply_update,
    build_input,
    feature_dim,
    forward,
    loss_and_grads,
)
from .perturb import (
    AttackerInterface,
    PerturbationConfig,
    VariantRetriever,
    build_perturbed_contexts,
)


class TrainingError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetRow:
    text: str
    label: str


@dataclass(frozen=True)
class TrainExample:
    text: str
    label: str
    clean_ctx: ContextSet
    perturbed_ctx: tuple[ContextSet, ...] = ()


@dataclass(frozen=True)
class Schedule:
    """Per-epoch supervision modes; 0 teacher-only, 1 student-only, 2 joint."""

    modes: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.modes:
            raise TrainingError("schedule must be nonempty")
        if any(m not in (0, 1, 2) for m in self.modes):
            raise TrainingError(f"schedule modes must be in {{0,1,2}}, got {self.modes}")

    def __len__(self) -> int:
        return len(self.modes)

    def transitions(self) -> tuple[int, int] | None:
        """(T1, T2) for the canonical 0-block / 2-block / 1-block form, 1-based."""
        modes = self.modes
        t = len(modes)
        i = 0
        while i < t and modes[i] == 0:
            i += 1
        j = i
        while j < t and modes[j] == 2:
            j += 1
        k = j
        while k < t and modes[k] == 1:
            k += 1
        if k != t:
            return None
        return i + 1, j + 1

    @classmethod
    def canonical(cls, epochs: int) -> "Schedule":
        """Equal thirds of teacher-only, joint, student-only epochs."""
        if epochs < 1:
            raise TrainingError("schedule needs at least one epoch")
        third = epochs // 3
        rem = epochs - 3 * third
        a = third + (1 if rem >= 1 else 0)
        b = third + (1 if rem >= 2 else 0)
        return cls((0,) * a + (2,) * b + (1,) * (epochs - a - b))


@dataclass
class EpochRow:
    epoch: int
    mode: int
    l_train: float
    l_adv: float
    l_total: float
    l_student: float | None = None
    teacher_hash: str | None = None
    student_hash: str | None = None

    def to_dict(self) -> dict:
        d = {
            "epoch": self.epoch,
            "mode": self.mode,
            "l_train": self.l_train,
            "l_adv": self.l_adv,
            "l_total": self.l_total,
        }
        if self.l_student is not None:
            d["l_student"] = self.l_student
        if self.teacher_hash is not None:
            d["teacher_hash"] = self.teacher_hash
        if self.student_hash is not None:
            d["student_hash"] = self.student_hash
        return d


@dataclass
class TrainReport:
    rows: list[EpochRow]
    seed: int
    config_hash: str
    lam: float
    final_metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "lambda": self.lam,
            "epochs": [r.to_dict() for r in self.rows],
            "final_metrics": self.final_metrics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


# -- feature cache -------------------------------------------------------------


@dataclass
class FeatureCache:
    x: np.ndarray
    y: np.ndarray
    adv_x: np.ndarray
    adv_owner: np.ndarray
    adv_count: np.ndarray

    @property
    def has_adversarial(self) -> bool:
        return self.adv_x.shape[0] > 0


def build_feature_cache(
    examples: Sequence[TrainExample], kb: KnowledgeBase, cfg: EncoderConfig, k: int
) -> FeatureCache:
    n = len(examples)
    dim = feature_dim(cfg.dimension, k)
    x = np.zeros((n, dim))
    y = np.zeros(n, dtype=np.int64)
    adv_rows: list[np.ndarray] = []
    adv_owner: list[int] = []
    adv_count = np.zeros(n, dtype=np.int64)
    for i, ex in enumerate(examples):
        x[i], _ = build_input(ex.text, ex.clean_ctx, kb, cfg, k)
        y[i] = LABEL_INDEX[ex.label]
        for ctx in ex.perturbed_ctx:
            fv, _ = build_input(ex.text, ctx, kb, cfg, k)
            adv_rows.append(fv)
            adv_owner.append(i)
            adv_count[i] += 1
    adv_x = np.stack(adv_rows) if adv_rows else np.zeros((0, dim))
    return FeatureCache(x, y, adv_x, np.array(adv_owner, dtype=np.int64), adv_count)


def _adv_batch(
    cache: FeatureCache, batch_idx: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    """Variant rows owned by the batch, weighted so each example shares mass.

    Per-variant weight is 1 / (variants_of_example * examples_with_variants),
    i.e. the adversarial loss averages over variants within an example and
    then over examples that have any.
    """
    if not cache.has_adversarial:
        return None
    mask = np.isin(cache.adv_owner, batch_idx)
    if not mask.any():
        return None
    owners = cache.adv_owner[mask]
    n_owners = len(np.unique(owners))
    weights = 1.0 / (cache.adv_count[owners] * n_owners)
    return cache.adv_x[mask], cache.y[owners], weights


def _epoch_losses(params: GuardParams, cache: FeatureCache, lam: float) -> tuple[float, float, float]:
    """Full-pass L_train / L_adv / L_total at the given (fixed) params."""
    l_train, _ = loss_and_grads(params, cache.x, cache.y)
    l_adv = 0.0
    if lam != 0.0 and cache.has_adversarial:
        full = _adv_batch(cache, np.arange(cache.x.shape[0]))
        assert full is not None
        ax, ay, aw = full
        l_adv, _ = loss_and_grads(params, ax, ay, sample_weights=aw)
    return l_train, l_adv, l_train + lam * l_adv


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# -- RAFT / supervised training ---------------------------------------------------


def train_contextual(
    params: GuardParams,
    examples: Sequence[TrainExample],
    kb: KnowledgeBase,
    cfg: EncoderConfig,
    *,
    k: int,
    epochs: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
    lam: float = 0.0,
    momentum: float = 0.0,
    config_hash: str = "",
) -> tuple[GuardParams, TrainReport]:
    """Minimize mean CE over clean contexts plus lam * CE over perturbed ones.

    With lam = 0 this is plain supervised contextual fine-tuning: the
    adversarial pass is skipped, not multiplied by zero, so the update
    arithmetic is identical either way.
    """
    if epochs < 0:
        raise TrainingError("epochs must be >= 0")
    if lam < 0:
        raise TrainingError("lambda must be >= 0")
    cache = build_feature_cache(examples, kb, cfg, k)
    n = cache.x.shape[0]
    rng = np.random.default_rng(seed)
    state = OptimizerState(momentum=momentum)
    rows: list[EpochRow] = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for batch_idx in _batches(n, batch_size, order):
            try:
                _, grads = loss_and_grads(params, cache.x[batch_idx], cache.y[batch_idx])
                if lam != 0.0:
                    adv = _adv_batch(cache, batch_idx)
                    if adv is not None:
                        ax, ay, aw = adv
                        _, adv_grads = loss_and_grads(params, ax, ay, sample_weights=aw)
                        grads = grads.add(adv_grads, lam)
                params = apply_update(params, grads, state, lr)
            except Exception as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
        l_train, l_adv, l_total = _epoch_losses(params, cache, lam)
        rows.append(EpochRow(epoch, 0, l_train, l_adv, l_total, teacher_hash=params.params_hash()))
    report = TrainReport(rows, seed, config_hash, lam)
    return params, report


def supervised_contextual_finetune(
    params: GuardParams,
    examples: Sequence[TrainExample],
    kb: KnowledgeBase,
    cfg: EncoderConfig,
    *,
    k: int,
    epochs: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
    momentum: float = 0.0,
    config_hash: str = "",
) -> tuple[GuardParams, TrainReport]:
    return train_contextual(
        params, examples, kb, cfg,
        k=k, epochs=epochs, lr=lr, batch_size=batch_size,
        seed=seed, lam=0.0, momentum=momentum, config_hash=config_hash,
    )


# -- scheduled distillation ---------------------------------------------------------


def train_distilled(
    teacher: GuardParams,
    student: GuardParams,
    examples: Sequence[TrainExample],
    kb: KnowledgeBase,
    cfg: EncoderConfig,
    schedule: Schedule,
    *,
    k: int,
    lr: float,
    kl_weight: float = 0.6,
    ce_weight: float = 0.4,
    reward_weight: float = 0.0,
    lam: float = 0.0,
    batch_size: int = 32,
    seed: int = 0,
    momentum: float = 0.0,
    config_hash: str = "",
) -> tuple[GuardParams, GuardParams, TrainReport]:
    """Run the mode schedule; returns (teacher, student, report).

    The KL term points teacher -> student (the teacher's distribution is the
    reference). Weights kl_weight + ce_weight are expected to sum to 1.
    """
    if not isinstance(schedule, Schedule):
        schedule = Schedule(tuple(schedule))
    if abs(kl_weight + ce_weight - 1.0) > 1e-9:
        raise TrainingError(
            f"kl_weight + ce_weight must sum to 1, got {kl_weight} + {ce_weight}"
        )
    cache = build_feature_cache(examples, kb, cfg, k)
    n = cache.x.shape[0]
    rng = np.random.default_rng(seed)
    t_state = OptimizerState(momentum=momentum)
    s_state = OptimizerState(momentum=momentum)
    rows: list[EpochRow] = []
    for epoch, mode in enumerate(schedule.modes, 1):
        order = rng.permutation(n)
        for batch_idx in _batches(n, batch_size, order):
            xb, yb = cache.x[batch_idx], cache.y[batch_idx]
            try:
                if mode in (0, 2):
                    _, grads = loss_and_grads(teacher, xb, yb)
                    if lam != 0.0:
                        adv = _adv_batch(cache, batch_idx)
                        if adv is not None:
                            ax, ay, aw = adv
                            _, ag = loss_and_grads(teacher, ax, ay, sample_weights=aw)
                            grads = grads.add(ag, lam)
                    teacher = apply_update(teacher, grads, t_state, lr)
                if mode in (1, 2):
                    # mode 2 uses the teacher's post-update params of this batch
                    t_probs = forward(teacher, xb)
                    _, s_grads = loss_and_grads(
                        student, xb, yb,
                        teacher_probs=t_probs,
                        ce_weight=ce_weight,
                        kl_weight=kl_weight,
                        reward_weight=reward_weight,
                    )
                    student = apply_update(student, s_grads, s_state, lr)
            except Exception as exc:
                raise TrainingError(f"epoch {epoch} (mode {mode}): {exc}") from exc
        l_train, l_adv, l_total = _epoch_losses(teacher, cache, lam)
        t_probs_all = forward(teacher, cache.x)
        l_student, _ = loss_and_grads(
            student, cache.x, cache.y,
            teacher_probs=t_probs_all,
            ce_weight=ce_weight, kl_weight=kl_weight, reward_weight=reward_weight,
        )
        rows.append(
            EpochRow(
                epoch, mode, l_train, l_adv, l_total,
                l_student=l_student,
                teacher_hash=teacher.params_hash(),
                student_hash=student.params_hash(),
            )
        )
    report = TrainReport(rows, seed, config_hash, lam)
    return teacher, student, report


# -- evaluation -----------------------------------------------------------------


def _f1_parts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def classification_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> dict:
    """Support-weighted F1 plus per-class precision/recall/F1 and confusion counts."""
    n = len(y_true)
    counts = np.zeros((2, 2), dtype=int)  # [true][pred]
    for t, p in zip(y_true, y_pred):
        counts[t, p] += 1
    per_class = {}
    weighted_f1 = 0.0
    for label, idx in LABEL_INDEX.items():
        tp = int(counts[idx, idx])
        fp = int(counts[1 - idx, idx])
        fn = int(counts[idx, 1 - idx])
        support = int(counts[idx].sum())
        precision, recall, f1 = _f1_parts(tp, fp, fn)
        per_class[label] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": support,
        }
        if n:
            weighted_f1 += (support / n) * f1
    return {
        "n": n,
        "weighted_f1": weighted_f1,
        "per_class": per_class,
        "confusion": {
            "true_safe_pred_safe": int(counts[0, 0]),
            "true_safe_pred_unsafe": int(counts[0, 1]),
            "true_unsafe_pred_safe": int(counts[1, 0]),
            "true_unsafe_pred_unsafe": int(counts[1, 1]),
        },
    }


def evaluate(
    params: GuardParams,
    rows: Sequence[DatasetRow],
    kb: KnowledgeBase,
    cfg: EncoderConfig,
    *,
    k: int,
    epsilon: float,
    include_adversarial: bool = False,
) -> dict:
    """Retrieve per query at evaluation time, classify, aggregate metrics."""
    if not rows:
        raise TrainingError("evaluation dataset must be nonempty")
    dim = feature_dim(cfg.dimension, k)
    x = np.zeros((len(rows), dim))
    y_true = np.zeros(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        ctx = kb.retrieve_topk(row.text, k, epsilon, include_adversarial=include_adversarial)
        x[i], _ = build_input(row.text, ctx, kb, cfg, k)
        y_true[i] = LABEL_INDEX[row.label]
    probs = forward(params, x)
    y_pred = np.argmax(probs, axis=1)
    return classification_metrics(y_true, y_pred)


# -- diagnostics ------------------------------------------------------------------


def analyze_context_distribution(
    rows: Sequence[DatasetRow],
    kb: KnowledgeBase,
    threshold: float,
    *,
    include_adversarial: bool = False,
) -> dict:
    """Label grid of (query, top-1 context) pairs at a similarity threshold.

    Fractions are over queries that retrieved at least one context; queries
    with none are counted separately.
    """
    if not 0.0 <= threshold <= 1.0:
        raise TrainingError(f"threshold must be in [0, 1], got {threshold}")
    cells = {
        ("safe", "safe"): 0,
        ("safe", "unsafe"): 0,
        ("unsafe", "safe"): 0,
        ("unsafe", "unsafe"): 0,
    }
    no_context = 0
    for row in rows:
        ctx = kb.retrieve_topk(
            row.text, 1, 1.0 - threshold, include_adversarial=include_adversarial
        )
        if len(ctx) == 0:
            no_context += 1
            continue
        top_label = kb.get(ctx.items[0][0]).label
        cells[(row.label, top_label)] += 1
    covered = len(rows) - no_context
    frac = lambda key: cells[key] / covered if covered else 0.0
    return {
        "both_safe": frac(("safe", "safe")),
        "safe_query_unsafe_context": frac(("safe", "unsafe")),
        "unsafe_query_safe_context": frac(("unsafe", "safe")),
        "both_unsafe": frac(("unsafe", "unsafe")),
        "queries_with_context": covered,
        "queries_without_context": no_context,
    }


def context_coverage_ratio(
    rows: Sequence[DatasetRow],
    kb: KnowledgeBase,
    threshold: float,
    *,
    include_adversarial: bool = False,
) -> float:
    """Fraction of queries with at least one context at sim >= threshold."""
    if not rows:
        return 0.0
    snap = kb.snapshot
    if len(snap) == 0:
        return 0.0
    covered = 0
    for row in rows:
        emb = embed(row.text, kb.cfg)
        scores = snap.scan_scores(emb, kb.cfg.metric)
        if not include_adversarial:
            scores = scores[~snap.adversarial]
        if scores.size and float(scores.max()) >= threshold:
            covered += 1
    return covered / len(rows)


# -- dataset loading -----------------------------------------------------------------

BUILTIN_LABEL_MAP = {"safe": "safe", "unsafe": "unsafe"}


def load_dataset(
    path: str,
    *,
    seed: int = 0,
    split_ratio: float = 0.8,
    label_map: dict[str, str] | None = None,
) -> tuple[list[DatasetRow], list[DatasetRow]]:
    """Parse the JSONL dataset schema and return (train, test) rows.

    Each line is {"text": ..., "label": ..., "split": "train"|"test"?}.
    Labels are unified to the binary taxonomy through label_map; files
    without a split field are shuffled with the seed and split 80/20.
    """
    mapping = dict(BUILTIN_LABEL_MAP)
    if label_map:
        mapping.update({str(k).strip().lower(): v for k, v in label_map.items()})
    rows: list[DatasetRow] = []
    splits: list[str | None] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc})") from exc
            if not isinstance(rec, dict) or "text" not in rec or "label" not in rec:
                raise DatasetError(f"line {lineno}: expected object with text and label")
            raw_label = str(rec["label"]).strip().lower()
            if raw_label not in mapping:
                raise DatasetError(f"line {lineno}: unknown label token {rec['label']!r}")
            label = mapping[raw_label]
            if label not in ("safe", "unsafe"):
                raise DatasetError(f"line {lineno}: label_map must target safe/unsafe, got {label!r}")
            split = rec.get("split")
            if split is not None and split not in ("train", "test"):
                raise DatasetError(f"line {lineno}: split must be train or test, got {split!r}")
            rows.append(DatasetRow(str(rec["text"]), label))
            splits.append(split)
    if any(s is not None for s in splits):
        missing = [i + 1 for i, s in enumerate(splits) if s is None]
        if missing:
            raise DatasetError(f"record {missing[0]}: split field present on some rows but not all")
        train = [r for r, s in zip(rows, splits) if s == "train"]
        test = [r for r, s in zip(rows, splits) if s == "test"]
        return train, test
    order = np.random.default_rng(seed).permutation(len(rows))
    n_train = int(len(rows) * split_ratio)
    train = [rows[i] for i in order[:n_train]]
    test = [rows[i] for i in order[n_train:]]
    return train, test


# -- materialization ---------------------------------------------------------------


def materialize_training_set(
    rows: Sequence[DatasetRow],
    kb: KnowledgeBase,
    row_ids: Sequence[int],
    pcfg: PerturbationConfig,
    cfg: EncoderConfig,
    *,
    k: int,
    attacker: AttackerInterface | None = None,
    out_path: str | None = None,
    with_perturbations: bool = True,
) -> list[TrainExample]:
    """Pre-retrieve clean contexts and generate perturbed variants per example.

    ``row_ids[i]`` is the KB entry backing ``rows[i]``; it is excluded from
    its own retrieval. New adversarial rows are inserted unpublished and one
    snapshot publish at the end makes everything retrievable.
    """
    if len(rows) != len(row_ids):
        raise TrainingError("rows and row_ids must align")
    seeds = np.random.SeedSequence(pcfg.rng_seed).spawn(len(rows))
    retriever = VariantRetriever(kb)
    examples: list[TrainExample] = []
    records: list[dict] = []
    for i, (row, own_id) in enumerate(zip(rows, row_ids)):
        emb = embed(row.text, cfg)
        clean = kb.retrieve_topk(row.text, k, pcfg.epsilon, exclude_ids=(own_id,), embedding=emb)
        perturbed: tuple[ContextSet, ...] = ()
        provenance: list[dict] = []
        if with_perturbations:
            rng = np.random.default_rng(seeds[i])
            made = build_perturbed_contexts(
                row.text, kb, pcfg, rng,
                k=k, base_cfg=cfg, clean_ctx=clean,
                exclude_ids=(own_id,), attacker=attacker, retriever=retriever,
            )
            perturbed = tuple(p.context for p in made)
            provenance = [
                {"step": p.step, "seed": i, **p.provenance, "items": p.context.to_dict()["items"]}
                for p in made
            ]
        examples.append(TrainExample(row.text, row.label, clean, perturbed))
        if out_path:
            records.append(
                {
                    "text": row.text,
                    "label": row.label,
                    "clean": clean.to_dict()["items"],
                    "perturbed": provenance,
                }
            )
    kb.publish_snapshot()
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            header = {"seed": pcfg.rng_seed, "k": k, "config": pcfg.to_dict()}
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
    return examples
