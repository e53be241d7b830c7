"""Operator CLI: train | distill | eval | analyze | serve | bench | kb.

Every run takes one config file plus overrides (flags > env > file) and
writes a reproducibility manifest recording the merged config hash, the
seeds, and content hashes of every input file. Report paths write both
delimited output (JSON/CSV) and rendered figures.
"""

from __future__ import annotations

import os

# Pin BLAS to one thread before numpy loads anywhere: the hot retrieval path
# is a single matvec, and thread fan-out only adds jitter at this size.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import hashlib
import json
import urllib.request
from pathlib import Path

import click

from . import __version__
from .config import AppConfig, ConfigError, load_config
from .kb import KbLoadError, KnowledgeBase
from .model import (
    GuardCapacity,
    feature_dim,
    init_params,
    load_params,
    save_params,
)
from .training import (
    DatasetError,
    Schedule,
    TrainingError,
    analyze_context_distribution,
    context_coverage_ratio,
    evaluate,
    load_dataset,
    materialize_training_set,
    train_contextual,
    train_distilled,
)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _write_manifest(
    out_dir: Path, command: str, cfg: AppConfig, inputs: dict[str, str], outputs: list[str],
    seeds: dict[str, int],
) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seeds": seeds,
        "inputs": {name: _sha256_file(p) for name, p in sorted(inputs.items())},
        "outputs": sorted(outputs),
    }
    _write_json(out_dir / "manifest.json", manifest)


def _fail(message: str) -> "click.ClickException":
    return click.ClickException(message)


def _load_cfg(config_path: str | None, sets: tuple[str, ...]) -> AppConfig:
    try:
        return load_config(config_path, overrides=list(sets))
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        raise _fail(f"config error: {exc}")


def _load_rows(cfg: AppConfig, dataset: str):
    if not Path(dataset).exists():
        raise _fail(f"dataset not found: {dataset}")
    try:
        return load_dataset(
            dataset, seed=cfg.training.seed, label_map=cfg.label_map or None
        )
    except DatasetError as exc:
        raise _fail(f"dataset error in {dataset}: {exc}")


def _build_train_kb(cfg: AppConfig, train_rows) -> tuple[KnowledgeBase, list[int]]:
    kb = KnowledgeBase(cfg.encoder)
    ids = [kb.insert(r.text, r.label, timestamp_ms=0) for r in train_rows]
    kb.publish_snapshot()
    return kb, ids


def _load_kb(cfg: AppConfig, path: str) -> KnowledgeBase:
    if not Path(path).exists():
        raise _fail(f"knowledge base not found: {path}")
    try:
        return KnowledgeBase.load(path, cfg.encoder, scan_dtype=cfg.kb.scan_dtype)
    except KbLoadError as exc:
        raise _fail(f"failed to load {path}: {exc}")


def _parse_schedule(spec: str, epochs: int) -> Schedule:
    if spec == "canonical":
        return Schedule.canonical(epochs)
    try:
        return Schedule(tuple(int(tok) for tok in spec.split(",") if tok.strip()))
    except (ValueError, TrainingError) as exc:
        raise _fail(f"bad schedule {spec!r}: {exc}")


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=str, default=None, help="YAML config file.")
@click.option(
    "--set", "sets", multiple=True, metavar="SECTION.KEY=VALUE",
    help="Config override; beats env vars (CTXGUARD_SECTION__KEY) and the file.",
)
@click.pass_context
def main(ctx: click.Context, config_path: str | None, sets: tuple[str, ...]) -> None:
    """Retrieval-augmented intent guard toolkit."""
    ctx.obj = _load_cfg(config_path, sets)


@main.command()
@click.option("--dataset", required=True, type=str)
@click.option("--out", "out_dir", required=True, type=str)
@click.pass_obj
def train(cfg: AppConfig, dataset: str, out_dir: str) -> None:
    """Adversarial contextual fine-tuning of the teacher (lambda=0 is plain
    supervised training)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_rows, test_rows = _load_rows(cfg, dataset)
    kb, ids = _build_train_kb(cfg, train_rows)
    lam = cfg.perturbation.lam
    perturb_path = out / "perturbations.jsonl"
    examples = materialize_training_set(
        train_rows, kb, ids, cfg.perturbation, cfg.encoder,
        k=cfg.kb.k, out_path=str(perturb_path), with_perturbations=lam != 0.0,
    )
    dim = feature_dim(cfg.encoder.dimension, cfg.kb.k)
    params = init_params(
        GuardCapacity(cfg.model.teacher.hidden_layers, cfg.model.teacher.hidden_width, "teacher"),
        dim, cfg.model.init_seed,
    )
    try:
        params, report = train_contextual(
            params, examples, kb, cfg.encoder,
            k=cfg.kb.k, epochs=cfg.training.epochs, lr=cfg.training.lr,
            batch_size=cfg.training.batch_size, seed=cfg.training.seed,
            lam=lam, momentum=cfg.training.momentum, config_hash=cfg.config_hash(),
        )
    except TrainingError as exc:
        raise _fail(f"training failed: {exc}")
    kb.persist(str(out / "kb.jsonl"))
    save_params(
        params, str(out / "teacher.ckpt"),
        metadata={"config_hash": cfg.config_hash(), "lambda": lam, "dataset_rows": len(train_rows)},
    )
    report_path = out / "train_report.json"
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    from .plots import save_training_curves

    figure = save_training_curves(report.to_dict(), str(out / "train_losses.png"))
    _write_manifest(
        out, "train", cfg, {"dataset": dataset},
        ["kb.jsonl", "perturbations.jsonl", "teacher.ckpt", "train_report.json",
         Path(figure).name],
        {"init_seed": cfg.model.init_seed, "train_seed": cfg.training.seed,
         "perturbation_seed": cfg.perturbation.rng_seed},
    )
    click.echo(f"trained {cfg.training.epochs} epochs (lambda={lam}) -> {out}")


@main.command()
@click.option("--dataset", required=True, type=str)
@click.option("--out", "out_dir", required=True, type=str)
@click.pass_obj
def distill(cfg: AppConfig, dataset: str, out_dir: str) -> None:
    """Scheduled teacher/student distillation on the dataset's train split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_rows, test_rows = _load_rows(cfg, dataset)
    kb, ids = _build_train_kb(cfg, train_rows)
    lam = cfg.perturbation.lam
    examples = materialize_training_set(
        train_rows, kb, ids, cfg.perturbation, cfg.encoder,
        k=cfg.kb.k, with_perturbations=lam != 0.0,
    )
    schedule = _parse_schedule(cfg.training.schedule, cfg.training.epochs)
    dim = feature_dim(cfg.encoder.dimension, cfg.kb.k)
    teacher = init_params(
        GuardCapacity(cfg.model.teacher.hidden_layers, cfg.model.teacher.hidden_width, "teacher"),
        dim, cfg.model.init_seed,
    )
    student = init_params(
        GuardCapacity(cfg.model.student.hidden_layers, cfg.model.student.hidden_width, "student"),
        dim, cfg.model.init_seed + 1,
    )
    try:
        teacher, student, report = train_distilled(
            teacher, student, examples, kb, cfg.encoder, schedule,
            k=cfg.kb.k, lr=cfg.training.lr,
            kl_weight=cfg.training.kl_weight, ce_weight=cfg.training.ce_weight,
            reward_weight=cfg.training.reward_weight, lam=lam,
            batch_size=cfg.training.batch_size, seed=cfg.training.seed,
            momentum=cfg.training.momentum, config_hash=cfg.config_hash(),
        )
    except TrainingError as exc:
        raise _fail(f"distillation failed: {exc}")
    kb.persist(str(out / "kb.jsonl"))
    meta = {"config_hash": cfg.config_hash(), "schedule": list(schedule.modes)}
    save_params(teacher, str(out / "teacher.ckpt"), metadata=meta)
    save_params(student, str(out / "student.ckpt"), metadata=meta)
    with open(out / "distill_report.json", "w", encoding="utf-8") as f:
        f.write(report.to_json())
    from .plots import save_training_curves

    figure = save_training_curves(report.to_dict(), str(out / "distill_losses.png"))
    _write_manifest(
        out, "distill", cfg, {"dataset": dataset},
        ["kb.jsonl", "teacher.ckpt", "student.ckpt", "distill_report.json", Path(figure).name],
        {"init_seed": cfg.model.init_seed, "train_seed": cfg.training.seed,
         "perturbation_seed": cfg.perturbation.rng_seed},
    )
    click.echo(
        f"distilled over schedule {''.join(map(str, schedule.modes))} "
        f"(student/teacher params {student.n_params()}/{teacher.n_params()}) -> {out}"
    )


@main.command(name="eval")
@click.option("--dataset", required=True, type=str)
@click.option("--params", "params_path", required=True, type=str)
@click.option("--kb", "kb_path", required=True, type=str)
@click.option("--out", "out_dir", required=True, type=str)
@click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True)
@click.option("--perturbed", is_flag=True, help="Evaluate under adversarial-inclusive retrieval.")
@click.pass_obj
def eval_cmd(cfg: AppConfig, dataset: str, params_path: str, kb_path: str, out_dir: str,
             split: str, perturbed: bool) -> None:
    """Weighted-F1 evaluation with retrieval at evaluation time."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_rows, test_rows = _load_rows(cfg, dataset)
    rows = train_rows if split == "train" else test_rows
    if not rows:
        raise _fail(f"no rows in the {split} split of {dataset}")
    kb = _load_kb(cfg, kb_path)
    if not Path(params_path).exists():
        raise _fail(f"checkpoint not found: {params_path}")
    params = load_params(params_path)
    metrics = evaluate(
        params, rows, kb, cfg.encoder,
        k=cfg.kb.k, epsilon=cfg.kb.epsilon, include_adversarial=perturbed,
    )
    _write_json(out / "metrics.json", metrics)
    with open(out / "metrics.csv", "w", encoding="utf-8") as f:
        f.write("class,precision,recall,f1,support\n")
        for cls in ("safe", "unsafe"):
            p = metrics["per_class"][cls]
            f.write(f"{cls},{p['precision']!r},{p['recall']!r},{p['f1']!r},{p['support']}\n")
        f.write(f"weighted,,,{metrics['weighted_f1']!r},{metrics['n']}\n")
    from .plots import save_eval_figure

    figure = save_eval_figure(metrics, str(out / "metrics.png"))
    _write_manifest(
        out, "eval", cfg,
        {"dataset": dataset, "params": params_path, "kb": kb_path},
        ["metrics.json", "metrics.csv", Path(figure).name],
        {"split_seed": cfg.training.seed},
    )
    click.echo(f"weighted F1 = {metrics['weighted_f1']:.4f} on {metrics['n']} rows -> {out}")


@main.command()
@click.option("--dataset", required=True, type=str)
@click.option("--kb", "kb_path", required=True, type=str)
@click.option("--out", "out_dir", required=True, type=str)
@click.option("--threshold", type=float, default=0.6, show_default=True)
@click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True)
@click.pass_obj
def analyze(cfg: AppConfig, dataset: str, kb_path: str, out_dir: str, threshold: float,
            split: str) -> None:
    """Context-label distribution and context coverage diagnostics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_rows, test_rows = _load_rows(cfg, dataset)
    rows = train_rows if split == "train" else test_rows
    if not rows:
        raise _fail(f"no rows in the {split} split of {dataset}")
    kb = _load_kb(cfg, kb_path)
    dist = analyze_context_distribution(rows, kb, threshold)
    coverage = context_coverage_ratio(rows, kb, threshold)
    result = {"threshold": threshold, "distribution": dist, "coverage": coverage}
    _write_json(out / "analysis.json", result)
    with open(out / "analysis.csv", "w", encoding="utf-8") as f:
        f.write("cell,fraction\n")
        for key in ("both_safe", "safe_query_unsafe_context",
                    "unsafe_query_safe_context", "both_unsafe"):
            f.write(f"{key},{dist[key]!r}\n")
        f.write(f"coverage,{coverage!r}\n")
    from .plots import save_analysis_figure

    figure = save_analysis_figure(dist, coverage, str(out / "analysis.png"))
    _write_manifest(
        out, "analyze", cfg, {"dataset": dataset, "kb": kb_path},
        ["analysis.json", "analysis.csv", Path(figure).name],
        {"split_seed": cfg.training.seed},
    )
    click.echo(
        f"coverage {coverage:.3f}, mismatched "
        f"{dist['safe_query_unsafe_context'] + dist['unsafe_query_safe_context']:.3f} -> {out}"
    )


@main.command()
@click.option("--params", "params_path", required=True, type=str)
@click.option("--kb", "kb_path", required=True, type=str)
@click.option("--feedback-log", type=str, default=None)
@click.pass_obj
def serve(cfg: AppConfig, params_path: str, kb_path: str, feedback_log: str | None) -> None:
    """Start the classification service."""
    from .service import ServiceState, run_service

    kb = _load_kb(cfg, kb_path)
    if not Path(params_path).exists():
        raise _fail(f"checkpoint not found: {params_path}")
    params = load_params(params_path)
    state = ServiceState(cfg, kb, params, feedback_log=feedback_log)
    click.echo(
        f"serving on {cfg.service.host}:{cfg.service.port} "
        f"(kb epoch {kb.epoch}, {len(kb)} entries, tau {cfg.service.tau_ms} ms)"
    )
    run_service(state)


def _read_queries(path: str) -> list[str]:
    p = Path(path)
    if not p.exists():
        raise _fail(f"query file not found: {path}")
    queries: list[str] = []
    with open(p, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                try:
                    queries.append(str(json.loads(line)["text"]))
                    continue
                except (json.JSONDecodeError, KeyError):
                    pass
            queries.append(line)
    if not queries:
        raise _fail(f"no queries in {path}")
    return queries


@main.command()
@click.option("--url", default=None, help="Service base URL; defaults to the configured host:port.")
@click.option("--qps", type=float, default=300.0, show_default=True)
@click.option("--duration", type=float, default=60.0, show_default=True)
@click.option("--queries", "query_file", type=str, default=None)
@click.option("--out", "out_dir", required=True, type=str)
@click.option("--from-samples", "from_samples", type=str, default=None,
              help="Recompute the report from a dumped samples CSV instead of running load.")
@click.pass_obj
def bench(cfg: AppConfig, url: str | None, qps: float, duration: float,
          query_file: str | None, out_dir: str, from_samples: str | None) -> None:
    """Open-loop constant-rate benchmark; writes report, raw samples, figures."""
    from .loadgen import (
        LoadgenError,
        read_samples,
        recompute_report,
        run_loadgen,
        write_report,
        write_samples,
    )
    from .plots import save_latency_figures

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs: dict[str, str] = {}
    if from_samples:
        samples = read_samples(from_samples)
        report = recompute_report(samples, target_qps=qps, duration_s=duration)
        inputs["samples"] = from_samples
    else:
        if not query_file:
            raise _fail("--queries is required unless --from-samples is given")
        queries = _read_queries(query_file)
        inputs["queries"] = query_file
        base = url or f"http://{cfg.service.host}:{cfg.service.port}"
        try:
            result = run_loadgen(base + "/v1/classify", qps, duration, queries)
        except LoadgenError as exc:
            if exc.samples:
                write_samples(exc.samples, str(out / "samples.csv"))
            raise _fail(f"load generation aborted: {exc}")
        samples = result.samples
        report = result.report()
        write_samples(samples, str(out / "samples.csv"))
    write_report(report, str(out / "report.json"))
    figures = save_latency_figures(report, samples, str(out / "bench"))
    outputs = ["report.json"] + [Path(f).name for f in figures]
    if not from_samples:
        outputs.append("samples.csv")
    _write_manifest(out, "bench", cfg, inputs, outputs, {})
    total_p99 = report["latency_ms"]["total"]["p99"]
    flag = " (saturated)" if report["saturated"] else ""
    click.echo(
        f"achieved {report['achieved_qps']:.1f}/{report['target_qps']:.0f} qps{flag}, "
        f"server total p99 = {total_p99:.3f} ms -> {out}"
    )


@main.group()
def kb() -> None:
    """Knowledge-base file operations and service refresh."""


@kb.command(name="import")
@click.option("--dataset", required=True, type=str)
@click.option("--out", "out_path", required=True, type=str)
@click.option("--split", type=click.Choice(["train", "test", "all"]), default="all",
              show_default=True)
@click.pass_obj
def kb_import(cfg: AppConfig, dataset: str, out_path: str, split: str) -> None:
    """Build a KB file from a JSONL dataset."""
    train_rows, test_rows = _load_rows(cfg, dataset)
    rows = {"train": train_rows, "test": test_rows, "all": train_rows + test_rows}[split]
    if not rows:
        raise _fail(f"no rows selected from {dataset}")
    kb_obj = KnowledgeBase(cfg.encoder)
    for r in rows:
        kb_obj.insert(r.text, r.label, timestamp_ms=0)
    kb_obj.publish_snapshot()
    kb_obj.persist(out_path)
    click.echo(f"imported {len(rows)} entries -> {out_path}")


@kb.command(name="export")
@click.option("--kb", "kb_path", required=True, type=str)
@click.option("--out", "out_path", required=True, type=str)
@click.pass_obj
def kb_export(cfg: AppConfig, kb_path: str, out_path: str) -> None:
    """Dump a KB file back to the dataset JSONL schema."""
    kb_obj = _load_kb(cfg, kb_path)
    with open(out_path, "w", encoding="utf-8") as f:
        for e in kb_obj.snapshot.entries:
            f.write(json.dumps({"text": e.text, "label": e.label}, ensure_ascii=False) + "\n")
    click.echo(f"exported {len(kb_obj.snapshot)} entries -> {out_path}")


@kb.command(name="refresh")
@click.option("--url", default=None)
@click.pass_obj
def kb_refresh(cfg: AppConfig, url: str | None) -> None:
    """Ask a running service to publish a new snapshot."""
    base = url or f"http://{cfg.service.host}:{cfg.service.port}"
    req = urllib.request.Request(base + "/v1/kb/refresh", data=b"{}", method="POST")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            payload = json.loads(resp.read())
    except OSError as exc:
        raise _fail(f"refresh failed against {base}: {exc}")
    click.echo(f"kb epoch {payload['epoch']}")


if __name__ == "__main__":
    main()
