"""Figure rendering for report paths: every CLI command that writes a
metrics/report file also drops matplotlib figures next to it."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

STAGE_COLORS = {
    "client": "#888888",
    "retrieval": "#1f77b4",
    "inference": "#ff7f0e",
    "total": "#2ca02c",
    "overhead": "#9467bd",
}


def save_latency_figures(report: dict, samples: list[dict], out_prefix: str) -> list[str]:
    """Histogram per stage plus a quantile bar chart; returns written paths."""
    written = []
    ok = [s for s in samples if s["status"] == 200]
    stage_values = {
        "client": [s["client_us"] / 1000.0 for s in ok],
        "retrieval": [s["t_ret_us"] / 1000.0 for s in ok],
        "inference": [s["t_inf_us"] / 1000.0 for s in ok],
        "total": [s["t_tot_us"] / 1000.0 for s in ok],
    }

    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    for ax, (stage, values) in zip(axes.ravel(), stage_values.items()):
        if values:
            ax.hist(values, bins=40, color=STAGE_COLORS[stage])
        ax.set_title(f"{stage} latency")
        ax.set_xlabel("ms")
        ax.set_ylabel("requests")
    fig.suptitle(
        f"target {report['target_qps']:.0f} qps, achieved {report['achieved_qps']:.1f} qps"
    )
    fig.tight_layout()
    path = out_prefix + "_latency_hist.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(8, 4.5))
    quant_keys = ("p50", "p90", "p95", "p99")
    width = 0.2
    for i, (stage, _) in enumerate(stage_values.items()):
        q = report["latency_ms"][stage]
        xs = [j + i * width for j in range(len(quant_keys))]
        ax.bar(xs, [q[k] for k in quant_keys], width=width,
               label=stage, color=STAGE_COLORS[stage])
    ax.set_xticks([j + 1.5 * width for j in range(len(quant_keys))])
    ax.set_xticklabels(quant_keys)
    ax.set_ylabel("ms")
    ax.set_title("latency quantiles by stage")
    ax.legend()
    fig.tight_layout()
    path = out_prefix + "_latency_quantiles.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)
    return written


def save_training_curves(report_dict: dict, out_path: str) -> str:
    """Per-epoch loss curves (train / adversarial / total / student)."""
    rows = report_dict["epochs"]
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(epochs, [r["l_train"] for r in rows], label="L_train", color="#1f77b4")
    if any(r["l_adv"] for r in rows):
        ax.plot(epochs, [r["l_adv"] for r in rows], label="L_adv", color="#d62728")
        ax.plot(epochs, [r["l_total"] for r in rows], label="L_total", color="#2ca02c")
    if any("l_student" in r for r in rows):
        ax.plot(
            epochs,
            [r.get("l_student", float("nan")) for r in rows],
            label="L_student",
            color="#9467bd",
        )
        for r in rows:
            marker = {0: "v", 2: "D", 1: "^"}[r["mode"]]
            ax.plot([r["epoch"]], [r["l_train"]], marker=marker, color="#1f77b4", ms=4)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training losses")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def save_eval_figure(metrics: dict, out_path: str) -> str:
    """Per-class precision/recall/F1 bars plus the weighted F1 line."""
    fig, ax = plt.subplots(figsize=(7, 4))
    classes = list(metrics["per_class"])
    keys = ("precision", "recall", "f1")
    width = 0.25
    for i, key in enumerate(keys):
        xs = [j + i * width for j in range(len(classes))]
        ax.bar(xs, [metrics["per_class"][c][key] for c in classes], width=width, label=key)
    ax.axhline(metrics["weighted_f1"], color="black", linestyle="--",
               label=f"weighted F1 = {metrics['weighted_f1']:.3f}")
    ax.set_xticks([j + width for j in range(len(classes))])
    ax.set_xticklabels(classes)
    ax.set_ylim(0, 1.05)
    ax.set_title("evaluation metrics")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def save_analysis_figure(dist: dict, coverage: float | None, out_path: str) -> str:
    """Context-label grid fractions, with the coverage ratio in the title."""
    cells = (
        ("both_safe", "both\nsafe"),
        ("safe_query_unsafe_context", "safe q\nunsafe c"),
        ("unsafe_query_safe_context", "unsafe q\nsafe c"),
        ("both_unsafe", "both\nunsafe"),
    )
    fig, ax = plt.subplots(figsize=(7, 4))
    colors = ("#2ca02c", "#d62728", "#ff7f0e", "#1f77b4")
    ax.bar(
        range(len(cells)),
        [dist[key] for key, _ in cells],
        color=colors,
        tick_label=[lbl for _, lbl in cells],
    )
    ax.set_ylabel("fraction of covered queries")
    title = "context-label distribution"
    if coverage is not None:
        title += f" (coverage {coverage:.1%})"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
