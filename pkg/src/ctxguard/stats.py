"""Quantiles and histograms computed from raw samples.

Reports quote order statistics of the actual recorded values (nearest-rank),
never interpolated or merged estimates, so an offline recomputation from a
dumped sample file reproduces the report bit for bit.
"""

from __future__ import annotations

import math
from typing import Sequence

QUANTILES = (50.0, 90.0, 95.0, 99.0)


def quantile(sorted_samples: Sequence[float], q: float) -> float:
    """Nearest-rank quantile of pre-sorted samples; q in (0, 100]."""
    n = len(sorted_samples)
    if n == 0:
        return 0.0
    rank = max(1, math.ceil(q / 100.0 * n))
    return float(sorted_samples[rank - 1])


def quantile_summary(samples: Sequence[float]) -> dict:
    """p50/p90/p95/p99 plus count, min, max, mean from raw samples."""
    ordered = sorted(samples)
    out = {f"p{int(q)}": quantile(ordered, q) for q in QUANTILES}
    out["count"] = len(ordered)
    out["min"] = float(ordered[0]) if ordered else 0.0
    out["max"] = float(ordered[-1]) if ordered else 0.0
    out["mean"] = float(sum(ordered) / len(ordered)) if ordered else 0.0
    return out


def histogram(samples: Sequence[float], n_bins: int = 30) -> dict:
    """Fixed-width bins over [min, max]; returns edges and counts."""
    if not samples:
        return {"edges": [], "counts": []}
    lo, hi = min(samples), max(samples)
    if hi == lo:
        hi = lo + 1.0
    width = (hi - lo) / n_bins
    counts = [0] * n_bins
    for s in samples:
        idx = min(int((s - lo) / width), n_bins - 1)
        counts[idx] += 1
    edges = [lo + i * width for i in range(n_bins + 1)]
    return {"edges": edges, "counts": counts}
