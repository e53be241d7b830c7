"""Open-loop constant-rate load generator for the classification service.

Requests fire at fixed inter-arrival times regardless of completions, so
slow responses do not throttle the offered rate (no coordinated omission).
Client latency is measured from the scheduled send time; per-stage server
timings are echoed from each response. Raw samples are dumped as CSV and the
report quantiles are recomputed from exactly those rows, so an offline
recomputation matches bit for bit.
"""

from __future__ import annotations

import asyncio
import csv
import json
import time
from dataclasses import dataclass, field

import aiohttp

from .stats import quantile_summary

SAMPLE_FIELDS = (
    "seq",
    "scheduled_ms",
    "status",
    "client_us",
    "t_ret_us",
    "t_inf_us",
    "t_tot_us",
    "budget_exceeded",
)


class LoadgenError(RuntimeError):
    def __init__(self, message: str, samples: list[dict] | None = None):
        super().__init__(message)
        self.samples = samples or []


@dataclass
class BenchResult:
    target_qps: float
    duration_s: float
    sent: int
    completed: int
    failed: int
    achieved_qps: float
    saturated: bool
    samples: list[dict] = field(default_factory=list)

    def report(self) -> dict:
        ok = [s for s in self.samples if s["status"] == 200]
        stages = {
            "client": [s["client_us"] / 1000.0 for s in ok],
            "retrieval": [s["t_ret_us"] / 1000.0 for s in ok],
            "inference": [s["t_inf_us"] / 1000.0 for s in ok],
            "total": [s["t_tot_us"] / 1000.0 for s in ok],
        }
        return {
            "target_qps": self.target_qps,
            "duration_s": self.duration_s,
            "sent": self.sent,
            "completed": self.completed,
            "failed": self.failed,
            "achieved_qps": self.achieved_qps,
            "saturated": self.saturated,
            "budget_violations": sum(1 for s in ok if s["budget_exceeded"]),
            "latency_ms": {name: quantile_summary(vals) for name, vals in stages.items()},
        }


async def _run_async(
    url: str,
    target_qps: float,
    duration_s: float,
    queries: list[str],
    *,
    timeout_s: float = 5.0,
    max_connections: int = 200,
) -> BenchResult:
    interval = 1.0 / target_qps
    samples: list[dict] = []
    failed = [0]

    connector = aiohttp.TCPConnector(limit=max_connections)
    timeout = aiohttp.ClientTimeout(total=timeout_s)
    async with aiohttp.ClientSession(connector=connector, timeout=timeout) as session:
        # reachability probe before the clock starts
        try:
            async with session.post(url, json={"text": queries[0]}) as r:
                await r.read()
        except aiohttp.ClientError as exc:
            raise LoadgenError(f"service unreachable at {url}: {exc}") from exc

        async def one(seq: int, scheduled: float, t_start: float) -> None:
            row = {
                "seq": seq,
                "scheduled_ms": (scheduled - t_start) * 1000.0,
                "status": 0,
                "client_us": 0.0,
                "t_ret_us": 0.0,
                "t_inf_us": 0.0,
                "t_tot_us": 0.0,
                "budget_exceeded": 0,
            }
            try:
                async with session.post(url, json={"text": queries[seq % len(queries)]}) as r:
                    body = await r.json()
                row["status"] = r.status
                row["client_us"] = (time.perf_counter() - scheduled) * 1e6
                if r.status == 200:
                    t = body["timings"]
                    row["t_ret_us"] = t["t_ret_us"]
                    row["t_inf_us"] = t["t_inf_us"]
                    row["t_tot_us"] = t["t_tot_us"]
                    row["budget_exceeded"] = int(body["budget_exceeded"])
                else:
                    failed[0] += 1
            except Exception:
                failed[0] += 1
            samples.append(row)

        start = time.perf_counter()
        tasks: list[asyncio.Task] = []
        seq = 0
        while True:
            now = time.perf_counter()
            if now - start >= duration_s:
                break
            scheduled = start + seq * interval
            if now < scheduled:
                await asyncio.sleep(scheduled - now)
            else:
                await asyncio.sleep(0)  # keep in-flight tasks progressing when behind
            tasks.append(asyncio.create_task(one(seq, scheduled, start)))
            seq += 1
        if tasks:
            await asyncio.wait(tasks, timeout=timeout_s + duration_s)
        elapsed = time.perf_counter() - start

    samples.sort(key=lambda s: s["seq"])
    achieved = seq / elapsed if elapsed > 0 else 0.0
    saturated = abs(achieved - target_qps) / target_qps > 0.02
    return BenchResult(
        target_qps=target_qps,
        duration_s=duration_s,
        sent=seq,
        completed=seq - failed[0],
        failed=failed[0],
        achieved_qps=achieved,
        saturated=saturated,
        samples=samples,
    )


def run_loadgen(
    url: str,
    target_qps: float,
    duration_s: float,
    queries: list[str],
    *,
    timeout_s: float = 5.0,
) -> BenchResult:
    if not queries:
        raise LoadgenError("query list must be nonempty")
    if target_qps <= 0 or duration_s <= 0:
        raise LoadgenError("target_qps and duration_s must be positive")
    return asyncio.run(
        _run_async(url, target_qps, duration_s, queries, timeout_s=timeout_s)
    )


# -- sample persistence and offline recomputation -------------------------------


def write_samples(samples: list[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SAMPLE_FIELDS)
        writer.writeheader()
        for s in samples:
            writer.writerow({k: s[k] for k in SAMPLE_FIELDS})


def read_samples(path: str) -> list[dict]:
    out = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append(
                {
                    "seq": int(row["seq"]),
                    "scheduled_ms": float(row["scheduled_ms"]),
                    "status": int(row["status"]),
                    "client_us": float(row["client_us"]),
                    "t_ret_us": float(row["t_ret_us"]),
                    "t_inf_us": float(row["t_inf_us"]),
                    "t_tot_us": float(row["t_tot_us"]),
                    "budget_exceeded": int(row["budget_exceeded"]),
                }
            )
    return out


def recompute_report(samples: list[dict], *, target_qps: float, duration_s: float) -> dict:
    """Rebuild the bench report purely from dumped samples (deterministic)."""
    sent = len(samples)
    failed = sum(1 for s in samples if s["status"] != 200)
    achieved = sent / duration_s if duration_s > 0 else 0.0
    result = BenchResult(
        target_qps=target_qps,
        duration_s=duration_s,
        sent=sent,
        completed=sent - failed,
        failed=failed,
        achieved_qps=achieved,
        saturated=abs(achieved - target_qps) / target_qps > 0.02 if target_qps else False,
        samples=samples,
    )
    return result.report()


def write_report(report: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
