"""Latency-budgeted classification service over a published KB snapshot.

The classify path pins one immutable snapshot, retrieves top-K, builds the
feature layout and runs the student -- all synchronously inside the handler,
with per-stage wall-clock timings (retrieval, inference, total) echoed in the
response. Budget overruns are flagged, never dropped. Knowledge-base writes
go through the feedback store and become visible only on refresh, so a
refresh under load never blocks or skews in-flight classifications.

Everything rides plain HTTP/JSON; the route table is the whole public API
surface (the operator console is just another client of it).
"""

from __future__ import annotations

import collections
import json
import threading
import time

import numpy as np
from starlette.applications import Starlette
from starlette.middleware import Middleware
from starlette.middleware.cors import CORSMiddleware
from starlette.requests import Request
from starlette.responses import JSONResponse, PlainTextResponse, Response
from starlette.routing import Route

from .config import AppConfig
from .encoder import embed
from .feedback import FeedbackError, FeedbackStore, PolicySpec
from .kb import ContextSet, KnowledgeBase
from .model import GuardParams, INDEX_LABEL, build_input, forward
from .stats import histogram, quantile_summary

STAGES = ("retrieval", "inference", "total", "overhead")


class MetricsRing:
    """Rolling window of raw per-request stage timings plus counters."""

    def __init__(self, window_s: float = 60.0, max_samples: int = 200_000):
        self.window_s = window_s
        self._samples: collections.deque = collections.deque(maxlen=max_samples)
        self._lock = threading.Lock()
        self.requests_total = 0
        self.budget_violations = 0

    def record(self, ret_us: float, inf_us: float, tot_us: float, ovh_us: float, violated: bool) -> None:
        now = time.monotonic()
        with self._lock:
            self._samples.append((now, ret_us, inf_us, tot_us, ovh_us))
            self.requests_total += 1
            if violated:
                self.budget_violations += 1

    def window_samples(self) -> dict[str, list[float]]:
        cutoff = time.monotonic() - self.window_s
        with self._lock:
            rows = [s for s in self._samples if s[0] >= cutoff]
        return {
            "retrieval": [r[1] for r in rows],
            "inference": [r[2] for r in rows],
            "total": [r[3] for r in rows],
            "overhead": [r[4] for r in rows],
        }

    def report(self, kb_epoch: int) -> dict:
        stages = self.window_samples()
        per_stage = {}
        for stage in STAGES:
            us = stages[stage]
            ms = [v / 1000.0 for v in us]
            per_stage[stage] = {
                "quantiles_ms": quantile_summary(ms),
                "histogram_ms": histogram(ms),
            }
        n = len(stages["total"])
        return {
            "window_s": self.window_s,
            "stages": per_stage,
            "achieved_qps": n / self.window_s if self.window_s > 0 else 0.0,
            "counters": {
                "requests_total": self.requests_total,
                "budget_violations": self.budget_violations,
                "kb_epoch": kb_epoch,
            },
        }


class ServiceState:
    def __init__(
        self,
        config: AppConfig,
        kb: KnowledgeBase,
        params: GuardParams | None,
        *,
        feedback_log: str | None = None,
    ):
        self.config = config
        self.kb = kb
        self.params = params
        self.store = FeedbackStore(kb, k=3, log_path=feedback_log)
        self.metrics = MetricsRing(window_s=config.service.metrics_window_s)


def _bad_request(message: str) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=400)


async def _json_body(request: Request) -> dict | None:
    try:
        body = json.loads(await request.body())
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None
    return body if isinstance(body, dict) else None


def create_app(state: ServiceState) -> Starlette:
    cfg = state.config
    k = cfg.kb.k
    epsilon = cfg.kb.epsilon
    tau_us = cfg.service.tau_ms * 1000.0
    retrieval_budget_us = cfg.service.retrieval_budget_ms * 1000.0
    strict = cfg.service.strict_budget
    encoder_cfg = cfg.encoder

    async def classify(request: Request) -> Response:
        body = await _json_body(request)
        if body is None or not isinstance(body.get("text"), str):
            return _bad_request("body must be a JSON object with a string 'text' field")
        if state.params is None:
            return JSONResponse({"error": "model not loaded"}, status_code=503)
        text = body["text"]

        t0 = time.perf_counter_ns()
        snapshot = state.kb.snapshot
        query_emb = embed(text, encoder_cfg)
        ctx = state.kb.retrieve_topk(
            text, k, epsilon, snapshot=snapshot, embedding=query_emb
        )
        t1 = time.perf_counter_ns()
        if strict and (t1 - t0) / 1000.0 > retrieval_budget_us:
            # strict mode: classify on the query alone once retrieval blew its share
            ctx = ContextSet((), k)
        features, _ = build_input(
            text, ctx, state.kb, encoder_cfg, k, query_embedding=query_emb
        )
        probs = forward(state.params, features)
        label = INDEX_LABEL[int(np.argmax(probs))]
        t2 = time.perf_counter_ns()

        payload = {
            "label": label,
            "p_unsafe": float(probs[1]),
            "context": [[eid, score] for eid, score in ctx.items],
            "timings": {
                "t_ret_us": (t1 - t0) / 1000.0,
                "t_inf_us": (t2 - t1) / 1000.0,
                "t_tot_us": 0.0,  # patched below, includes response assembly
            },
            "budget_exceeded": False,
            "kb_epoch": snapshot.epoch,
        }
        t3 = time.perf_counter_ns()
        tot_us = (t3 - t0) / 1000.0
        payload["timings"]["t_tot_us"] = tot_us
        payload["budget_exceeded"] = tot_us > tau_us
        state.metrics.record(
            payload["timings"]["t_ret_us"],
            payload["timings"]["t_inf_us"],
            tot_us,
            tot_us - payload["timings"]["t_ret_us"] - payload["timings"]["t_inf_us"],
            payload["budget_exceeded"],
        )
        return JSONResponse(payload)

    async def feedback_post(request: Request) -> Response:
        body = await _json_body(request)
        if body is None or not isinstance(body.get("text"), str):
            return _bad_request("body must be a JSON object with a string 'text' field")
        try:
            record = state.store.submit(
                body["text"], body.get("label"), body.get("source", "end_user")
            )
        except FeedbackError as exc:
            return _bad_request(str(exc))
        return JSONResponse(
            {
                "query_text": record.query_text,
                "labels_count": len(record.labels),
                "status": record.status,
                "confident": state.store.is_confident(record),
                "labels_needed": max(0, state.store.k - len(record.labels)),
            }
        )

    async def feedback_list(request: Request) -> Response:
        status = request.query_params.get("status")
        records = state.store.records(status)
        return JSONResponse(
            {
                "k": state.store.k,
                "records": [
                    {**r.to_dict(), "confident": state.store.is_confident(r)} for r in records
                ],
            }
        )

    async def kb_list(request: Request) -> Response:
        try:
            offset = int(request.query_params.get("offset", 0))
            limit = min(int(request.query_params.get("limit", 50)), 500)
        except ValueError:
            return _bad_request("offset and limit must be integers")
        snap = state.kb.snapshot
        entries = snap.entries[offset : offset + limit]
        return JSONResponse(
            {
                "epoch": snap.epoch,
                "total": len(snap),
                "entries": [e.to_record() for e in entries],
            }
        )

    async def kb_search(request: Request) -> Response:
        body = await _json_body(request)
        if body is None or not isinstance(body.get("probe"), str):
            return _bad_request("body must be a JSON object with a string 'probe' field")
        probe_k = int(body.get("k", k))
        ctx = state.kb.retrieve_topk(body["probe"], probe_k, 1.0)
        results = []
        for eid, score in ctx.items:
            entry = state.kb.get(eid)
            results.append({**entry.to_record(), "similarity": score})
        return JSONResponse({"epoch": state.kb.epoch, "results": results})

    async def kb_promote(request: Request) -> Response:
        body = await _json_body(request)
        if body is None or not isinstance(body.get("text"), str):
            return _bad_request("body must be a JSON object with a string 'text' field")
        try:
            entry_id = state.store.promote(body["text"])
        except FeedbackError as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)
        return JSONResponse({"entry_id": entry_id, "status": "accepted"})

    async def kb_refresh(request: Request) -> Response:
        epoch = state.store.refresh()
        return JSONResponse({"epoch": epoch})

    async def kb_policy_run(request: Request) -> Response:
        body = await _json_body(request)
        if body is None or not isinstance(body.get("policy"), dict):
            return _bad_request("body must carry a 'policy' object")
        try:
            policy = PolicySpec.from_dict(body["policy"])
            n = int(body.get("n", 5))
            seed = int(body.get("seed", 0))
            pairs = state.store.synth_generate(policy, n, np.random.default_rng(seed))
            ids = state.store.add_synthetic(pairs)
        except (FeedbackError, KeyError, ValueError) as exc:
            return _bad_request(str(exc))
        return JSONResponse(
            {"policy_id": policy.policy_id, "generated": len(ids), "entry_ids": ids}
        )

    async def metrics(request: Request) -> Response:
        report = state.metrics.report(state.kb.epoch)
        if request.query_params.get("format") == "text":
            lines = []
            for stage in STAGES:
                q = report["stages"][stage]["quantiles_ms"]
                for key in ("p50", "p90", "p95", "p99"):
                    lines.append(f"ctxguard_latency_ms{{stage=\"{stage}\",q=\"{key}\"}} {q[key]:.6f}")
            c = report["counters"]
            lines.append(f"ctxguard_requests_total {c['requests_total']}")
            lines.append(f"ctxguard_budget_violations_total {c['budget_violations']}")
            lines.append(f"ctxguard_kb_epoch {c['kb_epoch']}")
            lines.append(f"ctxguard_achieved_qps {report['achieved_qps']:.6f}")
            return PlainTextResponse("\n".join(lines) + "\n")
        return JSONResponse(report)

    routes = [
        Route("/v1/classify", classify, methods=["POST"]),
        Route("/v1/feedback", feedback_post, methods=["POST"]),
        Route("/v1/feedback", feedback_list, methods=["GET"]),
        Route("/v1/kb/list", kb_list, methods=["GET"]),
        Route("/v1/kb/search", kb_search, methods=["POST"]),
        Route("/v1/kb/promote", kb_promote, methods=["POST"]),
        Route("/v1/kb/refresh", kb_refresh, methods=["POST"]),
        Route("/v1/kb/policy-run", kb_policy_run, methods=["POST"]),
        Route("/v1/metrics", metrics, methods=["GET"]),
    ]
    middleware = [
        Middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"])
    ]
    app = Starlette(routes=routes, middleware=middleware)
    app.state.service = state
    return app


def run_service(state: ServiceState) -> None:
    """Serve until interrupted; tuned for the latency budget (worker-local
    BLAS threads should already be pinned to 1 by the CLI entry)."""
    import gc

    import uvicorn

    gc.collect()
    gc.freeze()
    uvicorn.run(
        create_app(state),
        host=state.config.service.host,
        port=state.config.service.port,
        log_level="warning",
        access_log=False,
        http="httptools",
    )
