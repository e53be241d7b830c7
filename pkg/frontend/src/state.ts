// Pure derivations from API responses to view models. Nothing here is
// persisted: reloading the page reconstructs every view from the server.

import type { FeedbackRecord, MetricsResponse } from './api.js';

export interface ReviewItem {
  queryText: string;
  labels: { label: string; source: string }[];
  status: string;
  unanimous: boolean;
  /** k - n when unanimous and still short; 0 when promotable; null on conflict */
  labelsNeeded: number | null;
  promotable: boolean;
}

export function deriveReviewItem(record: FeedbackRecord, k: number): ReviewItem {
  const labels = record.labels.map((l) => ({ label: l.label, source: l.source }));
  const unanimous =
    labels.length > 0 && labels.every((l) => l.label === labels[0].label);
  const labelsNeeded = unanimous ? Math.max(0, k - labels.length) : null;
  const promotable =
    record.status === 'pending' && unanimous && labels.length >= k;
  return {
    queryText: record.query_text,
    labels,
    status: record.status,
    unanimous,
    labelsNeeded,
    promotable,
  };
}

export interface MetricsRow {
  stage: string;
  p50: number;
  p90: number;
  p99: number;
}

const PANEL_STAGES = ['retrieval', 'inference', 'total'];

export function deriveMetricsRows(metrics: MetricsResponse): MetricsRow[] {
  return PANEL_STAGES.map((stage) => {
    const q = metrics.stages[stage]?.quantiles_ms;
    return {
      stage,
      p50: q?.p50 ?? 0,
      p90: q?.p90 ?? 0,
      p99: q?.p99 ?? 0,
    };
  });
}

export function formatMs(ms: number): string {
  return `${ms.toFixed(3)} ms`;
}
