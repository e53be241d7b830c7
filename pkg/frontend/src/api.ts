// Typed client over the service's public HTTP API. The console holds no
// authority of its own: every view is derived from these responses and every
// mutation goes through them.

export interface LabelEvent {
  label: 'safe' | 'unsafe';
  source: string;
  timestamp: number;
}

export interface FeedbackRecord {
  query_text: string;
  labels: LabelEvent[];
  status: 'pending' | 'accepted' | 'rejected';
  confident: boolean;
}

export interface FeedbackListResponse {
  k: number;
  records: FeedbackRecord[];
}

export interface FeedbackSubmitResponse {
  query_text: string;
  labels_count: number;
  status: string;
  confident: boolean;
  labels_needed: number;
}

export interface KbEntry {
  id: number;
  text: string;
  label: 'safe' | 'unsafe';
  source: string;
  timestamp: number;
  confidence: number;
  similarity?: number;
}

export interface ClassifyResponse {
  label: 'safe' | 'unsafe';
  p_unsafe: number;
  context: [number, number][];
  timings: { t_ret_us: number; t_inf_us: number; t_tot_us: number };
  budget_exceeded: boolean;
  kb_epoch: number;
}

export interface StageQuantiles {
  p50: number;
  p90: number;
  p95: number;
  p99: number;
  count: number;
  mean: number;
  min: number;
  max: number;
}

export interface MetricsResponse {
  window_s: number;
  achieved_qps: number;
  stages: Record<string, { quantiles_ms: StageQuantiles }>;
  counters: { requests_total: number; budget_violations: number; kb_epoch: number };
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  let response: Response;
  try {
    response = await fetch(base + path, init);
  } catch (err) {
    throw new ApiError(0, `network error calling ${path}: ${String(err)}`);
  }
  const body = await response.text();
  if (!response.ok) {
    let detail = body;
    try {
      detail = JSON.parse(body).error ?? body;
    } catch {
      // keep the raw body
    }
    throw new ApiError(response.status, `${path} -> ${response.status}: ${detail}`);
  }
  return JSON.parse(body) as T;
}

function post<T>(base: string, path: string, payload: unknown): Promise<T> {
  return request<T>(base, path, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify(payload),
  });
}

export class ApiClient {
  constructor(readonly base: string) {}

  listFeedback(status?: string): Promise<FeedbackListResponse> {
    const suffix = status ? `?status=${encodeURIComponent(status)}` : '';
    return request(this.base, `/v1/feedback${suffix}`);
  }

  submitFeedback(text: string, label: 'safe' | 'unsafe', source = 'operator') {
    return post<FeedbackSubmitResponse>(this.base, '/v1/feedback', { text, label, source });
  }

  promote(text: string): Promise<{ entry_id: number; status: string }> {
    return post(this.base, '/v1/kb/promote', { text });
  }

  refresh(): Promise<{ epoch: number }> {
    return post(this.base, '/v1/kb/refresh', {});
  }

  search(probe: string, k = 5): Promise<{ epoch: number; results: KbEntry[] }> {
    return post(this.base, '/v1/kb/search', { probe, k });
  }

  listKb(offset = 0, limit = 50): Promise<{ epoch: number; total: number; entries: KbEntry[] }> {
    return request(this.base, `/v1/kb/list?offset=${offset}&limit=${limit}`);
  }

  classify(text: string): Promise<ClassifyResponse> {
    return post(this.base, '/v1/classify', { text });
  }

  metrics(): Promise<MetricsResponse> {
    return request(this.base, '/v1/metrics');
  }
}
