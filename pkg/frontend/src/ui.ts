// DOM construction for the console panels. Views are rebuilt from fresh API
// data on every render; callbacks perform the mutation and re-render.

import type { ClassifyResponse, KbEntry } from './api.js';
import { MetricsRow, ReviewItem, formatMs } from './state.js';

export function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  children: (Node | string)[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

export interface ReviewCallbacks {
  onLabel: (queryText: string, label: 'safe' | 'unsafe') => void;
  onPromote: (queryText: string) => void;
}

export function renderReviewQueue(items: ReviewItem[], cb: ReviewCallbacks): HTMLElement {
  const root = el('div', { 'data-testid': 'review-queue' });
  root.append(el('h2', {}, ['Review queue']));
  if (items.length === 0) {
    root.append(el('p', { class: 'empty' }, ['No pending feedback.']));
    return root;
  }
  for (const item of items) {
    const row = el('div', { class: 'review-item', 'data-query': item.queryText });
    row.append(el('span', { class: 'query-text' }, [item.queryText]));
    const chips = el('span', { class: 'labels' });
    for (const l of item.labels) {
      chips.append(el('span', { class: `chip ${l.label}` }, [`${l.label} (${l.source})`]));
    }
    row.append(chips);
    if (item.promotable) {
      row.append(el('span', { class: 'badge promotable', 'data-testid': 'promotable-badge' }, ['promotable']));
      const promote = el('button', { 'data-testid': 'promote-button' }, ['Promote']);
      promote.addEventListener('click', () => cb.onPromote(item.queryText));
      row.append(promote);
    } else if (item.labelsNeeded !== null) {
      row.append(
        el('span', { class: 'badge needed' }, [`${item.labelsNeeded} more consistent label(s)`]),
      );
    } else {
      row.append(el('span', { class: 'badge conflict' }, ['conflicting labels']));
    }
    for (const label of ['safe', 'unsafe'] as const) {
      const btn = el('button', { 'data-testid': `label-${label}` }, [`Label ${label}`]);
      btn.addEventListener('click', () => cb.onLabel(item.queryText, label));
      row.append(btn);
    }
    root.append(row);
  }
  return root;
}

export function renderKbBrowser(
  epoch: number,
  total: number,
  entries: KbEntry[],
  onSearch: (probe: string) => void,
  onRefresh: () => void,
): HTMLElement {
  const root = el('div', { 'data-testid': 'kb-browser' });
  root.append(el('h2', {}, ['Knowledge base']));
  root.append(
    el('p', {}, [
      el('span', { 'data-testid': 'kb-epoch' }, [`epoch ${epoch}`]),
      ` — ${total} entries`,
    ]),
  );
  const input = el('input', { type: 'text', 'data-testid': 'search-input', placeholder: 'search probe' });
  const searchBtn = el('button', { 'data-testid': 'search-button' }, ['Search']);
  searchBtn.addEventListener('click', () => onSearch(input.value));
  const refreshBtn = el('button', { 'data-testid': 'refresh-button' }, ['Refresh snapshot']);
  refreshBtn.addEventListener('click', onRefresh);
  root.append(el('div', {}, [input, searchBtn, refreshBtn]));
  const table = el('table', { 'data-testid': 'kb-results' });
  const head = el('tr');
  for (const col of ['id', 'label', 'source', 'similarity', 'text']) {
    head.append(el('th', {}, [col]));
  }
  table.append(head);
  for (const entry of entries) {
    const tr = el('tr', { class: 'kb-row', 'data-entry-id': String(entry.id) });
    tr.append(el('td', {}, [String(entry.id)]));
    tr.append(el('td', {}, [entry.label]));
    tr.append(el('td', {}, [entry.source]));
    tr.append(el('td', {}, [entry.similarity === undefined ? '' : entry.similarity.toFixed(4)]));
    tr.append(el('td', {}, [entry.text]));
    table.append(tr);
  }
  root.append(table);
  return root;
}

export function renderMetricsPanel(rows: MetricsRow[], qps: number, epoch: number): HTMLElement {
  const root = el('div', { 'data-testid': 'metrics-panel' });
  root.append(el('h2', {}, ['Latency (rolling window)']));
  root.append(el('p', {}, [`${qps.toFixed(1)} qps, kb epoch `, el('span', { 'data-testid': 'metrics-epoch' }, [String(epoch)])]));
  const table = el('table');
  const head = el('tr');
  for (const col of ['stage', 'p50', 'p90', 'p99']) {
    head.append(el('th', {}, [col]));
  }
  table.append(head);
  for (const row of rows) {
    const tr = el('tr', { 'data-stage': row.stage });
    tr.append(el('td', {}, [row.stage]));
    tr.append(el('td', { 'data-testid': `${row.stage}-p50` }, [formatMs(row.p50)]));
    tr.append(el('td', { 'data-testid': `${row.stage}-p90` }, [formatMs(row.p90)]));
    tr.append(el('td', { 'data-testid': `${row.stage}-p99` }, [formatMs(row.p99)]));
    table.append(tr);
  }
  root.append(table);
  return root;
}

export function renderClassifyPanel(
  onClassify: (text: string) => void,
  result: ClassifyResponse | null,
): HTMLElement {
  const root = el('div', { 'data-testid': 'classify-panel' });
  root.append(el('h2', {}, ['Classify test']));
  const input = el('input', { type: 'text', 'data-testid': 'classify-input', placeholder: 'query text' });
  const btn = el('button', { 'data-testid': 'classify-button' }, ['Classify']);
  btn.addEventListener('click', () => onClassify(input.value));
  root.append(el('div', {}, [input, btn]));
  if (result) {
    const ctxIds = result.context.map(([id]) => id).join(', ');
    root.append(
      el('div', { 'data-testid': 'classify-result' }, [
        el('p', {}, [
          'label: ',
          el('strong', { 'data-testid': 'classify-label' }, [result.label]),
          ` (p_unsafe ${result.p_unsafe.toFixed(4)}, epoch ${result.kb_epoch})`,
        ]),
        el('p', { 'data-testid': 'classify-context' }, [`context ids: ${ctxIds}`]),
        el('p', {}, [
          `retrieval ${(result.timings.t_ret_us / 1000).toFixed(3)} ms + ` +
            `inference ${(result.timings.t_inf_us / 1000).toFixed(3)} ms = ` +
            `total ${(result.timings.t_tot_us / 1000).toFixed(3)} ms` +
            (result.budget_exceeded ? ' (budget exceeded)' : ''),
        ]),
      ]),
    );
  }
  return root;
}

export function renderErrorBanner(message: string | null, onRetry: () => void): HTMLElement {
  const root = el('div', { 'data-testid': 'error-banner' });
  if (message) {
    root.classList.add('visible');
    root.append(el('span', { class: 'error-text' }, [message]));
    const retry = el('button', { 'data-testid': 'retry-button' }, ['Retry']);
    retry.addEventListener('click', onRetry);
    root.append(retry);
  }
  return root;
}
