// Console composition: poll loops for the queue and metrics, event handlers
// for every mutation, a full refetch after each mutation. All state lives on
// the server; this file only shuttles responses into render functions.

import { ApiClient, ClassifyResponse, KbEntry } from './api.js';
import { deriveMetricsRows, deriveReviewItem } from './state.js';
import {
  el,
  renderClassifyPanel,
  renderErrorBanner,
  renderKbBrowser,
  renderMetricsPanel,
  renderReviewQueue,
} from './ui.js';

export interface ConsoleOptions {
  pollMs?: number;
}

export interface ConsoleHandle {
  refreshAll(): Promise<void>;
  stop(): void;
}

export function mountConsole(
  root: HTMLElement,
  baseUrl: string,
  options: ConsoleOptions = {},
): ConsoleHandle {
  const api = new ApiClient(baseUrl);
  const pollMs = options.pollMs ?? 2000;

  let lastError: string | null = null;
  let kbEntries: KbEntry[] = [];
  let kbEpoch = 0;
  let kbTotal = 0;
  let classifyResult: ClassifyResponse | null = null;

  const banner = el('div');
  const queuePanel = el('div');
  const kbPanel = el('div');
  const metricsPanel = el('div');
  const classifyPanel = el('div');
  root.append(
    el('h1', {}, ['ctxguard operator console']),
    banner,
    queuePanel,
    kbPanel,
    classifyPanel,
    metricsPanel,
  );

  function showError(err: unknown): void {
    lastError = err instanceof Error ? err.message : String(err);
    renderBanner();
  }

  function clearError(): void {
    if (lastError !== null) {
      lastError = null;
      renderBanner();
    }
  }

  function renderBanner(): void {
    banner.replaceChildren(renderErrorBanner(lastError, () => void refreshAll()));
  }

  async function mutate(action: () => Promise<unknown>): Promise<void> {
    try {
      await action();
      clearError();
    } catch (err) {
      showError(err);
    }
    await refreshQueue();
    await refreshKb();
  }

  async function refreshQueue(): Promise<void> {
    try {
      const listing = await api.listFeedback('pending');
      const items = listing.records.map((r) => deriveReviewItem(r, listing.k));
      queuePanel.replaceChildren(
        renderReviewQueue(items, {
          onLabel: (text, label) => void mutate(() => api.submitFeedback(text, label)),
          onPromote: (text) => void mutate(() => api.promote(text)),
        }),
      );
      clearError();
    } catch (err) {
      showError(err);
    }
  }

  async function refreshKb(probe?: string): Promise<void> {
    try {
      if (probe) {
        const found = await api.search(probe, 10);
        kbEpoch = found.epoch;
        kbEntries = found.results;
      } else {
        const listing = await api.listKb(0, 20);
        kbEpoch = listing.epoch;
        kbTotal = listing.total;
        kbEntries = listing.entries;
      }
      kbPanel.replaceChildren(
        renderKbBrowser(
          kbEpoch,
          kbTotal,
          kbEntries,
          (p) => void refreshKb(p || undefined),
          () => void mutate(() => api.refresh()),
        ),
      );
      clearError();
    } catch (err) {
      showError(err);
    }
  }

  async function refreshMetrics(): Promise<void> {
    try {
      const metrics = await api.metrics();
      metricsPanel.replaceChildren(
        renderMetricsPanel(
          deriveMetricsRows(metrics),
          metrics.achieved_qps,
          metrics.counters.kb_epoch,
        ),
      );
    } catch (err) {
      showError(err);
    }
  }

  function renderClassify(): void {
    classifyPanel.replaceChildren(
      renderClassifyPanel((text) => {
        void (async () => {
          try {
            classifyResult = await api.classify(text);
            clearError();
          } catch (err) {
            showError(err);
          }
          renderClassify();
        })();
      }, classifyResult),
    );
  }

  async function refreshAll(): Promise<void> {
    await refreshQueue();
    await refreshKb();
    await refreshMetrics();
    renderClassify();
  }

  renderBanner();
  renderClassify();
  void refreshAll();
  const timers = [
    setInterval(() => void refreshQueue(), pollMs),
    setInterval(() => void refreshMetrics(), pollMs),
  ];
  return {
    refreshAll,
    stop: () => timers.forEach(clearInterval),
  };
}

declare global {
  interface Window {
    ctxguardConsole?: ConsoleHandle;
  }
}

if (typeof document !== 'undefined' && document.getElementById('console-root')) {
  const params = new URLSearchParams(window.location.search);
  const base = params.get('api') ?? `http://${window.location.hostname}:8787`;
  window.ctxguardConsole = mountConsole(
    document.getElementById('console-root') as HTMLElement,
    base,
  );
}
