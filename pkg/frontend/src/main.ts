// Console entry point: one SSE subscription with cursor reconnect, one
// store, and event-driven re-render. The console never mutates state
// optimistically — rows move when the resulting ledger entries stream back.

import { ApiClient, ApiError } from "./api";
import { isValidOverride } from "./catalog";
import { verifyChain } from "./chain";
import { ConsoleStore } from "./store";
import type { LedgerEntry, StageName, TelemetryWindow } from "./types";
import {
  renderApprovals,
  renderBanner,
  renderCharts,
  renderExplainability,
  renderLedger,
  renderTier,
} from "./views";

function requireElement(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing container #${id}`);
  return el;
}

export function bootConsole(): void {
  const params = new URLSearchParams(window.location.search);
  const baseUrl = params.get("api") ?? window.location.origin;
  const token = params.get("token") ?? window.sessionStorage.getItem("pipekeeper_token") ?? "";
  if (!token) {
    document.body.innerHTML =
      '<p class="empty">no operator token: open the console as /?token=&lt;PIPEKEEPER_TOKEN&gt;</p>';
    return;
  }
  window.sessionStorage.setItem("pipekeeper_token", token);

  const api = new ApiClient({ baseUrl, token });
  const store = new ConsoleStore();
  const containers = {
    banner: requireElement("banner"),
    tier: requireElement("tier"),
    approvals: requireElement("approvals"),
    charts: requireElement("charts"),
    ledger: requireElement("ledger"),
    detail: requireElement("detail"),
    toasts: requireElement("toasts"),
  };

  store.subscribe((state) => {
    containers.banner.innerHTML = renderBanner(state);
    containers.tier.innerHTML = renderTier(state);
    containers.approvals.innerHTML = renderApprovals(state, (a) => store.minutesRemaining(a));
    containers.charts.innerHTML = renderCharts(state);
    containers.ledger.innerHTML = renderLedger(state, store.filteredDecisions());
    const selected = state.selectedDecisionId
      ? store.decisionById(state.selectedDecisionId)
      : undefined;
    containers.detail.innerHTML = renderExplainability(
      selected,
      selected ? store.explainRules(selected) : [],
    );
    containers.toasts.innerHTML = state.toasts.map((t) => `<div class="toast">${t}</div>`).join("");
  });

  async function refreshPending(): Promise<void> {
    try {
      const body = await api.pendingApprovals();
      store.setPending(body.pending, body.now);
    } catch (error) {
      surface(error);
    }
  }

  async function refreshTier(): Promise<void> {
    try {
      store.setTier(await api.tier());
    } catch (error) {
      surface(error);
    }
  }

  async function verifyFetchedPrefix(): Promise<void> {
    try {
      const body = await api.decisions({ since: 0, limit: 10000 });
      const verdict = await verifyChain(body.entries as LedgerEntry[]);
      store.setChainBadge(verdict.ok ? "verified" : "TAMPERED");
    } catch (error) {
      surface(error);
    }
  }

  function surface(error: unknown): void {
    if (error instanceof ApiError) {
      store.toast(`${error.status}: ${error.message}`);
      if (error.status === 404 || error.status === 409) void refreshPending();
    } else {
      store.toast(String(error));
    }
  }

  // --- mutating flows --------------------------------------------------

  containers.approvals.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    const requestId = target.dataset["request"];
    const act = target.dataset["act"];
    if (!requestId || !act) return;
    void api
      .resolveApproval(requestId, act as "approve" | "deny")
      .then(() => store.toast(`${act} queued for ${requestId}`))
      .catch(surface);
  });

  containers.approvals.addEventListener("change", (event) => {
    const target = event.target as HTMLSelectElement;
    const requestId = target.dataset["overrideFor"];
    if (!requestId || !target.value) return;
    const pending = store.snapshot.pending.find((p) => p.request_id === requestId);
    if (!pending) return;
    // client-side catalog validation blocks out-of-catalog submissions
    if (!isValidOverride(pending.stage as StageName, target.value)) {
      store.toast(`action ${target.value} is not allowed at ${pending.stage}`);
      target.value = "";
      return;
    }
    void api
      .resolveApproval(requestId, "override", target.value)
      .then(() => store.toast(`override(${target.value}) queued`))
      .catch(surface);
    target.value = "";
  });

  requireElement("killswitch").addEventListener("click", () => {
    const engaged = store.snapshot.tier.kill_switch_engaged;
    const verb = engaged ? "release" : "ENGAGE";
    if (!window.confirm(`Really ${verb} the kill switch?`)) return;
    void api
      .killSwitch(!engaged)
      .then(() => store.toast(`kill switch ${verb} queued`))
      .catch(surface);
  });

  containers.ledger.addEventListener("click", (event) => {
    const row = (event.target as HTMLElement).closest("[data-decision]") as HTMLElement | null;
    if (row?.dataset["decision"]) store.selectDecision(row.dataset["decision"]);
  });

  containers.ledger.addEventListener("change", (event) => {
    const target = event.target as HTMLInputElement | HTMLSelectElement;
    const filter = target.dataset["filter"];
    if (filter === "stage") store.setFilters({ stage: target.value || null });
    if (filter === "outcome") store.setFilters({ outcome: target.value || null });
    if (filter === "overridden")
      store.setFilters({ overriddenOnly: (target as HTMLInputElement).checked });
  });

  // --- event stream with sequence-cursor reconnect ----------------------

  function connect(): void {
    // EventSource cannot carry Authorization headers; stream via fetch
    void streamEvents();
  }

  async function streamEvents(): Promise<void> {
    try {
      const response = await fetch(api.eventStreamUrl(store.snapshot.cursor), {
        headers: { Authorization: `Bearer ${api.token}` },
      });
      if (!response.ok || !response.body) throw new ApiError(response.status, "stream failed");
      const reader = response.body.getReader();
      const decoder = new TextDecoder();
      let buffer = "";
      let eventName = "";
      for (;;) {
        const { done, value } = await reader.read();
        if (done) break;
        buffer += decoder.decode(value, { stream: true });
        let index: number;
        while ((index = buffer.indexOf("\n")) >= 0) {
          const line = buffer.slice(0, index);
          buffer = buffer.slice(index + 1);
          if (line.startsWith("event: ")) eventName = line.slice(7).trim();
          else if (line.startsWith("data: ")) handleEvent(eventName, line.slice(6));
        }
      }
    } catch {
      store.toast("stream dropped; reconnecting from cursor");
    }
    window.setTimeout(connect, 1000);
  }

  function handleEvent(name: string, data: string): void {
    if (name === "ledger") {
      const entry = JSON.parse(data) as LedgerEntry;
      store.applyLedgerEntry(entry);
      const kind = entry.payload.payload_kind === "audit" ? (entry.payload as { kind: string }).kind : "";
      if (kind === "approval_requested" || kind === "approval_resolved" || kind === "approval_timeout") {
        void refreshPending();
      }
      if (kind === "tier_transition" || kind === "killswitch") void refreshTier();
    } else if (name === "telemetry") {
      store.applyTelemetry(JSON.parse(data) as TelemetryWindow);
    }
  }

  void refreshPending();
  void refreshTier();
  void verifyFetchedPrefix();
  window.setInterval(() => void verifyFetchedPrefix(), 15000);
  connect();
}

bootConsole();
