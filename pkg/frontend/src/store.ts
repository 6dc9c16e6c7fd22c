// Single console store. The event stream is the one source of truth: the
// store folds ledger entries and telemetry windows into view state, and the
// two mutating flows (approvals, kill switch) only POST — the UI changes
// when the resulting entries come back over the stream.

import type {
  AuditPayload,
  DecisionPayload,
  LedgerEntry,
  PendingApproval,
  TelemetryWindow,
  TierState,
  TriggeredRule,
} from "./types";
import { isDecision } from "./types";

export const KPI_SERIES_LIMIT = 180; // three simulated hours of 1-minute ticks

export interface KpiPoint {
  t: number;
  errorRate: number;
  p95: number;
}

export interface DecisionFilters {
  stage: string | null;
  outcome: string | null;
  overriddenOnly: boolean;
}

export interface ExplainRule extends TriggeredRule {
  source: string; // audit kind the rule trace came from
}

export interface ConsoleState {
  simNow: number;
  cursor: number; // next ledger sequence to request on reconnect
  pending: PendingApproval[];
  tier: TierState;
  decisions: DecisionPayload[];
  audits: AuditPayload[];
  baselineSeries: KpiPoint[];
  canarySeries: KpiPoint[];
  filters: DecisionFilters;
  selectedDecisionId: string | null;
  chainBadge: "unverified" | "verified" | "TAMPERED";
  banner: string | null;
  toasts: string[];
}

export function initialState(): ConsoleState {
  return {
    simNow: 0,
    cursor: 0,
    pending: [],
    tier: { kill_switch_engaged: false, agents: {} },
    decisions: [],
    audits: [],
    baselineSeries: [],
    canarySeries: [],
    filters: { stage: null, outcome: null, overriddenOnly: false },
    selectedDecisionId: null,
    chainBadge: "unverified",
    banner: null,
    toasts: [],
  };
}

type Listener = (state: ConsoleState) => void;

export class ConsoleStore {
  private state: ConsoleState = initialState();
  private listeners: Listener[] = [];

  get snapshot(): ConsoleState {
    return this.state;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private commit(patch: Partial<ConsoleState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) listener(this.state);
  }

  /** Fold one ledger entry from the stream; advances the reconnect cursor. */
  applyLedgerEntry(entry: LedgerEntry): void {
    if (entry.sequence < this.state.cursor) return; // at-least-once dedup
    const patch: Partial<ConsoleState> = { cursor: entry.sequence + 1 };
    const payload = entry.payload;
    patch.simNow = Math.max(this.state.simNow, payload.tick);
    if (isDecision(payload)) {
      patch.decisions = [payload, ...this.state.decisions];
    } else {
      patch.audits = [payload, ...this.state.audits].slice(0, 2000);
      if (payload.kind === "approval_requested" || payload.kind === "approval_resolved"
          || payload.kind === "approval_timeout") {
        // the pending list is refreshed from the API by the caller; here we
        // just drop locally-known requests that reached a terminal state
        const requestId = payload.data["request_id"] as string | undefined;
        if (requestId && payload.kind !== "approval_requested") {
          patch.pending = this.state.pending.filter((p) => p.request_id !== requestId);
        }
      }
      if (payload.kind === "killswitch") {
        patch.banner = payload.data["engaged"] ? "AUTONOMY DISABLED" : null;
      }
    }
    this.commit(patch);
  }

  applyTelemetry(window: TelemetryWindow): void {
    const point: KpiPoint = { t: window.start, errorRate: window.error_rate, p95: window.p95_ms };
    const key = window.population === "baseline" ? "baselineSeries" : "canarySeries";
    const series = [...this.state[key], point].slice(-KPI_SERIES_LIMIT);
    this.commit({ [key]: series, simNow: Math.max(this.state.simNow, window.start) });
  }

  setPending(pending: PendingApproval[], now: number): void {
    this.commit({ pending, simNow: Math.max(this.state.simNow, now) });
  }

  setTier(tier: TierState): void {
    this.commit({
      tier,
      banner: tier.kill_switch_engaged ? "AUTONOMY DISABLED" : null,
    });
  }

  setFilters(filters: Partial<DecisionFilters>): void {
    this.commit({ filters: { ...this.state.filters, ...filters } });
  }

  selectDecision(decisionId: string | null): void {
    this.commit({ selectedDecisionId: decisionId });
  }

  setChainBadge(badge: ConsoleState["chainBadge"]): void {
    this.commit({ chainBadge: badge });
  }

  toast(message: string): void {
    this.commit({ toasts: [...this.state.toasts, message].slice(-5) });
  }

  filteredDecisions(): DecisionPayload[] {
    const { stage, outcome, overriddenOnly } = this.state.filters;
    return this.state.decisions.filter(
      (d) =>
        (stage === null || d.stage === stage) &&
        (outcome === null || d.policy_outcome === outcome) &&
        (!overriddenOnly || d.human_overridden),
    );
  }

  /** Countdown to an approval deadline in simulated minutes — never wall
   * clock, so accelerated runs count down correctly. */
  minutesRemaining(approval: PendingApproval): number {
    return Math.max(0, approval.deadline - this.state.simNow);
  }

  /** Policy trace for a decision: rule hits from denial/escalation/warning
   * audits sharing a trace id with the record. */
  explainRules(decision: DecisionPayload): ExplainRule[] {
    const traces = new Set(decision.trace_ids);
    const out: ExplainRule[] = [];
    for (const audit of this.state.audits) {
      if (!["policy_denial", "policy_escalation", "policy_warning"].includes(audit.kind)) continue;
      if (!audit.trace_ids.some((t) => traces.has(t))) continue;
      for (const rule of audit.data.rules ?? []) {
        out.push({ ...rule, source: audit.kind });
      }
    }
    return out;
  }

  decisionById(decisionId: string): DecisionPayload | undefined {
    return this.state.decisions.find((d) => d.id === decisionId);
  }
}
