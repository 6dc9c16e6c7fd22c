import { describe, expect, it } from "vitest";

import { ConsoleStore, KPI_SERIES_LIMIT } from "../src/store";
import type { AuditPayload, DecisionPayload, LedgerEntry, PendingApproval } from "../src/types";

function decisionEntry(sequence: number, overrides: Partial<DecisionPayload> = {}): LedgerEntry {
  const payload: DecisionPayload = {
    payload_kind: "decision",
    id: `d-${sequence}`,
    timestamp: "2025-01-01T00:10:00Z",
    tick: 10 + sequence,
    stage: "canary_analysis",
    agent_version: "1.0.0",
    model: "heuristic-canary-v1",
    inputs: { logs: ["error rate +3.2%"] },
    policy_version: "1.0.0+abc",
    proposed_action: "rollback",
    confidence: 0.91,
    policy_outcome: "ALLOW",
    final_action: "rollback",
    human_overridden: false,
    rationale: "r",
    trace_ids: ["win-canary-000010"],
    ...overrides,
  };
  return {
    sequence,
    entry_hash_hex: "ff".repeat(32),
    prev_hash_hex: "00".repeat(32),
    payload_text: JSON.stringify(payload),
    payload,
  };
}

function auditEntry(sequence: number, kind: string, data: Record<string, unknown>, traces: string[] = []): LedgerEntry {
  const payload: AuditPayload = {
    payload_kind: "audit",
    kind,
    timestamp: "2025-01-01T00:10:00Z",
    tick: 10 + sequence,
    data,
    trace_ids: traces,
  };
  return {
    sequence,
    entry_hash_hex: "ee".repeat(32),
    prev_hash_hex: "00".repeat(32),
    payload_text: JSON.stringify(payload),
    payload,
  };
}

function pending(overrides: Partial<PendingApproval> = {}): PendingApproval {
  return {
    request_id: "apr-00001",
    stage: "canary_analysis",
    action: "rollback",
    confidence: 0.74,
    evidence: ["error rate +2.1%"],
    rationale: "r",
    agent_id: "observability",
    verdict: "REQUIRE_APPROVAL",
    rules: ["confidence_floor"],
    created_at: 100,
    deadline: 115,
    deadline_iso: "2025-01-01T01:55:00Z",
    minutes_remaining: 15,
    run_id: "run-00001",
    resolution: "pending",
    trace_id: "t",
    now: 100,
    ...overrides,
  };
}

describe("ledger folding", () => {
  it("separates decisions from audits and advances the cursor", () => {
    const store = new ConsoleStore();
    store.applyLedgerEntry(decisionEntry(0));
    store.applyLedgerEntry(auditEntry(1, "approval_requested", { request_id: "apr-1" }));
    expect(store.snapshot.decisions).toHaveLength(1);
    expect(store.snapshot.audits).toHaveLength(1);
    expect(store.snapshot.cursor).toBe(2);
  });

  it("deduplicates redelivered entries by sequence", () => {
    const store = new ConsoleStore();
    store.applyLedgerEntry(decisionEntry(0));
    store.applyLedgerEntry(decisionEntry(0));
    expect(store.snapshot.decisions).toHaveLength(1);
  });

  it("kill switch audit raises the banner; release clears it", () => {
    const store = new ConsoleStore();
    store.applyLedgerEntry(auditEntry(0, "killswitch", { engaged: true }));
    expect(store.snapshot.banner).toBe("AUTONOMY DISABLED");
    store.applyLedgerEntry(auditEntry(1, "killswitch", { engaged: false }));
    expect(store.snapshot.banner).toBeNull();
  });

  it("approval resolution removes the row from the queue", () => {
    const store = new ConsoleStore();
    store.setPending([pending()], 100);
    store.applyLedgerEntry(
      auditEntry(0, "approval_resolved", { request_id: "apr-00001", resolution: "approved" }),
    );
    expect(store.snapshot.pending).toHaveLength(0);
  });

  it("expired approvals leave the queue via the timeout audit", () => {
    const store = new ConsoleStore();
    store.setPending([pending()], 100);
    store.applyLedgerEntry(
      auditEntry(0, "approval_timeout", { request_id: "apr-00001", fallback_action: "rollback" }),
    );
    expect(store.snapshot.pending).toHaveLength(0);
  });
});

describe("simulated-time countdowns", () => {
  it("uses simulated clock fields, not wall clock", () => {
    const store = new ConsoleStore();
    store.setPending([pending({ deadline: 115 })], 100);
    expect(store.minutesRemaining(store.snapshot.pending[0])).toBe(15);
    // telemetry advances the simulated clock; the countdown follows
    store.applyTelemetry({
      window_id: "w", population: "baseline", start: 110, end: 111,
      error_rate: 1, p50_ms: 100, p95_ms: 150, saturation: 50, request_count: 10, alerts: [],
    });
    expect(store.minutesRemaining(store.snapshot.pending[0])).toBe(5);
    store.applyTelemetry({
      window_id: "w2", population: "baseline", start: 130, end: 131,
      error_rate: 1, p50_ms: 100, p95_ms: 150, saturation: 50, request_count: 10, alerts: [],
    });
    expect(store.minutesRemaining(store.snapshot.pending[0])).toBe(0);
  });
});

describe("KPI series", () => {
  it("tracks baseline and canary separately with a bounded window", () => {
    const store = new ConsoleStore();
    for (let i = 0; i < KPI_SERIES_LIMIT + 20; i++) {
      store.applyTelemetry({
        window_id: `b-${i}`, population: "baseline", start: i, end: i + 1,
        error_rate: 1, p50_ms: 100, p95_ms: 160, saturation: 50, request_count: 10, alerts: [],
      });
    }
    store.applyTelemetry({
      window_id: "c-1", population: "canary", start: 500, end: 501,
      error_rate: 4.2, p50_ms: 120, p95_ms: 260, saturation: 52, request_count: 10, alerts: [],
    });
    expect(store.snapshot.baselineSeries).toHaveLength(KPI_SERIES_LIMIT);
    expect(store.snapshot.canarySeries).toHaveLength(1);
    expect(store.snapshot.canarySeries[0].errorRate).toBeCloseTo(4.2);
  });
});

describe("decision filters", () => {
  it("filters conjunctively by stage, outcome, and override flag", () => {
    const store = new ConsoleStore();
    store.applyLedgerEntry(decisionEntry(0));
    store.applyLedgerEntry(decisionEntry(1, { stage: "security_gate", policy_outcome: "DENY", final_action: "none" }));
    store.applyLedgerEntry(decisionEntry(2, { human_overridden: true, final_action: "pause" }));
    store.setFilters({ stage: "canary_analysis" });
    expect(store.filteredDecisions()).toHaveLength(2);
    store.setFilters({ overriddenOnly: true });
    expect(store.filteredDecisions()).toHaveLength(1);
    store.setFilters({ stage: null, overriddenOnly: false, outcome: "DENY" });
    expect(store.filteredDecisions().map((d) => d.id)).toEqual(["d-1"]);
  });
});

describe("explainability join", () => {
  it("collects rule traces from audits sharing a trace id", () => {
    const store = new ConsoleStore();
    store.applyLedgerEntry(
      decisionEntry(0, { policy_outcome: "DENY", final_action: "none", trace_ids: ["trace-9"] }),
    );
    store.applyLedgerEntry(
      auditEntry(1, "policy_denial", {
        rules: [{
          rule_id: "noisy_alert_hold",
          rule_kind: "hard",
          observations: [{ field: "noisy_alerts", observed: true, op: "eq", bound: true }],
        }],
      }, ["trace-9"]),
    );
    const decision = store.decisionById("d-0")!;
    const rules = store.explainRules(decision);
    expect(rules).toHaveLength(1);
    expect(rules[0].rule_id).toBe("noisy_alert_hold");
    expect(rules[0].source).toBe("policy_denial");
  });
});
