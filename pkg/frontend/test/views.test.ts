import { describe, expect, it } from "vitest";

import { isValidOverride } from "../src/catalog";
import { ConsoleStore } from "../src/store";
import { renderApprovals, renderBanner, renderExplainability, renderLedger } from "../src/views";
import type { DecisionPayload, PendingApproval } from "../src/types";

function decision(overrides: Partial<DecisionPayload> = {}): DecisionPayload {
  return {
    payload_kind: "decision",
    id: "d-00007",
    timestamp: "2025-01-01T02:00:00Z",
    tick: 120,
    stage: "canary_analysis",
    agent_version: "1.0.0",
    model: "heuristic-canary-v1",
    inputs: { logs: ["SLO breach: latency > 200ms", "error rate +3.2%"] },
    policy_version: "1.0.0+abc",
    proposed_action: "rollback",
    confidence: 0.92,
    policy_outcome: "ALLOW",
    final_action: "rollback",
    human_overridden: false,
    rationale: "error budget burn",
    trace_ids: ["abc123", "def456"],
    ...overrides,
  };
}

describe("override validation", () => {
  it("accepts catalog actions and the explicit no-op", () => {
    expect(isValidOverride("canary_analysis", "pause")).toBe(true);
    expect(isValidOverride("canary_analysis", "none")).toBe(true);
  });

  it("blocks out-of-catalog actions client-side", () => {
    expect(isValidOverride("security_gate", "rollback")).toBe(false);
    expect(isValidOverride("canary_analysis", "auto_scale")).toBe(false);
  });
});

describe("renderApprovals", () => {
  const approval: PendingApproval = {
    request_id: "apr-00002",
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
    deadline_iso: "x",
    minutes_remaining: 15,
    run_id: "run-1",
    resolution: "pending",
    trace_id: "t",
    now: 100,
  };

  it("shows the countdown and the three verdict controls", () => {
    const store = new ConsoleStore();
    store.setPending([approval], 103);
    const html = renderApprovals(store.snapshot, (a) => store.minutesRemaining(a));
    expect(html).toContain("12 min");
    expect(html).toContain('data-act="approve"');
    expect(html).toContain('data-act="deny"');
    expect(html).toContain("override…");
    // override choices exclude the proposed action and stay in-catalog
    expect(html).toContain('value="pause"');
    expect(html).not.toContain('value="auto_scale"');
  });

  it("renders the empty state", () => {
    const store = new ConsoleStore();
    const html = renderApprovals(store.snapshot, () => 0);
    expect(html).toContain("no pending approvals");
  });
});

describe("renderExplainability", () => {
  it("shows rule id with observed-vs-threshold values", () => {
    const html = renderExplainability(decision({ policy_outcome: "DENY", final_action: "none" }), [
      {
        rule_id: "error_delta_block",
        rule_kind: "hard",
        source: "policy_denial",
        observations: [{ field: "error_rate_delta_pp", observed: 3.2, op: "gt", bound: 2.0 }],
      },
    ]);
    expect(html).toContain("error_delta_block");
    expect(html).toContain("observed <strong>3.2</strong>");
    expect(html).toContain("threshold <strong>2</strong>");
    expect(html).toContain("error rate +3.2%");
  });

  it("renders a warning chip for soft rules", () => {
    const html = renderExplainability(decision(), [
      {
        rule_id: "latency_warn",
        rule_kind: "soft",
        source: "policy_warning",
        observations: [{ field: "p95_latency_ms", observed: 180.0, op: "gt", bound: 150.0 }],
      },
    ]);
    expect(html).toContain("chip-warning");
    expect(html).toContain("latency_warn");
  });

  it("links every trace id", () => {
    const html = renderExplainability(decision(), []);
    expect(html).toContain("#trace-abc123");
    expect(html).toContain("#trace-def456");
  });
});

describe("renderLedger and banner", () => {
  it("shows the chain badge state", () => {
    const store = new ConsoleStore();
    store.setChainBadge("verified");
    const html = renderLedger(store.snapshot, []);
    expect(html).toContain("chain: verified");
  });

  it("banner flips with the kill switch", () => {
    const store = new ConsoleStore();
    expect(renderBanner(store.snapshot)).toContain("autonomy active");
    store.setTier({ kill_switch_engaged: true, agents: {} });
    expect(renderBanner(store.snapshot)).toContain("AUTONOMY DISABLED");
  });
});
