// Wire types mirrored from the control-plane API. The console holds no
// authoritative state: everything below arrives over HTTP or the event
// stream.

export type Verdict = "ALLOW" | "REQUIRE_APPROVAL" | "DENY";

export type StageName =
  | "test_failures"
  | "security_gate"
  | "canary_analysis"
  | "deployment_health"
  | "feature_flags"
  | "incident_response";

export interface DecisionPayload {
  payload_kind: "decision";
  id: string;
  timestamp: string;
  tick: number;
  stage: StageName;
  agent_version: string;
  model: string;
  inputs: Record<string, unknown>;
  policy_version: string;
  proposed_action: string;
  confidence: number;
  policy_outcome: Verdict;
  final_action: string;
  human_overridden: boolean;
  rationale: string;
  trace_ids: string[];
}

export interface RuleObservation {
  field: string;
  observed: number | string | boolean;
  op: string;
  bound: number | string | boolean;
}

export interface TriggeredRule {
  rule_id: string;
  rule_kind: "hard" | "soft" | "confidence";
  observations: RuleObservation[];
}

export interface AuditPayload {
  payload_kind: "audit";
  kind: string;
  timestamp: string;
  tick: number;
  data: Record<string, unknown> & { rules?: TriggeredRule[] };
  trace_ids: string[];
}

export type LedgerPayload = DecisionPayload | AuditPayload;

export interface LedgerEntry {
  sequence: number;
  entry_hash_hex: string;
  prev_hash_hex: string;
  payload_text: string;
  payload: LedgerPayload;
}

export interface PendingApproval {
  request_id: string;
  stage: StageName;
  action: string;
  confidence: number;
  evidence: string[];
  rationale: string;
  agent_id: string;
  verdict: Verdict;
  rules: string[];
  created_at: number;
  deadline: number;
  deadline_iso: string;
  minutes_remaining: number;
  run_id: string | null;
  resolution: string;
  trace_id: string;
  now: number;
}

export interface TierState {
  kill_switch_engaged: boolean;
  agents: Record<
    string,
    { tier: string; effective_tier: string; window: number; violations_in_window: number }
  >;
}

export interface TelemetryWindow {
  window_id: string;
  population: "baseline" | "canary";
  start: number;
  end: number;
  error_rate: number;
  p50_ms: number;
  p95_ms: number;
  saturation: number;
  request_count: number;
  alerts: { alert_id: string; noisy: boolean }[];
}

export interface RunStatus {
  scenario: string;
  seed: number;
  mode: string;
  clock: number;
  clock_iso: string;
  horizon_minutes: number;
  pipelines: number;
  promoted: number;
  ledger_entries: number;
  pending_approvals: number;
  kill_switch_engaged: boolean;
  policy_version: string;
  finished: boolean;
}

export function isDecision(p: LedgerPayload): p is DecisionPayload {
  return p.payload_kind === "decision";
}
