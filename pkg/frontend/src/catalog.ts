// Client-side mirror of the stage action catalog, used to validate
// override actions before they ever reach the API.

import type { StageName } from "./types";

export const ACTION_CATALOG: Record<StageName, readonly string[]> = {
  test_failures: ["retry", "quarantine", "fail"],
  security_gate: ["block", "allow", "auto_pr"],
  canary_analysis: ["promote", "pause", "rollback", "tune_flags"],
  deployment_health: ["auto_scale", "rollback"],
  feature_flags: ["ramp_up", "ramp_down", "disable"],
  incident_response: ["run_runbook", "rollback", "open_postmortem"],
};

export const NO_ACTION = "none";

export function isValidOverride(stage: StageName, action: string): boolean {
  return action === NO_ACTION || ACTION_CATALOG[stage].includes(action);
}
