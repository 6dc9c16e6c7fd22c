// End-to-end: drive a live accelerated run through the console's own API
// client, store, and panel renderer. Spawns `pipekeeper serve` and talks to
// it exactly the way the browser bundle does.

import { spawn, type ChildProcess } from "node:child_process";
import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api";
import { verifyChain } from "../src/chain";
import { ConsoleStore } from "../src/store";
import { renderExplainability } from "../src/views";
import type { AuditPayload, DecisionPayload, LedgerEntry } from "../src/types";
import { isDecision } from "../src/types";

const TOKEN = "e2e-token";
const PORT = 7391;
const HERE = dirname(fileURLToPath(import.meta.url));
const REPO_ROOT = join(HERE, "..", "..");

let server: ChildProcess;
const api = new ApiClient({ baseUrl: `http://127.0.0.1:${PORT}`, token: TOKEN });

async function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

async function waitFor<T>(
  probe: () => Promise<T | null>,
  what: string,
  timeoutMs = 60_000,
  intervalMs = 200,
): Promise<T> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      const result = await probe();
      if (result !== null) return result;
    } catch {
      // server not ready yet
    }
    if (Date.now() > deadline) throw new Error(`timed out waiting for ${what}`);
    await sleep(intervalMs);
  }
}

async function allEntries(): Promise<LedgerEntry[]> {
  const body = await api.decisions({ since: 0, limit: 10000 });
  return body.entries;
}

beforeAll(async () => {
  server = spawn(
    "python3",
    [
      "-m", "pipekeeper.cli", "serve", join(HERE, "e2e_scenario.toml"),
      "--seed", "42", "--port", String(PORT), "--realtime-factor", "600",
    ],
    { cwd: REPO_ROOT, env: { ...process.env, PIPEKEEPER_TOKEN: TOKEN }, stdio: "pipe" },
  );
  await waitFor(async () => ((await api.runStatus()).clock >= 0 ? true : null), "server boot", 30_000);
}, 40_000);

afterAll(() => {
  server?.kill("SIGKILL");
});

describe("console end-to-end against a live run", () => {
  let killTick = 0;

  it("approves a pending rollback and sees it execute within one tick", async () => {
    const pending = await waitFor(async () => {
      const body = await api.pendingApprovals();
      const hit = body.pending.find(
        (p) => p.stage === "canary_analysis" && p.action === "rollback",
      );
      return hit ?? null;
    }, "pending rollback approval");

    const queued = await api.resolveApproval(pending.request_id, "approve", undefined, "e2e-operator");
    expect(queued.status).toBe("queued");

    const resolved = await waitFor(async () => {
      const entries = await allEntries();
      const audit = entries
        .map((e) => e.payload)
        .filter((p): p is AuditPayload => p.payload_kind === "audit")
        .find((p) => p.kind === "approval_resolved" && p.data["request_id"] === pending.request_id);
      return audit ?? null;
    }, "approval resolution in the ledger");
    expect(resolved.data["resolution"]).toBe("approved");

    const entries = await allEntries();
    const record = entries
      .map((e) => e.payload)
      .filter(isDecision)
      .find((p) => p.id === resolved.data["decision_id"]);
    expect(record).toBeDefined();
    expect(record!.final_action).toBe("rollback");
    expect(record!.human_overridden).toBe(false);
    // execution is ledgered at the same tick as the resolution: the
    // incident's postmortem (opened when the rollback lands) proves effect
    const postmortem = entries
      .map((e) => e.payload)
      .filter((p): p is AuditPayload => p.payload_kind === "audit")
      .find((p) => p.kind === "postmortem");
    expect(postmortem).toBeDefined();
    expect(postmortem!.tick - resolved.tick).toBeLessThanOrEqual(1);
  }, 90_000);

  it("explains a DENY with the triggering rule and observed-vs-threshold values", async () => {
    const store = new ConsoleStore();
    const entries = await waitFor(async () => {
      const all = await allEntries();
      const hasDenial = all.some(
        (e) => e.payload.payload_kind === "audit" && (e.payload as AuditPayload).kind === "policy_denial",
      );
      return hasDenial ? all : null;
    }, "a policy denial in the ledger");
    for (const entry of entries) store.applyLedgerEntry(entry);

    const denied = store.snapshot.decisions.find((d) => d.policy_outcome === "DENY");
    expect(denied).toBeDefined();
    const rules = store.explainRules(denied as DecisionPayload);
    expect(rules.length).toBeGreaterThan(0);
    const noisy = rules.find((r) => r.rule_id === "noisy_alert_hold");
    expect(noisy).toBeDefined();
    expect(noisy!.observations[0].field).toBe("noisy_alerts");

    const html = renderExplainability(denied as DecisionPayload, rules);
    expect(html).toContain("noisy_alert_hold");
    expect(html).toContain("observed");
    expect(html).toContain("threshold");
    expect(html).toContain("DENY");
  }, 60_000);

  it("kill switch stops autonomous final actions; chain still verifies", async () => {
    const queued = await api.killSwitch(true, "e2e-operator");
    expect(queued.status).toBe("queued");
    await waitFor(async () => ((await api.tier()).kill_switch_engaged ? true : null), "kill switch engage");
    killTick = (await api.runStatus()).clock;

    // let the run reach the second commit's decision point while killed
    await waitFor(async () => ((await api.runStatus()).clock > 170 ? true : null), "post-kill activity", 90_000);

    const entries = await allEntries();
    const payloads = entries.map((e) => e.payload);
    const postKillRecommendations = payloads.filter(
      (p): p is AuditPayload =>
        p.payload_kind === "audit" && p.kind === "recommendation" && p.tick > killTick,
    );
    expect(postKillRecommendations.length).toBeGreaterThan(0);
    const postKillExecutions = payloads
      .filter(isDecision)
      .filter((p) => p.tick > killTick && p.final_action !== "none");
    expect(postKillExecutions).toHaveLength(0);

    const verdict = await verifyChain(entries);
    expect(verdict.ok).toBe(true);
    expect(verdict.checked).toBe(entries.length);
  }, 120_000);
});
