// Pure render functions: state in, HTML out. Keeping these as string
// builders makes them trivially testable without a DOM.

import type { ConsoleState, ExplainRule, KpiPoint } from "./store";
import type { DecisionPayload, PendingApproval } from "./types";
import { ACTION_CATALOG } from "./catalog";

function esc(text: unknown): string {
  return String(text)
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderBanner(state: ConsoleState): string {
  if (state.banner) {
    return `<div class="banner killed" data-testid="banner">${esc(state.banner)} — agents are recommend-only; approvals still flow</div>`;
  }
  return `<div class="banner ok" data-testid="banner">autonomy active</div>`;
}

export function renderTier(state: ConsoleState): string {
  const rows = Object.entries(state.tier.agents)
    .map(
      ([agent, info]) =>
        `<tr><td>${esc(agent)}</td><td class="tier-${esc(info.effective_tier)}">${esc(
          info.effective_tier,
        )}</td><td>${info.window}</td><td>${info.violations_in_window}</td></tr>`,
    )
    .join("");
  const kill = state.tier.kill_switch_engaged ? "ENGAGED" : "off";
  return `
    <h2>Trust tiers <span class="kill">kill switch: ${kill}</span></h2>
    <table><thead><tr><th>agent</th><th>tier</th><th>window</th><th>violations</th></tr></thead>
    <tbody>${rows}</tbody></table>`;
}

export function renderApprovals(state: ConsoleState, minutesRemaining: (a: PendingApproval) => number): string {
  if (state.pending.length === 0) {
    return `<h2>Approval queue</h2><p class="empty" data-testid="approvals-empty">no pending approvals</p>`;
  }
  const rows = state.pending
    .map((a) => {
      const remaining = minutesRemaining(a);
      const urgency = remaining <= 3 ? "urgent" : remaining <= 7 ? "soon" : "calm";
      const overrides = ACTION_CATALOG[a.stage]
        .filter((action) => action !== a.action)
        .map((action) => `<option value="${esc(action)}">${esc(action)}</option>`)
        .join("");
      return `
      <tr data-request="${esc(a.request_id)}" data-testid="approval-row">
        <td>${esc(a.stage)}</td>
        <td><strong>${esc(a.action)}</strong> @ ${a.confidence.toFixed(2)}</td>
        <td>${a.evidence.map(esc).join("<br>")}</td>
        <td class="countdown ${urgency}" data-testid="countdown">${remaining} min</td>
        <td>
          <button data-act="approve" data-request="${esc(a.request_id)}">approve</button>
          <button data-act="deny" data-request="${esc(a.request_id)}">deny</button>
          <select data-override-for="${esc(a.request_id)}"><option value="">override…</option>${overrides}</select>
        </td>
      </tr>`;
    })
    .join("");
  return `<h2>Approval queue (${state.pending.length})</h2>
    <table><thead><tr><th>stage</th><th>proposal</th><th>evidence</th><th>deadline</th><th></th></tr></thead>
    <tbody>${rows}</tbody></table>`;
}

function polyline(points: KpiPoint[], pick: (p: KpiPoint) => number, width: number, height: number, max: number): string {
  if (points.length < 2) return "";
  const t0 = points[0].t;
  const span = Math.max(1, points[points.length - 1].t - t0);
  const coords = points
    .map((p) => {
      const x = ((p.t - t0) / span) * width;
      const y = height - Math.min(1, pick(p) / max) * height;
      return `${x.toFixed(1)},${y.toFixed(1)}`;
    })
    .join(" ");
  return coords;
}

export function renderCharts(state: ConsoleState): string {
  const w = 560;
  const h = 120;
  const maxError = Math.max(
    5,
    ...state.baselineSeries.map((p) => p.errorRate),
    ...state.canarySeries.map((p) => p.errorRate),
  );
  const maxP95 = Math.max(
    300,
    ...state.baselineSeries.map((p) => p.p95),
    ...state.canarySeries.map((p) => p.p95),
  );
  return `
  <h2>Canary vs baseline</h2>
  <div class="charts">
    <figure>
      <figcaption>error rate % (baseline grey, canary orange)</figcaption>
      <svg viewBox="0 0 ${w} ${h}" data-testid="chart-error">
        <polyline fill="none" stroke="#999" points="${polyline(state.baselineSeries, (p) => p.errorRate, w, h, maxError)}"/>
        <polyline fill="none" stroke="#e67e22" points="${polyline(state.canarySeries, (p) => p.errorRate, w, h, maxError)}"/>
      </svg>
    </figure>
    <figure>
      <figcaption>p95 latency ms</figcaption>
      <svg viewBox="0 0 ${w} ${h}" data-testid="chart-p95">
        <polyline fill="none" stroke="#999" points="${polyline(state.baselineSeries, (p) => p.p95, w, h, maxP95)}"/>
        <polyline fill="none" stroke="#e67e22" points="${polyline(state.canarySeries, (p) => p.p95, w, h, maxP95)}"/>
      </svg>
    </figure>
  </div>`;
}

export function renderLedger(state: ConsoleState, decisions: DecisionPayload[]): string {
  const badgeClass = state.chainBadge === "verified" ? "ok" : state.chainBadge === "TAMPERED" ? "bad" : "idle";
  const rows = decisions
    .slice(0, 50)
    .map(
      (d) => `
      <tr data-decision="${esc(d.id)}" data-testid="ledger-row" class="outcome-${esc(d.policy_outcome)}">
        <td>${esc(d.timestamp)}</td><td>${esc(d.stage)}</td>
        <td>${esc(d.proposed_action)} → <strong>${esc(d.final_action)}</strong></td>
        <td>${esc(d.policy_outcome)}</td>
        <td>${d.human_overridden ? "overridden" : ""}</td>
      </tr>`,
    )
    .join("");
  return `
    <h2>Decision ledger
      <span class="chain-badge ${badgeClass}" data-testid="chain-badge">chain: ${esc(state.chainBadge)}</span>
    </h2>
    <div class="filters">
      <select data-filter="stage"><option value="">all stages</option>
        ${Object.keys(ACTION_CATALOG).map((s) => `<option value="${s}">${s}</option>`).join("")}
      </select>
      <select data-filter="outcome"><option value="">all outcomes</option>
        <option>ALLOW</option><option>REQUIRE_APPROVAL</option><option>DENY</option>
      </select>
      <label><input type="checkbox" data-filter="overridden"> overridden only</label>
    </div>
    <table><thead><tr><th>time</th><th>stage</th><th>action</th><th>outcome</th><th></th></tr></thead>
    <tbody>${rows}</tbody></table>`;
}

export function renderExplainability(decision: DecisionPayload | undefined, rules: ExplainRule[]): string {
  if (!decision) {
    return `<h2>Decision detail</h2><p class="empty">select a decision from the ledger</p>`;
  }
  const evidence = (decision.inputs["logs"] as string[] | undefined) ?? [];
  const ruleRows = rules
    .map((rule) => {
      const obs = rule.observations
        .map(
          (o) =>
            `<li data-testid="observation">${esc(o.field)}: observed <strong>${esc(o.observed)}</strong> ${esc(
              o.op,
            )} threshold <strong>${esc(o.bound)}</strong></li>`,
        )
        .join("");
      const chip = rule.rule_kind === "soft" ? "warning" : rule.rule_kind;
      return `<div class="rule chip-${chip}" data-testid="rule" data-rule-id="${esc(rule.rule_id)}">
        <strong>${esc(rule.rule_id)}</strong> <em>(${esc(chip)})</em><ul>${obs}</ul></div>`;
    })
    .join("");
  const traces = decision.trace_ids
    .map((t) => `<a href="#trace-${esc(t)}" data-testid="trace-link">${esc(t)}</a>`)
    .join(" ");
  return `
    <h2>Decision detail — ${esc(decision.id)}</h2>
    <dl>
      <dt>stage</dt><dd>${esc(decision.stage)}</dd>
      <dt>proposed</dt><dd>${esc(decision.proposed_action)} @ confidence ${decision.confidence.toFixed(2)}</dd>
      <dt>policy</dt><dd data-testid="detail-outcome">${esc(decision.policy_outcome)} (${esc(decision.policy_version)})</dd>
      <dt>final</dt><dd>${esc(decision.final_action)}${decision.human_overridden ? " (human override)" : ""}</dd>
      <dt>rationale</dt><dd>${esc(decision.rationale)}</dd>
      <dt>evidence</dt><dd><ul>${evidence.map((e) => `<li data-testid="evidence">${esc(e)}</li>`).join("")}</ul></dd>
      <dt>traces</dt><dd>${traces}</dd>
    </dl>
    <h3>Triggered rules</h3>
    ${ruleRows || '<p class="empty">no rule hits recorded for this decision</p>'}`;
}
