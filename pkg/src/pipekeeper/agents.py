"""Deterministic reference agents behind a pluggable interface: triage,
security, observability (canary + health + incident), feature-flag, and
postmortem. Closed-form heuristics stand in for learned models; every
proposal is a pure function of its input snapshot, which makes ledger
replay exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .model import AgentProposal, PipekeeperError, Stage
from .policy import EvaluationContext, PolicyBundle
from .telemetry import TelemetryWindow


class AgentError(PipekeeperError):
    code = "agent_error"

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class AgentConfig:
    """Heuristic constants, pinned here so counterfactual replay can vary
    them without touching agent code."""

    risk_error_weight: float = 0.6
    risk_latency_weight: float = 0.4
    band_promote: float = 0.3  # risk below this promotes
    band_rollback: float = 0.6  # risk at or above this rolls back
    flakiness_retry: float = 0.5
    flakiness_quarantine: float = 0.8
    flag_step_pp: float = 10.0
    saturation_scale_threshold_pct: float = 85.0
    saturation_delta_threshold_pp: float = 15.0


@dataclass(frozen=True)
class SloConfig:
    error_budget_pp: float = 2.0
    p95_slo_ms: float = 200.0


# --- test history and flakiness ------------------------------------------


@dataclass
class TestHistory:
    """Ordered per-test outcomes tagged with code revision and run id."""

    suite_id: str = "suite"
    runs: dict[str, list[tuple[int, int, bool]]] = field(default_factory=dict)
    quarantined: set[str] = field(default_factory=set)

    def record(self, test_id: str, revision: int, run_id: int, passed: bool) -> None:
        rows = self.runs.setdefault(test_id, [])
        if rows and run_id <= rows[-1][1]:
            raise AgentError("out_of_order_run", f"run {run_id} not after {rows[-1][1]}")
        rows.append((revision, run_id, passed))

    def outcomes(self, test_id: str) -> list[tuple[int, int, bool]]:
        return self.runs.get(test_id, [])


def flakiness_probability(history: TestHistory, test_id: str) -> float:
    """Smoothed flip rate over same-revision consecutive run pairs:
    (flips + 1) / (pairs + 2). Pairs spanning a revision change are
    excluded; the smoothing keeps the estimate strictly inside (0, 1).
    """
    rows = history.outcomes(test_id)
    if not rows:
        raise AgentError("unknown_test", f"no recorded runs for {test_id!r}")
    pairs = 0
    flips = 0
    for (rev_a, _, out_a), (rev_b, _, out_b) in zip(rows, rows[1:]):
        if rev_a != rev_b:
            continue
        pairs += 1
        if out_a != out_b:
            flips += 1
    return (flips + 1) / (pairs + 2)


# --- KPI deltas and canary risk -------------------------------------------


@dataclass(frozen=True)
class KpiDeltas:
    error_rate_delta_pp: float
    p95_latency_baseline_ms: float
    p95_latency_canary_ms: float
    latency_delta_pct: float
    saturation_delta_pp: float
    sample_sizes: tuple[int, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "error_rate_delta_pp": self.error_rate_delta_pp,
            "p95_latency_baseline_ms": self.p95_latency_baseline_ms,
            "p95_latency_canary_ms": self.p95_latency_canary_ms,
            "latency_delta_pct": self.latency_delta_pct,
            "saturation_delta_pp": self.saturation_delta_pp,
            "sample_sizes": list(self.sample_sizes),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "KpiDeltas":
        return cls(
            error_rate_delta_pp=d["error_rate_delta_pp"],
            p95_latency_baseline_ms=d["p95_latency_baseline_ms"],
            p95_latency_canary_ms=d["p95_latency_canary_ms"],
            latency_delta_pct=d["latency_delta_pct"],
            saturation_delta_pp=d["saturation_delta_pp"],
            sample_sizes=tuple(d["sample_sizes"]),
        )


def compute_kpi_deltas(baseline: TelemetryWindow, canary: TelemetryWindow) -> KpiDeltas:
    """Canary-minus-baseline KPI deltas over one shared interval."""
    if baseline.request_count < 1 or canary.request_count < 1:
        raise AgentError("empty_window", "both windows need at least one sample")
    if (baseline.start, baseline.end) != (canary.start, canary.end):
        raise AgentError("misaligned_windows", "windows cover different intervals")
    return KpiDeltas(
        error_rate_delta_pp=canary.error_rate - baseline.error_rate,
        p95_latency_baseline_ms=baseline.p95_ms,
        p95_latency_canary_ms=canary.p95_ms,
        latency_delta_pct=(canary.p95_ms - baseline.p95_ms) / baseline.p95_ms * 100.0,
        saturation_delta_pp=canary.saturation - baseline.saturation,
        sample_sizes=(baseline.request_count, canary.request_count),
    )


def _clamp(x: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, x))


def canary_risk(d: KpiDeltas, slo: SloConfig, config: AgentConfig = AgentConfig()) -> float:
    """Weighted degradation score in [0, 1]: error-delta pressure against the
    2pp budget plus p95 overshoot beyond the SLO."""
    error_term = max(0.0, d.error_rate_delta_pp / slo.error_budget_pp)
    latency_term = max(0.0, (d.p95_latency_canary_ms - slo.p95_slo_ms) / slo.p95_slo_ms)
    return _clamp(config.risk_error_weight * error_term + config.risk_latency_weight * latency_term, 0.0, 1.0)


def _band_confidence(r: float, config: AgentConfig) -> float:
    margin = min(abs(r - config.band_promote), abs(r - config.band_rollback))
    return _clamp(0.5 + margin * 2.0, 0.5, 1.0)


# --- agents -----------------------------------------------------------------

AGENT_VERSION = "1.0.0"


class Agent:
    """Pluggable decision agent: identity, stage capability, and a pure
    propose(snapshot) function."""

    agent_id = "agent"
    model_id = "heuristic-v1"
    capability: frozenset[Stage] = frozenset()

    def __init__(self, config: AgentConfig = AgentConfig(), agent_version: str = AGENT_VERSION):
        self.config = config
        self.agent_version = agent_version

    def propose(self, snapshot: Mapping[str, Any]) -> AgentProposal:
        raise NotImplementedError

    def _proposal(self, stage: Stage, action: str, confidence: float,
                  evidence: Sequence[str], rationale: str, trace_id: str) -> AgentProposal:
        return AgentProposal(
            stage=stage,
            action=action,
            confidence=round(confidence, 6),
            evidence=tuple(evidence),
            rationale=rationale,
            trace_id=trace_id,
            agent_id=self.agent_id,
            agent_version=self.agent_version,
            model_id=self.model_id,
        )


class TriageAgent(Agent):
    """Flaky-test detection with structured retry/quarantine proposals."""

    agent_id = "triage"
    model_id = "heuristic-triage-v1"
    capability = frozenset({Stage.TEST_FAILURES})

    def propose(self, snapshot: Mapping[str, Any]) -> AgentProposal:
        f = snapshot["flakiness"]
        budget_left = snapshot.get("quarantine_budget_left", 0)
        coverage_changed = snapshot.get("coverage_changed", False)
        cfg = self.config
        if f >= cfg.flakiness_quarantine and budget_left > 0:
            action = "quarantine"
        elif cfg.flakiness_retry <= f < cfg.flakiness_quarantine and not coverage_changed:
            action = "retry"
        else:
            action = "fail"
        margin = min(abs(f - cfg.flakiness_retry), abs(f - cfg.flakiness_quarantine))
        confidence = _clamp(0.5 + margin, 0.5, 1.0)
        evidence = [
            f"flakiness {f:.3f} over {snapshot.get('history_runs', 0)} runs",
            f"quarantine budget left: {budget_left}",
        ]
        rationale = f"test {snapshot.get('test_id', '?')} classified for {action} at flakiness {f:.3f}"
        return self._proposal(Stage.TEST_FAILURES, action, confidence, evidence, rationale,
                              snapshot.get("trace_id", ""))


def triage_propose(
    failures: Iterable[str],
    history: TestHistory,
    quarantine_budget_left: int,
    *,
    coverage_changed: bool = False,
    agent: TriageAgent | None = None,
    trace_prefix: str = "triage",
) -> list[tuple[AgentProposal, dict[str, Any]]]:
    """One proposal per failing test, paired with the snapshot it came from.

    The budget is consumed as quarantine proposals are produced, so a batch
    cannot overspend it.
    """
    agent = agent or TriageAgent()
    budget = quarantine_budget_left
    out = []
    for test_id in sorted(failures):
        f = flakiness_probability(history, test_id)
        snapshot = {
            "stage": Stage.TEST_FAILURES.value,
            "test_id": test_id,
            "flakiness": round(f, 6),
            "history_runs": len(history.outcomes(test_id)),
            "coverage_changed": coverage_changed,
            "quarantine_budget_left": budget,
            "trace_id": f"{trace_prefix}-{test_id}",
        }
        proposal = agent.propose(snapshot)
        if proposal.action == "quarantine":
            budget -= 1
        out.append((proposal, snapshot))
    return out


class SecurityAgent(Agent):
    """Summarizes vulnerability findings and proposes risk-based gating."""

    agent_id = "security"
    model_id = "heuristic-security-v1"
    capability = frozenset({Stage.SECURITY_GATE})

    def propose(self, snapshot: Mapping[str, Any]) -> AgentProposal:
        findings = snapshot.get("findings", [])
        ids = [f["cve_id"] for f in findings]
        critical = [f for f in findings if f["severity"] == "critical"]
        reachable_high = [f for f in findings if f["severity"] == "high" and f.get("reachable")]
        if critical:
            action, confidence = "block", 1.0
            rationale = f"critical vulnerabilities present: {', '.join(f['cve_id'] for f in critical)}"
        elif reachable_high:
            action, confidence = "auto_pr", 0.9
            rationale = (
                "reachable high-severity findings; proposing remediation and recommending a block: "
                + ", ".join(f["cve_id"] for f in reachable_high)
            )
        else:
            action, confidence = "allow", 0.85
            rationale = "no critical or reachable high-severity findings"
        evidence = [f"findings: {', '.join(ids) if ids else 'none'}"]
        return self._proposal(Stage.SECURITY_GATE, action, confidence, evidence, rationale,
                              snapshot.get("trace_id", ""))


def security_propose(findings: Sequence[Mapping[str, Any]], *, agent: SecurityAgent | None = None,
                     trace_id: str = "sec") -> tuple[AgentProposal, dict[str, Any]]:
    agent = agent or SecurityAgent()
    snapshot = {
        "stage": Stage.SECURITY_GATE.value,
        "findings": [dict(f) for f in findings],
        "trace_id": trace_id,
    }
    return agent.propose(snapshot), snapshot


class ObservabilityAgent(Agent):
    """Canary health evaluation, deployment-health checks, and incident
    response proposals, all from telemetry snapshots."""

    agent_id = "observability"
    model_id = "heuristic-canary-v1"
    capability = frozenset({Stage.CANARY_ANALYSIS, Stage.DEPLOYMENT_HEALTH, Stage.INCIDENT_RESPONSE})

    def propose(self, snapshot: Mapping[str, Any]) -> AgentProposal:
        stage = Stage(snapshot["stage"])
        if stage == Stage.CANARY_ANALYSIS:
            return self._propose_canary(snapshot)
        if stage == Stage.DEPLOYMENT_HEALTH:
            return self._propose_health(snapshot)
        return self._propose_incident(snapshot)

    def _propose_canary(self, snapshot: Mapping[str, Any]) -> AgentProposal:
        trace_id = snapshot.get("trace_id", "")
        try:
            d = KpiDeltas.from_dict(snapshot["deltas"])
            slo = SloConfig(**snapshot.get("slo", {}))
            max_error_delta = snapshot.get("max_error_delta_pct", slo.error_budget_pp)
            cfg = self.config

            evidence = [f"error rate {d.error_rate_delta_pp:+.1f}%"]
            if d.p95_latency_canary_ms > slo.p95_slo_ms:
                evidence.insert(0, f"SLO breach: latency > {slo.p95_slo_ms:.0f}ms")

            # hard-path first: a recommender aware of the policy thresholds
            # proposes the forced-safe action itself, at full confidence
            if d.error_rate_delta_pp > max_error_delta:
                rationale = (
                    f"error-rate delta {d.error_rate_delta_pp:+.2f}pp exceeds the "
                    f"{max_error_delta:.1f}pp budget; rolling back"
                )
                return self._proposal(Stage.CANARY_ANALYSIS, "rollback", 1.0, evidence, rationale, trace_id)

            r = canary_risk(d, slo, cfg)
            evidence.append(f"risk score {r:.3f}")
            if r < cfg.band_promote:
                action = "promote"
            elif r < cfg.band_rollback:
                action = "tune_flags" if snapshot.get("flag_attributed") else "pause"
            else:
                action = "rollback"
            confidence = _band_confidence(r, cfg)
            rationale = f"canary risk {r:.3f} maps to {action}"
            return self._proposal(Stage.CANARY_ANALYSIS, action, confidence, evidence, rationale, trace_id)
        except Exception:
            # degraded mode: surface for human review rather than crash
            return self._proposal(
                Stage.CANARY_ANALYSIS, "pause", 0.0,
                ["internal scoring failure"], "canary scoring failed; holding for human review", trace_id or "err",
            )

    def _propose_health(self, snapshot: Mapping[str, Any]) -> AgentProposal:
        saturation = snapshot.get("saturation_pct", 0.0)
        delta = snapshot.get("saturation_delta_pp", 0.0)
        evidence = [f"saturation {saturation:.1f}%", f"saturation delta {delta:+.1f}pp"]
        if snapshot.get("noisy_alerts"):
            evidence.append("alert noise present")
        rationale = "resource saturation above operating bounds; scaling out"
        return self._proposal(Stage.DEPLOYMENT_HEALTH, "auto_scale", 0.85, evidence, rationale,
                              snapshot.get("trace_id", ""))

    def _propose_incident(self, snapshot: Mapping[str, Any]) -> AgentProposal:
        cause = snapshot.get("cause_kind", "unknown")
        if cause == "resource_saturation":
            action, confidence, destructive = "run_runbook", 0.85, False
            rationale = "saturation incident; running the scale-out runbook"
        else:
            action, confidence, destructive = "rollback", 0.9, True
            rationale = f"production regression ({cause}); rolling back the last promotion"
        evidence = [f"incident cause: {cause}", f"destructive: {destructive}"]
        return self._proposal(Stage.INCIDENT_RESPONSE, action, confidence, evidence, rationale,
                              snapshot.get("trace_id", ""))


def decide_canary(
    d: KpiDeltas,
    ctx: EvaluationContext,
    bundle: PolicyBundle,
    *,
    slo: SloConfig = SloConfig(),
    flag_attributed: bool = False,
    trace_id: str = "canary",
    agent: ObservabilityAgent | None = None,
) -> tuple[AgentProposal, dict[str, Any]]:
    """Canary disposition: forced rollback at full confidence past the hard
    error budget, otherwise risk-banded promote/pause/rollback with
    margin-based confidence. Sub-floor confidence is the policy engine's
    problem, not the agent's."""
    agent = agent or ObservabilityAgent()
    snapshot = {
        "stage": Stage.CANARY_ANALYSIS.value,
        "deltas": d.to_dict(),
        "slo": {"error_budget_pp": slo.error_budget_pp, "p95_slo_ms": slo.p95_slo_ms},
        "max_error_delta_pct": bundle.max_error_delta_pct,
        "flag_attributed": flag_attributed,
        "trace_id": trace_id,
    }
    return agent.propose(snapshot), snapshot


class FlagAgent(Agent):
    """Feature-flag ramp controller driven by per-segment health."""

    agent_id = "flags"
    model_id = "heuristic-flags-v1"
    capability = frozenset({Stage.FEATURE_FLAGS})

    def propose(self, snapshot: Mapping[str, Any]) -> AgentProposal:
        cfg = self.config
        ramp = snapshot["current_ramp_pct"]
        d = KpiDeltas.from_dict(snapshot["deltas"])
        slo = SloConfig(**snapshot.get("slo", {}))
        r = canary_risk(d, slo, cfg)
        if r < cfg.band_promote:
            action = "ramp_up"
            target = min(100.0, ramp + cfg.flag_step_pp)
        elif r < cfg.band_rollback:
            action = "ramp_down"
            target = max(0.0, ramp - cfg.flag_step_pp)
        else:
            action = "disable"
            target = 0.0
        confidence = _band_confidence(r, cfg)
        evidence = [f"segment risk {r:.3f}", f"ramp {ramp:.0f}% -> {target:.0f}%"]
        if action == "ramp_up" and target == ramp:
            evidence.append("ramp saturated at 100%")
        rationale = f"flag segment risk {r:.3f}; {action} toward {target:.0f}%"
        return self._proposal(Stage.FEATURE_FLAGS, action, confidence, evidence, rationale,
                              snapshot.get("trace_id", ""))


def flag_propose(
    segment_deltas: KpiDeltas,
    current_ramp_pct: float,
    *,
    slo: SloConfig = SloConfig(),
    agent: FlagAgent | None = None,
    trace_id: str = "flags",
) -> tuple[AgentProposal, dict[str, Any]]:
    if not (0.0 <= current_ramp_pct <= 100.0):
        raise AgentError("invalid_ramp", f"ramp {current_ramp_pct} outside [0, 100]")
    agent = agent or FlagAgent()
    snapshot = {
        "stage": Stage.FEATURE_FLAGS.value,
        "deltas": segment_deltas.to_dict(),
        "slo": {"error_budget_pp": slo.error_budget_pp, "p95_slo_ms": slo.p95_slo_ms},
        "current_ramp_pct": current_ramp_pct,
        "trace_id": trace_id,
    }
    return agent.propose(snapshot), snapshot


class PostmortemAgent(Agent):
    """Builds incident timelines and machine-applyable remediation records."""

    agent_id = "postmortem"
    model_id = "heuristic-postmortem-v1"
    capability = frozenset({Stage.INCIDENT_RESPONSE})

    def propose(self, snapshot: Mapping[str, Any]) -> AgentProposal:
        incident_id = snapshot.get("incident_id", "?")
        return self._proposal(
            Stage.INCIDENT_RESPONSE, "open_postmortem", 0.95,
            [f"incident {incident_id} resolved"],
            f"opening postmortem for {incident_id}",
            snapshot.get("trace_id", ""),
        )


@dataclass(frozen=True)
class PostmortemReport:
    incident_id: str
    timeline: tuple[dict[str, Any], ...]
    decision_ids: tuple[str, ...]
    mttr_minutes: int | None
    remediation_proposals: tuple[dict[str, Any], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "incident_id": self.incident_id,
            "timeline": list(self.timeline),
            "decision_ids": list(self.decision_ids),
            "mttr_minutes": self.mttr_minutes,
            "remediation_proposals": list(self.remediation_proposals),
        }


def postmortem_build(
    ledger_decisions: Sequence[Mapping[str, Any]],
    incident: Mapping[str, Any] | None,
    incident_id: str,
    *,
    flaky_failure_counts: Mapping[str, int] | None = None,
    detection_lag_threshold: int = 5,
) -> PostmortemReport:
    """Assemble the incident timeline, linked decisions, MTTR, and
    remediation proposals (quarantine repeat offenders, tighten thresholds).

    ledger_decisions are decision payload dicts whose trace ids overlap the
    incident; incident is the run's incident record, or None when missing.
    """
    if incident is None or incident.get("incident_id") != incident_id:
        raise AgentError("unknown_incident", f"incident {incident_id!r} not found")

    timeline: list[dict[str, Any]] = [
        {"t": incident["onset"], "kind": "fault_onset", "detail": incident.get("cause_kind", "unknown")},
    ]
    if incident.get("detected_at") is not None:
        timeline.append({"t": incident["detected_at"], "kind": "detected", "detail": "degradation observed"})
    decision_ids = []
    for rec in ledger_decisions:
        decision_ids.append(rec["id"])
        timeline.append({
            "t": rec["timestamp"],
            "kind": "decision",
            "detail": f"{rec['proposed_action']} -> {rec['final_action']}",
            "decision_id": rec["id"],
            "trace_ids": list(rec.get("trace_ids", [])),
        })
    if incident.get("resolved_at") is not None:
        timeline.append({
            "t": incident["resolved_at"],
            "kind": "resolved",
            "detail": incident.get("resolving_action", "manual"),
        })
    timeline.sort(key=lambda e: (e["t"], e["kind"]))

    mttr = None
    if incident.get("resolved_at") is not None:
        mttr = incident["resolved_at"] - incident["onset"]

    remediation: list[dict[str, Any]] = []
    for test_id, count in sorted((flaky_failure_counts or {}).items()):
        if count >= 3:
            remediation.append({
                "kind": "quarantine_test",
                "target": test_id,
                "details": f"failed in {count} prior runs; quarantine pending stabilization",
            })
    detected = incident.get("detected_at")
    if detected is not None and detected - incident["onset"] > detection_lag_threshold:
        remediation.append({
            "kind": "tighten_threshold",
            "target": "max_error_delta_pct",
            "details": f"detection lagged onset by {detected - incident['onset']} min; consider a tighter budget",
        })

    return PostmortemReport(
        incident_id=incident_id,
        timeline=tuple(timeline),
        decision_ids=tuple(decision_ids),
        mttr_minutes=mttr,
        remediation_proposals=tuple(remediation),
    )


def build_agents(config: AgentConfig = AgentConfig(), agent_version: str = AGENT_VERSION) -> dict[Stage, Agent]:
    """Default stage-to-agent routing used by the orchestrator and replay."""
    triage = TriageAgent(config, agent_version)
    security = SecurityAgent(config, agent_version)
    observability = ObservabilityAgent(config, agent_version)
    flags = FlagAgent(config, agent_version)
    return {
        Stage.TEST_FAILURES: triage,
        Stage.SECURITY_GATE: security,
        Stage.CANARY_ANALYSIS: observability,
        Stage.DEPLOYMENT_HEALTH: observability,
        Stage.INCIDENT_RESPONSE: observability,
        Stage.FEATURE_FLAGS: flags,
    }
