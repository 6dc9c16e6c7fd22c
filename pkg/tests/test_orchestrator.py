from __future__ import annotations

import json

import pytest

from pipekeeper.ledger import verify_chain
from pipekeeper.model import AuditEvent, DecisionRecord, Stage, Verdict
from pipekeeper.orchestrator import (
    EXPIRY_FALLBACK,
    OrchestratorError,
    SimulationEngine,
    run_simulation,
)
from pipekeeper.scenario import load_scenario
from pipekeeper.trust import AUTHORITY_AUTONOMOUS, authority


def scenario_doc(name="unit", horizon_days=1):
    return {
        "scenario": {"name": name, "horizon_days": horizon_days},
        "commits": {"interarrival_minutes": 480, "first_at_minutes": 30},
        "profiles": {"baseline": {"error_rate_pct": 1.0, "requests_per_window": 100}},
        "suite": {"num_tests": 10, "flaky_tests": 0, "base_pass_prob": 1.0, "quarantine_budget": 1},
        "slo": {"p95_ms": 200.0, "error_budget_pp": 2.0},
        "chaos": {"rate": 0.0},
        "human": {"mode": "model", "augmented_response_minutes": 10},
        "trust": {"phases": [{"start_day": 0, "max_tier": "T2"}], "initial_tier": "T0"},
    }


def spike_fault(onset=70, magnitude=3.2, epoch=0):
    return {"fault_id": "unit-spike", "kind": "error_spike", "magnitude": magnitude,
            "onset": onset, "duration": 240, "target": "canary", "epoch": epoch}


def decisions_of(engine) -> list[DecisionRecord]:
    return [e.parsed() for e in engine.ledger.entries() if isinstance(e.parsed(), DecisionRecord)]


def audits_of(engine, kind=None) -> list[AuditEvent]:
    out = [e.parsed() for e in engine.ledger.entries() if isinstance(e.parsed(), AuditEvent)]
    return [a for a in out if kind is None or a.kind == kind]


class TestHealthyPipeline:
    def test_healthy_commit_promotes_with_allow_record(self):
        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T2"
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        engine.run()
        assert engine.pipelines, "commit should have started a pipeline"
        run = engine.pipelines[0]
        assert run.outcome == "promoted"
        promotes = [r for r in decisions_of(engine)
                    if r.stage == Stage.CANARY_ANALYSIS and r.final_action == "promote"]
        assert promotes and promotes[0].policy_outcome == Verdict.ALLOW
        assert promotes[0].human_overridden is False

    def test_stage_graph_order(self):
        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T2"
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        engine.run()
        names = [s["stage"] for s in engine.pipelines[0].stages]
        assert names == ["lint_build", "tests", "security", "canary"]


class TestFaultHandling:
    def test_t2_autonomous_rollback_follows_detection(self):
        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T2"
        doc["faults"] = {"pinned": [spike_fault()]}
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        engine.run()
        run = engine.pipelines[0]
        assert run.outcome == "rolled_back"
        rollbacks = [r for r in decisions_of(engine) if r.final_action == "rollback"]
        assert rollbacks
        record = rollbacks[0]
        assert record.human_overridden is False
        incident = list(engine.incidents.values())[0]
        assert incident.resolved_at is not None
        # detection-to-action within one observation tick
        assert record.timestamp <= (incident.detected_at or 0) + 1
        assert incident.resolved_at - incident.onset <= 10

    def test_t0_same_fault_is_recommendation_first(self):
        doc = scenario_doc()
        doc["trust"] = {"phases": [{"start_day": 0, "max_tier": "T0"}], "initial_tier": "T0"}
        doc["faults"] = {"pinned": [spike_fault()]}
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        engine.run()
        recs = audits_of(engine, "recommendation")
        assert any(r.data["proposed_action"] == "rollback" and r.data["final_action"] == "none"
                   for r in recs)
        # manual resolution eventually executes the rollback
        run = engine.pipelines[0]
        assert run.outcome == "rolled_back"
        resolved = [r for r in decisions_of(engine) if r.final_action == "rollback"]
        assert resolved and all(isinstance(r.timestamp, int) for r in resolved)

    def test_ledger_before_effect(self):
        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T2"
        doc["faults"] = {"pinned": [spike_fault()]}
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        engine.run()
        rollback_events = [e for e in engine.events if e["type"] == "rolled_back"]
        rollback_records = [r for r in decisions_of(engine) if r.final_action == "rollback"]
        assert rollback_events and rollback_records
        assert rollback_records[0].timestamp <= rollback_events[0]["t"]

    def test_every_incident_gets_a_postmortem(self):
        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T2"
        doc["faults"] = {"pinned": [spike_fault()]}
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        engine.run()
        assert len(engine.postmortems) == len(engine.incidents) == 1
        assert engine.postmortems[0]["incident_id"] == list(engine.incidents)[0]


class TestApprovals:
    def engine_with_pending(self):
        doc = scenario_doc()
        doc["human"] = {"mode": "none"}
        doc["trust"] = {"phases": [{"start_day": 0, "max_tier": "T1"}], "initial_tier": "T1"}
        doc["faults"] = {"pinned": [spike_fault()]}
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        while not engine.pending_approvals() and engine.clock < 200:
            engine.step()
        assert engine.pending_approvals()
        return engine

    def test_approve_executes_next_tick(self):
        engine = self.engine_with_pending()
        request_id = engine.pending_approvals()[0]["request_id"]
        engine.enqueue_command({"kind": "approval", "request_id": request_id,
                                "verdict": "approve", "operator_id": "op"})
        engine.step()
        request = engine.approvals[request_id]
        assert request.resolution == "approved"
        record = engine._record_index[request.decision_id]
        assert record.final_action == request.proposal.action
        assert record.human_overridden is False

    def test_override_sets_flag(self):
        engine = self.engine_with_pending()
        request_id = engine.pending_approvals()[0]["request_id"]
        engine.submit_approval(request_id, "override", "op", override_action="pause")
        request = engine.approvals[request_id]
        record = engine._record_index[request.decision_id]
        assert record.human_overridden is True
        assert record.final_action == "pause"

    def test_submit_unknown_request(self):
        engine = self.engine_with_pending()
        with pytest.raises(OrchestratorError) as err:
            engine.submit_approval("apr-99999", "approve", "op")
        assert "unknown_request" in str(err.value)

    def test_double_resolution_rejected(self):
        engine = self.engine_with_pending()
        request_id = engine.pending_approvals()[0]["request_id"]
        engine.submit_approval(request_id, "approve", "op")
        with pytest.raises(OrchestratorError) as err:
            engine.submit_approval(request_id, "deny", "op")
        assert "already_resolved" in str(err.value)

    def test_expiry_at_exact_deadline_with_fallback(self):
        engine = self.engine_with_pending()
        pending = engine.pending_approvals()[0]
        request_id = pending["request_id"]
        deadline = pending["deadline"]
        while engine.clock < deadline:
            engine.step()
        request = engine.approvals[request_id]
        assert request.resolution == "expired"
        assert request.resolved_at == deadline
        timeouts = audits_of(engine, "approval_timeout")
        assert timeouts and timeouts[0].data["request_id"] == request_id
        assert timeouts[0].data["fallback_action"] == EXPIRY_FALLBACK[Stage.CANARY_ANALYSIS]
        # fallback rollback executed at the deadline tick exactly
        rollback_events = [e for e in engine.events if e["type"] == "rolled_back"]
        assert rollback_events and rollback_events[0]["t"] == deadline

    def test_submit_at_deadline_is_expired(self):
        engine = self.engine_with_pending()
        pending = engine.pending_approvals()[0]
        while engine.clock < pending["deadline"] - 1:
            engine.step()
        engine.clock = pending["deadline"]  # simulate a same-instant submission
        with pytest.raises(OrchestratorError) as err:
            engine.submit_approval(pending["request_id"], "approve", "op")
        assert "expired" in str(err.value)


class TestKillSwitch:
    def test_engage_stops_autonomy_and_logs(self):
        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T2"
        doc["faults"] = {"pinned": [spike_fault()]}
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        for _ in range(40):
            engine.step()
        engine.enqueue_command({"kind": "killswitch", "engage": True, "operator_id": "op-1"})
        engine.step()
        engaged_at = engine.clock
        assert engine.global_kill
        events = audits_of(engine, "killswitch")
        assert events and events[0].data["operator_id"] == "op-1"
        engine.run()
        # no autonomously-executed record after engagement: every executed
        # decision was resolved by a human (approval or manual resolution)
        human_resolved = set()
        for audit in audits_of(engine):
            if audit.kind in ("approval_resolved", "manual_resolution"):
                human_resolved.add(audit.data["decision_id"])
        for record in decisions_of(engine):
            if record.timestamp > engaged_at and record.final_action != "none":
                assert record.id in human_resolved, record

    def test_double_engage_single_event(self):
        doc = scenario_doc()
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        engine.step()
        engine.set_kill_switch(True, "op")
        count = len(audits_of(engine, "killswitch"))
        engine.set_kill_switch(True, "op")
        assert len(audits_of(engine, "killswitch")) == count

    def test_release_resets_tiers(self):
        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T2"
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        engine.step()
        engine.set_kill_switch(True, "op")
        engine.set_kill_switch(False, "op")
        assert all(s.tier == "T0" for s in engine.trust.values())


class TestAuthoritySoundness:
    def test_no_unauthorized_autonomous_actions(self):
        # grep the ledger: every executed action maps to an authority that
        # allows it under the recorded tier and verdict
        doc = scenario_doc(name="sound", horizon_days=2)
        doc["chaos"] = {"rate": 0.1}
        doc["suite"] = {"num_tests": 15, "flaky_tests": 2, "flaky_flip_prob": 0.5,
                        "base_pass_prob": 1.0, "quarantine_budget": 1}
        doc["trust"] = {"phases": [{"start_day": 0, "max_tier": "T2"}]}
        engine = SimulationEngine(load_scenario(doc), seed=11, mode="augmented")
        engine.run()
        human_resolved = set()
        for audit in audits_of(engine):
            if audit.kind in ("approval_resolved", "manual_resolution"):
                human_resolved.add(audit.data.get("decision_id"))
        for record in decisions_of(engine):
            if record.final_action == "none" or record.id in human_resolved:
                continue
            if record.inputs.get("agent_id") == "human-operator":
                continue
            # autonomously executed: must have been ALLOW, or a policy-forced
            # safe action on DENY
            assert record.policy_outcome in (Verdict.ALLOW, Verdict.DENY)
            if record.policy_outcome == Verdict.ALLOW:
                tier = record.inputs["context"]["trust_tier"]
                assert authority(tier, record.stage, record.proposed_action,
                                 Verdict.ALLOW,
                                 ramp_pct=0.0,
                                 destructive=record.inputs["context"]["destructive"],
                                 ) == AUTHORITY_AUTONOMOUS


class TestDeterminismAndPairing:
    def test_same_seed_identical_ledgers(self, tmp_path):
        doc = scenario_doc(name="det")
        doc["chaos"] = {"rate": 0.15}
        doc["suite"] = {"num_tests": 10, "flaky_tests": 1, "flaky_flip_prob": 0.5,
                        "base_pass_prob": 1.0, "quarantine_budget": 1}
        sc = load_scenario(doc)
        run_simulation(sc, 99, "augmented", out_dir=tmp_path / "a")
        run_simulation(sc, 99, "augmented", out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "ledger.jsonl").read_bytes() == (tmp_path / "b" / "ledger.jsonl").read_bytes()
        assert (tmp_path / "a" / "events.jsonl").read_bytes() == (tmp_path / "b" / "events.jsonl").read_bytes()

    def test_arms_share_fault_schedule(self):
        doc = scenario_doc(name="pair")
        doc["chaos"] = {"rate": 0.15}
        sc = load_scenario(doc)
        augmented = SimulationEngine(sc, seed=5, mode="augmented")
        baseline = SimulationEngine(sc, seed=5, mode="baseline")
        assert augmented.faults == baseline.faults

    def test_zero_fault_scenario_same_outcomes(self):
        sc = load_scenario(scenario_doc())
        a = SimulationEngine(sc, seed=3, mode="augmented")
        a.run()
        b = SimulationEngine(sc, seed=3, mode="baseline")
        b.run()
        assert [p.outcome for p in a.pipelines] == [p.outcome for p in b.pipelines]

    def test_baseline_mttr_strictly_larger_for_same_fault(self):
        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T2"
        doc["faults"] = {"pinned": [spike_fault()]}
        sc = load_scenario(doc)
        a = SimulationEngine(sc, seed=3, mode="augmented")
        a.run()
        b = SimulationEngine(sc, seed=3, mode="baseline")
        b.run()
        mttr_a = [i.resolved_at - i.onset for i in a.incidents.values() if i.resolved_at]
        mttr_b = [i.resolved_at - i.onset for i in b.incidents.values() if i.resolved_at]
        assert mttr_a and mttr_b
        assert max(mttr_a) < min(mttr_b)


class TestKillSwitchFallbacks:
    def test_engaged_switch_suppresses_timeout_fallback(self):
        doc = scenario_doc()
        doc["human"] = {"mode": "none"}
        doc["trust"] = {"phases": [{"start_day": 0, "max_tier": "T1"}], "initial_tier": "T1"}
        doc["faults"] = {"pinned": [spike_fault()]}
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        while not engine.pending_approvals() and engine.clock < 200:
            engine.step()
        engine.set_kill_switch(True, "op")
        pending = engine.pending_approvals()[0]
        while engine.clock < pending["deadline"]:
            engine.step()
        request = engine.approvals[pending["request_id"]]
        assert request.resolution == "expired"
        record = engine._record_index[request.decision_id]
        assert record.final_action == "none"


class TestBundleSwap:
    def test_scheduled_swap_changes_policy_version(self, tmp_path):
        strict = tmp_path / "strict.toml"
        strict.write_text('version = "2.0.0"\n[thresholds]\nmin_confidence = 0.95\n')
        doc = scenario_doc()
        doc["policy"] = {"swaps": [{"at_minutes": 40, "bundle": str(strict)}]}
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        original_version = engine.bundle.version
        for _ in range(60):
            engine.step()
        assert engine.bundle.version != original_version
        assert engine.bundle.min_confidence == 0.95
        swaps = audits_of(engine, "policy_swap")
        assert swaps and swaps[0].data["policy_version"] == engine.bundle.version
        # decisions after the swap carry the new version
        late = [r for r in decisions_of(engine) if r.timestamp > 40
                and r.inputs.get("agent_id") != "human-operator"]
        if late:
            assert all(r.policy_version == engine.bundle.version for r in late)


class TestAgentDegradation:
    def test_broken_agent_escalates_instead_of_crashing(self):
        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T2"
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")

        class Exploding:
            agent_id = "observability"
            agent_version = "boom"
            model_id = "boom"

            def propose(self, snapshot):
                raise RuntimeError("kaput")

        engine.agents[Stage.CANARY_ANALYSIS] = Exploding()  # type: ignore[assignment]
        engine.run()  # must not raise
        errors = [e for e in engine.events if e["type"] == "agent_error"]
        assert errors
        degraded = [r for r in decisions_of(engine)
                    if r.stage == Stage.CANARY_ANALYSIS and r.confidence == 0.0]
        assert degraded
        assert all(r.policy_outcome == Verdict.REQUIRE_APPROVAL for r in degraded)


class TestFaultIsolation:
    def test_canary_fault_never_perturbs_baseline_windows(self, tmp_path):
        import json

        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T0"  # nothing executes; fault stays live in canary
        doc["human"] = {"mode": "none"}
        doc["faults"] = {"pinned": [spike_fault(onset=70, magnitude=6.0)]}
        run_simulation(load_scenario(doc), 7, "augmented", out_dir=tmp_path)
        windows = [json.loads(l) for l in (tmp_path / "telemetry.jsonl").read_text().splitlines()]
        during = [w for w in windows if 75 <= w["start"] < 200]
        canary = [w for w in during if w["population"] == "canary"]
        baseline = [w for w in during if w["population"] == "baseline"]
        assert canary and baseline
        canary_mean = sum(w["error_rate"] for w in canary) / len(canary)
        baseline_mean = sum(w["error_rate"] for w in baseline) / len(baseline)
        assert canary_mean > 5.0
        assert baseline_mean < 2.5


class TestLedgerIntegrity:
    def test_run_ledger_chain_verifies(self):
        doc = scenario_doc()
        doc["chaos"] = {"rate": 0.1}
        engine = SimulationEngine(load_scenario(doc), seed=13, mode="augmented")
        engine.run()
        assert verify_chain(engine.ledger.entries()) is None

    def test_violation_denial_audited(self):
        # noisy alerts force a deny on the scale-out reflex at T2
        doc = scenario_doc()
        doc["trust"]["initial_tier"] = "T2"
        doc["faults"] = {"pinned": [
            {"fault_id": "noisy-1", "kind": "noisy_alerts", "magnitude": 25.0,
             "onset": 40, "duration": 120, "target": "baseline", "epoch": -1},
        ]}
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        engine.run()
        denials = audits_of(engine, "policy_denial")
        assert denials
        assert any(d.data["autonomous_attempt"] for d in denials)
        assert any("noisy_alert_hold" in [r["rule_id"] for r in d.data["rules"]] for d in denials)
        # the denial demoted the observability agent
        transitions = audits_of(engine, "tier_transition")
        assert any(t.data["verdict"] == "demote" and t.data["agent_id"] == "observability"
                   for t in transitions)
