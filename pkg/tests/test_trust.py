from __future__ import annotations

import pytest

from pipekeeper.model import Stage, Verdict
from pipekeeper.trust import (
    AUTHORITY_APPROVAL,
    AUTHORITY_AUTONOMOUS,
    AUTHORITY_RECOMMEND,
    KIND_APPROVAL,
    KIND_AUTONOMOUS,
    KIND_RECOMMENDATION,
    OutcomeSample,
    TrustError,
    TrustState,
    authority,
    evaluate_transition,
    kill_switch,
    record_outcome,
)


def sample(kind: str, correct: bool, violation: bool = False, ts: int = 0, i: int = 0) -> OutcomeSample:
    return OutcomeSample(f"d-{i}", kind, correct, violation, ts)


def fill(state: TrustState, kind: str, correct_count: int, total: int,
         violations: int = 0) -> TrustState:
    for i in range(total):
        state = record_outcome(
            state,
            sample(kind, correct=i < correct_count, violation=i < violations, i=i),
        )
    return state


class TestAuthority:
    def test_t0_recommends_only(self):
        assert authority("T0", Stage.CANARY_ANALYSIS, "rollback", Verdict.ALLOW) == AUTHORITY_RECOMMEND

    def test_t1_always_needs_approval(self):
        assert authority("T1", Stage.CANARY_ANALYSIS, "rollback", Verdict.ALLOW) == AUTHORITY_APPROVAL

    def test_t2_autonomous_inside_envelope(self):
        assert authority("T2", Stage.CANARY_ANALYSIS, "rollback", Verdict.ALLOW,
                         ramp_pct=15.0) == AUTHORITY_AUTONOMOUS

    def test_t2_escalates_above_ramp_envelope(self):
        assert authority("T2", Stage.CANARY_ANALYSIS, "rollback", Verdict.ALLOW,
                         ramp_pct=25.0) == AUTHORITY_APPROVAL

    def test_t2_escalates_destructive(self):
        assert authority("T2", Stage.INCIDENT_RESPONSE, "rollback", Verdict.ALLOW,
                         destructive=True) == AUTHORITY_APPROVAL

    def test_approval_verdict_dominates_tier(self):
        assert authority("T3", Stage.INCIDENT_RESPONSE, "rollback",
                         Verdict.REQUIRE_APPROVAL) == AUTHORITY_APPROVAL

    def test_deny_never_executes(self):
        for tier in ("T0", "T1", "T2", "T3"):
            assert authority(tier, Stage.CANARY_ANALYSIS, "promote", Verdict.DENY) == AUTHORITY_RECOMMEND

    def test_kill_switch_forces_recommend_only(self):
        assert authority("T3", Stage.CANARY_ANALYSIS, "rollback", Verdict.ALLOW,
                         kill_switch=True) == AUTHORITY_RECOMMEND


class TestRecordOutcome:
    def test_window_grows(self):
        state = fill(TrustState("triage"), KIND_RECOMMENDATION, 30, 30)
        assert len(state.window) == 30

    def test_violation_counter(self):
        state = TrustState("obs", tier="T2")
        state = record_outcome(state, sample(KIND_AUTONOMOUS, True, violation=True))
        assert state.violations_in_window == 1

    def test_kind_mismatch(self):
        with pytest.raises(TrustError) as err:
            record_outcome(TrustState("triage"), sample(KIND_AUTONOMOUS, True))
        assert err.value.code == "kind_tier_mismatch"

    def test_window_cap_evicts_oldest(self):
        state = TrustState("a", window_cap=5)
        state = fill(state, KIND_RECOMMENDATION, 10, 10)
        assert len(state.window) == 5
        assert state.window[0].decision_id == "d-5"


class TestTransitions:
    def test_t0_promotes_at_26_of_30(self):
        state = fill(TrustState("a"), KIND_RECOMMENDATION, 26, 30)
        verdict, new = evaluate_transition(state)
        assert verdict == "promote"
        assert new.tier == "T1"
        assert new.window == ()

    def test_t0_stays_at_25_of_30(self):
        state = fill(TrustState("a"), KIND_RECOMMENDATION, 25, 30)
        verdict, new = evaluate_transition(state)
        assert verdict == "stay"
        assert new.tier == "T0"

    def test_t1_boundary_45_of_50(self):
        stays = fill(TrustState("a", tier="T1"), KIND_APPROVAL, 44, 50)
        assert evaluate_transition(stays)[0] == "stay"
        promotes = fill(TrustState("a", tier="T1"), KIND_APPROVAL, 45, 50)
        verdict, new = evaluate_transition(promotes)
        assert verdict == "promote" and new.tier == "T2"

    def test_t2_boundary_95_of_100_zero_violations(self):
        stays = fill(TrustState("a", tier="T2"), KIND_AUTONOMOUS, 94, 100)
        assert evaluate_transition(stays)[0] == "stay"
        promotes = fill(TrustState("a", tier="T2"), KIND_AUTONOMOUS, 95, 100)
        verdict, new = evaluate_transition(promotes)
        assert verdict == "promote" and new.tier == "T3"

    def test_violation_demotes_even_with_96_successes(self):
        state = fill(TrustState("a", tier="T2"), KIND_AUTONOMOUS, 96, 100, violations=1)
        verdict, new = evaluate_transition(state)
        assert verdict == "demote"
        assert new.tier == "T1"
        assert new.window == ()

    def test_demotion_beats_promotion(self):
        # window satisfies the 95% criterion but contains one violation
        state = fill(TrustState("a", tier="T2"), KIND_AUTONOMOUS, 100, 100, violations=1)
        assert evaluate_transition(state)[0] == "demote"

    def test_insufficient_window_stays(self):
        state = fill(TrustState("a"), KIND_RECOMMENDATION, 29, 29)
        assert evaluate_transition(state)[0] == "stay"

    def test_single_step_per_call(self):
        state = fill(TrustState("a"), KIND_RECOMMENDATION, 30, 30)
        _, state = evaluate_transition(state)
        assert state.tier == "T1"
        # window cleared: cannot promote again without fresh samples
        assert evaluate_transition(state)[0] == "stay"

    def test_calendar_cap_blocks_promotion(self):
        state = fill(TrustState("a"), KIND_RECOMMENDATION, 30, 30)
        verdict, new = evaluate_transition(state, max_tier="T0")
        assert verdict == "stay" and new.tier == "T0"

    def test_t3_has_no_promotion(self):
        state = TrustState("a", tier="T3")
        assert evaluate_transition(state)[0] == "stay"


class TestKillSwitch:
    def test_engage_forces_recommend_only(self):
        state = TrustState("a", tier="T3")
        state, event = kill_switch(state, True, "op-1", now=100)
        assert state.kill_switch_engaged
        assert state.effective_tier == "T0"
        assert event is not None and event.data["operator_id"] == "op-1"
        assert authority(state.effective_tier, Stage.CANARY_ANALYSIS, "rollback",
                         Verdict.ALLOW, kill_switch=state.kill_switch_engaged) == AUTHORITY_RECOMMEND

    def test_release_resets_to_t0(self):
        state = TrustState("a", tier="T3", kill_switch_engaged=True)
        state, event = kill_switch(state, False, "op-1", now=200)
        assert not state.kill_switch_engaged
        assert state.tier == "T0"
        assert event is not None

    def test_double_engage_idempotent(self):
        state = TrustState("a", tier="T2")
        state, first = kill_switch(state, True, "op-1", now=1)
        state2, second = kill_switch(state, True, "op-1", now=2)
        assert first is not None
        assert second is None
        assert state2 == state
