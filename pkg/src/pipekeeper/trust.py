"""Per-agent trust tiers: staged autonomy from recommend-only (T0) to
conditional full autonomy (T3), earned over rolling outcome windows and
revocable instantly via the kill switch.

Tier semantics: T0 recommends only; T1 needs approval for everything; T2
acts autonomously inside a bounded envelope (canary ramp <= 20%,
non-destructive) when policy allows; T3 acts autonomously whenever policy
allows. A policy DENY never executes at any tier.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .model import AuditEvent, PipekeeperError, Stage, Verdict

TIERS = ("T0", "T1", "T2", "T3")

# Sample kind recorded at each tier.
KIND_RECOMMENDATION = "recommendation_accuracy"
KIND_APPROVAL = "approval_alignment"
KIND_AUTONOMOUS = "autonomous_success"

_KIND_FOR_TIER = {
    "T0": KIND_RECOMMENDATION,
    "T1": KIND_APPROVAL,
    "T2": KIND_AUTONOMOUS,
    "T3": KIND_AUTONOMOUS,
}

# Promotion criteria per current tier: (window size, required success rate,
# zero-violation requirement).
_PROMOTION = {
    "T0": (30, 0.85, False),
    "T1": (50, 0.90, False),
    "T2": (100, 0.95, True),
}

DEFAULT_WINDOW_CAP = 200
DEFAULT_RAMP_ENVELOPE_PCT = 20.0

AUTHORITY_RECOMMEND = "recommend_only"
AUTHORITY_APPROVAL = "needs_approval"
AUTHORITY_AUTONOMOUS = "autonomous"


class TrustError(PipekeeperError):
    code = "trust_error"

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class OutcomeSample:
    decision_id: str
    kind: str
    correct: bool
    policy_violation_attempt: bool
    timestamp: int


@dataclass(frozen=True)
class TrustState:
    agent_id: str
    tier: str = "T0"
    window: tuple[OutcomeSample, ...] = ()
    kill_switch_engaged: bool = False
    last_transition: int = 0
    window_cap: int = DEFAULT_WINDOW_CAP

    @property
    def violations_in_window(self) -> int:
        return sum(1 for s in self.window if s.policy_violation_attempt)

    @property
    def effective_tier(self) -> str:
        return "T0" if self.kill_switch_engaged else self.tier


def expected_kind(tier: str) -> str:
    return _KIND_FOR_TIER[tier]


def authority(
    tier: str,
    stage: Stage,
    action: str,
    policy_outcome: Verdict,
    *,
    ramp_pct: float = 0.0,
    destructive: bool = False,
    kill_switch: bool = False,
    ramp_envelope_pct: float = DEFAULT_RAMP_ENVELOPE_PCT,
) -> str:
    """Map (tier, policy verdict, envelope) to execution authority.

    The envelope arguments matter only at T2; DENY never executes anywhere.
    """
    if kill_switch:
        return AUTHORITY_RECOMMEND
    if policy_outcome == Verdict.DENY:
        return AUTHORITY_RECOMMEND
    if tier == "T0":
        return AUTHORITY_RECOMMEND
    if tier == "T1":
        return AUTHORITY_APPROVAL
    if policy_outcome != Verdict.ALLOW:
        return AUTHORITY_APPROVAL
    if tier == "T2":
        within_envelope = ramp_pct <= ramp_envelope_pct and not destructive
        return AUTHORITY_AUTONOMOUS if within_envelope else AUTHORITY_APPROVAL
    return AUTHORITY_AUTONOMOUS  # T3


def record_outcome(state: TrustState, sample: OutcomeSample) -> TrustState:
    """Append a sample to the rolling window (oldest evicted past the cap)."""
    if sample.kind != expected_kind(state.tier):
        raise TrustError(
            "kind_tier_mismatch",
            f"sample kind {sample.kind!r} invalid at tier {state.tier}",
        )
    window = state.window + (sample,)
    if len(window) > state.window_cap:
        window = window[-state.window_cap:]
    return replace(state, window=window)


def evaluate_transition(state: TrustState, *, max_tier: str = "T3", now: int = 0) -> tuple[str, TrustState]:
    """Apply the transition criteria to the current window.

    Returns (verdict, new_state) with verdict in {stay, promote, demote}.
    Demotion wins over promotion: one policy-violation attempt at T2/T3
    drops the agent a tier and clears the window. Promotions clear the
    window too (each tier's criteria restart from zero).
    """
    idx = TIERS.index(state.tier)

    # demotion first
    if state.tier in ("T2", "T3") and state.violations_in_window > 0:
        new_tier = TIERS[idx - 1]
        return "demote", replace(state, tier=new_tier, window=(), last_transition=now)

    criteria = _PROMOTION.get(state.tier)
    if criteria is None:
        return "stay", state
    size, rate, zero_violations = criteria
    if TIERS.index(max_tier) <= idx:
        return "stay", state
    if len(state.window) < size:
        return "stay", state
    recent = state.window[-size:]
    successes = sum(1 for s in recent if s.correct)
    if successes / size < rate:
        return "stay", state
    if zero_violations and any(s.policy_violation_attempt for s in recent):
        return "stay", state
    new_tier = TIERS[idx + 1]
    return "promote", replace(state, tier=new_tier, window=(), last_transition=now)


def kill_switch(state: TrustState, engage: bool, operator_id: str, now: int = 0) -> tuple[TrustState, AuditEvent | None]:
    """Engage or release the kill switch.

    Idempotent: re-engaging an engaged switch emits no event. Release drops
    the agent back to T0; autonomy is re-earned through the criteria.
    """
    if engage == state.kill_switch_engaged:
        return state, None
    if engage:
        new_state = replace(state, kill_switch_engaged=True, last_transition=now)
    else:
        new_state = replace(state, kill_switch_engaged=False, tier="T0", window=(), last_transition=now)
    event = AuditEvent(
        kind="killswitch",
        timestamp=now,
        data={
            "agent_id": state.agent_id,
            "engaged": engage,
            "operator_id": operator_id,
            "tier_after": new_state.effective_tier,
        },
    )
    return new_state, event
