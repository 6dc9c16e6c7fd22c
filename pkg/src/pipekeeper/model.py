"""Shared decision vocabulary: stages, action catalog, proposals, policy
outcomes, and the canonical decision record with its byte-stable serialization.

Everything here is a pure value type; nothing holds interior state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Any, Mapping, Sequence


class PipekeeperError(Exception):
    """Base class for domain errors. ``code`` is the stable machine name."""

    code = "error"

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message or self.code)
        self.details = details


class ValidationError(PipekeeperError):
    code = "validation_error"

    def __init__(self, code: str, message: str = "", **details: Any):
        super().__init__(message or code, **details)
        self.code = code


class Stage(str, Enum):
    """The six decision stages of the pipeline."""

    TEST_FAILURES = "test_failures"
    SECURITY_GATE = "security_gate"
    CANARY_ANALYSIS = "canary_analysis"
    DEPLOYMENT_HEALTH = "deployment_health"
    FEATURE_FLAGS = "feature_flags"
    INCIDENT_RESPONSE = "incident_response"


# Allowed actions per stage. Proposals naming any action outside the
# stage's set are rejected by validate_proposal.
ACTION_CATALOG: dict[Stage, frozenset[str]] = {
    Stage.TEST_FAILURES: frozenset({"retry", "quarantine", "fail"}),
    Stage.SECURITY_GATE: frozenset({"block", "allow", "auto_pr"}),
    Stage.CANARY_ANALYSIS: frozenset({"promote", "pause", "rollback", "tune_flags"}),
    Stage.DEPLOYMENT_HEALTH: frozenset({"auto_scale", "rollback"}),
    Stage.FEATURE_FLAGS: frozenset({"ramp_up", "ramp_down", "disable"}),
    Stage.INCIDENT_RESPONSE: frozenset({"run_runbook", "rollback", "open_postmortem"}),
}

ALL_ACTIONS: frozenset[str] = frozenset(a for s in ACTION_CATALOG.values() for a in s)

# Sentinel final_action for decisions that were recorded but not executed.
NO_ACTION = "none"


class Verdict(str, Enum):
    ALLOW = "ALLOW"
    REQUIRE_APPROVAL = "REQUIRE_APPROVAL"
    DENY = "DENY"


# Simulated-clock epoch. All instants are integer minutes from this point;
# wall clock never leaks into records, so runs are reproducible.
SIM_EPOCH = datetime(2025, 1, 1, tzinfo=timezone.utc)


def minutes_to_iso(minutes: int) -> str:
    """Render a simulated instant (minutes since epoch) as ISO-8601 Z time."""
    return (SIM_EPOCH + timedelta(minutes=minutes)).strftime("%Y-%m-%dT%H:%M:%SZ")


def iso_to_minutes(stamp: str) -> int:
    dt = datetime.strptime(stamp, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
    delta = dt - SIM_EPOCH
    return int(delta.total_seconds() // 60)


@dataclass(frozen=True)
class AgentProposal:
    """An agent's proposed action for one decision point."""

    stage: Stage
    action: str
    confidence: float
    evidence: tuple[str, ...] = ()
    rationale: str = ""
    trace_id: str = ""
    agent_id: str = ""
    agent_version: str = ""
    model_id: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "action": self.action,
            "confidence": self.confidence,
            "evidence": list(self.evidence),
            "rationale": self.rationale,
            "trace_id": self.trace_id,
            "stage": self.stage.value,
            "agent_id": self.agent_id,
            "agent_version": self.agent_version,
            "model_id": self.model_id,
        }


@dataclass(frozen=True)
class TriggeredRule:
    rule_id: str
    rule_kind: str  # hard | soft | confidence
    matched: bool = True
    # observed-vs-threshold pairs for explainability panels
    observations: tuple[dict[str, Any], ...] = ()


@dataclass(frozen=True)
class PolicyOutcome:
    """Result of evaluating a proposal against a policy bundle."""

    verdict: Verdict
    triggered_rules: tuple[TriggeredRule, ...]
    policy_version: str
    # Set when a hard rule both denies the proposal and forces a safe action
    # (e.g. forced rollback at T2+); not part of the record serialization.
    forced_action: str | None = None

    def rule_ids(self) -> list[str]:
        return [r.rule_id for r in self.triggered_rules]


@dataclass(frozen=True)
class DecisionRecord:
    """The immutable audit unit of one decision.

    Field set matches the canonical log schema exactly; serialization adds
    nothing and omits nothing.
    """

    id: str
    timestamp: int  # simulated minutes; ISO-8601 when serialized
    stage: Stage
    agent_version: str
    model: str
    inputs: Mapping[str, Any]
    policy_version: str
    proposed_action: str
    confidence: float
    policy_outcome: Verdict
    final_action: str
    human_overridden: bool
    rationale: str
    trace_ids: tuple[str, ...]


# finalize_record resolution kinds.
RESOLUTION_AUTO = "auto"
RESOLUTION_APPROVED = "approved"
RESOLUTION_DENIED = "denied"
RESOLUTION_OVERRIDDEN = "overridden"
RESOLUTION_EXPIRED = "expired"  # approval window elapsed; fallback executes

_RESOLUTION_ALLOWED_VERDICTS = {
    RESOLUTION_AUTO: {Verdict.ALLOW},
    RESOLUTION_APPROVED: {Verdict.ALLOW, Verdict.REQUIRE_APPROVAL},
    RESOLUTION_DENIED: {Verdict.REQUIRE_APPROVAL, Verdict.DENY},
    RESOLUTION_OVERRIDDEN: {Verdict.ALLOW, Verdict.REQUIRE_APPROVAL},
    RESOLUTION_EXPIRED: {Verdict.ALLOW, Verdict.REQUIRE_APPROVAL},
}


def validate_proposal(p: AgentProposal) -> None:
    """Raise ValidationError unless the proposal satisfies every invariant.

    Error codes: unknown_action_for_stage, confidence_out_of_range,
    missing_trace_id.
    """
    allowed = ACTION_CATALOG[p.stage]
    if p.action not in allowed:
        raise ValidationError(
            "unknown_action_for_stage",
            f"action {p.action!r} not allowed at stage {p.stage.value}",
            stage=p.stage.value,
            action=p.action,
        )
    if not (0.0 <= p.confidence <= 1.0):
        raise ValidationError(
            "confidence_out_of_range",
            f"confidence {p.confidence} outside [0, 1]",
            confidence=p.confidence,
        )
    if not p.trace_id:
        raise ValidationError("missing_trace_id", "proposal has no trace_id")


def finalize_record(
    p: AgentProposal,
    outcome: PolicyOutcome,
    resolution: str,
    clock: int,
    *,
    record_id: str,
    override_action: str | None = None,
    fallback_action: str | None = None,
    inputs: Mapping[str, Any] | None = None,
    model: str | None = None,
    extra_trace_ids: Sequence[str] = (),
    rationale: str | None = None,
) -> DecisionRecord:
    """Build the canonical decision record for a resolved proposal.

    Resolution semantics: auto/approved execute the proposed action, denied
    executes nothing (or the policy-forced safe action), overridden executes
    the operator-supplied action, expired executes the stage fallback.
    Raises ValidationError('inconsistent_resolution') for combinations the
    record invariants forbid, e.g. resolution=auto with REQUIRE_APPROVAL.
    """
    validate_proposal(p)
    allowed = _RESOLUTION_ALLOWED_VERDICTS.get(resolution)
    if allowed is None:
        raise ValidationError("inconsistent_resolution", f"unknown resolution {resolution!r}")
    if outcome.verdict not in allowed:
        raise ValidationError(
            "inconsistent_resolution",
            f"resolution {resolution!r} incompatible with verdict {outcome.verdict.value}",
            resolution=resolution,
            verdict=outcome.verdict.value,
        )

    if resolution in (RESOLUTION_AUTO, RESOLUTION_APPROVED):
        final = p.action
    elif resolution == RESOLUTION_DENIED:
        final = outcome.forced_action if outcome.forced_action else NO_ACTION
    elif resolution == RESOLUTION_EXPIRED:
        if fallback_action is None:
            raise ValidationError("inconsistent_resolution", "expired resolution needs a fallback action")
        final = fallback_action
    else:  # overridden
        if override_action is None:
            raise ValidationError("inconsistent_resolution", "overridden resolution needs an action")
        if override_action != NO_ACTION and override_action not in ACTION_CATALOG[p.stage]:
            raise ValidationError(
                "unknown_action_for_stage",
                f"override action {override_action!r} not allowed at {p.stage.value}",
            )
        final = override_action

    if final != NO_ACTION and final not in ACTION_CATALOG[p.stage]:
        raise ValidationError(
            "unknown_action_for_stage",
            f"final action {final!r} not allowed at {p.stage.value}",
        )

    trace_ids = [p.trace_id] + [t for t in extra_trace_ids if t != p.trace_id]
    return DecisionRecord(
        id=record_id,
        timestamp=clock,
        stage=p.stage,
        agent_version=p.agent_version,
        model=model if model is not None else p.model_id,
        inputs=dict(inputs) if inputs is not None else {},
        policy_version=outcome.policy_version,
        proposed_action=p.action,
        confidence=p.confidence,
        policy_outcome=outcome.verdict,
        final_action=final,
        human_overridden=resolution == RESOLUTION_OVERRIDDEN,
        rationale=rationale if rationale is not None else p.rationale,
        trace_ids=tuple(trace_ids),
    )


# Canonical serialization ------------------------------------------------

# Key order is fixed by the log schema; nested objects are key-sorted so
# equal records serialize to equal bytes regardless of construction order.
_RECORD_FIELDS = (
    "id",
    "timestamp",
    "stage",
    "agent_version",
    "model",
    "inputs",
    "policy_version",
    "proposed_action",
    "confidence",
    "policy_outcome",
    "final_action",
    "human_overridden",
    "rationale",
    "trace_ids",
)


def _sort_nested(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {k: _sort_nested(value[k]) for k in sorted(value)}
    if isinstance(value, (list, tuple)):
        return [_sort_nested(v) for v in value]
    return value


def record_to_dict(r: DecisionRecord) -> dict[str, Any]:
    """Plain-dict form of a record, in canonical field order."""
    return {
        "id": r.id,
        "timestamp": minutes_to_iso(r.timestamp),
        "stage": r.stage.value,
        "agent_version": r.agent_version,
        "model": r.model,
        "inputs": _sort_nested(r.inputs),
        "policy_version": r.policy_version,
        "proposed_action": r.proposed_action,
        "confidence": r.confidence,
        "policy_outcome": r.policy_outcome.value,
        "final_action": r.final_action,
        "human_overridden": r.human_overridden,
        "rationale": r.rationale,
        "trace_ids": list(r.trace_ids),
    }


def canonical_serialize(r: DecisionRecord) -> bytes:
    """Byte-stable serialization: fixed key order, compact separators."""
    return json.dumps(record_to_dict(r), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def parse_record(raw: bytes | str | Mapping[str, Any]) -> DecisionRecord:
    """Inverse of canonical_serialize. Rejects unknown or missing fields."""
    if isinstance(raw, (bytes, str)):
        data = json.loads(raw)
    else:
        data = dict(raw)
    extra = set(data) - set(_RECORD_FIELDS)
    missing = set(_RECORD_FIELDS) - set(data)
    if extra:
        raise ValidationError("unknown_record_field", f"unexpected fields: {sorted(extra)}")
    if missing:
        raise ValidationError("missing_record_field", f"missing fields: {sorted(missing)}")
    return DecisionRecord(
        id=data["id"],
        timestamp=iso_to_minutes(data["timestamp"]),
        stage=Stage(data["stage"]),
        agent_version=data["agent_version"],
        model=data["model"],
        inputs=data["inputs"],
        policy_version=data["policy_version"],
        proposed_action=data["proposed_action"],
        confidence=data["confidence"],
        policy_outcome=Verdict(data["policy_outcome"]),
        final_action=data["final_action"],
        human_overridden=data["human_overridden"],
        rationale=data["rationale"],
        trace_ids=tuple(data["trace_ids"]),
    )


@dataclass(frozen=True)
class AuditEvent:
    """Non-decision ledger payload: denials, approvals, kill switch, etc."""

    kind: str
    timestamp: int
    data: Mapping[str, Any]
    trace_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "timestamp": minutes_to_iso(self.timestamp),
            "data": _sort_nested(self.data),
            "trace_ids": list(self.trace_ids),
        }


def serialize_audit_event(e: AuditEvent) -> bytes:
    return json.dumps(e.to_dict(), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def parse_audit_event(raw: bytes | str | Mapping[str, Any]) -> AuditEvent:
    data = json.loads(raw) if isinstance(raw, (bytes, str)) else dict(raw)
    return AuditEvent(
        kind=data["kind"],
        timestamp=iso_to_minutes(data["timestamp"]),
        data=data["data"],
        trace_ids=tuple(data["trace_ids"]),
    )


def parse_payload(raw: bytes | str) -> DecisionRecord | AuditEvent:
    """Parse a ledger payload; decision records and audit events share the
    ledger, distinguished by shape."""
    data = json.loads(raw)
    if "kind" in data:
        return parse_audit_event(data)
    return parse_record(data)
