"""Declarative policy engine: versioned bundles of hard/soft/confidence rules
evaluated against proposals with a fixed precedence (hard > confidence > soft).

Bundles load from TOML documents checked into the repo; the default bundle
ships as package data and encodes the stock guardrails (critical-CVE block,
2pp error-delta block, retry cap, 150ms latency warning, 20% ramp envelope,
noisy-alert hold, destructive-op gate, 0.8 confidence floor).
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import Any, Mapping

from .model import (
    AgentProposal,
    AuditEvent,
    PipekeeperError,
    PolicyOutcome,
    Stage,
    TriggeredRule,
    Verdict,
    validate_proposal,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

HARD = "hard"
SOFT = "soft"
CONFIDENCE = "confidence"

_EFFECTS_BY_KIND = {
    HARD: {"deny", "force_action"},
    SOFT: {"warn"},
    CONFIDENCE: {"require_approval"},
}

TIER_ORDER = ("T0", "T1", "T2", "T3")


class PolicyError(PipekeeperError):
    code = "policy_error"

    def __init__(self, code: str, message: str = "", **details: Any):
        super().__init__(message or code, **details)
        self.code = code


@dataclass(frozen=True)
class EvaluationContext:
    """Context fields a rule predicate may reference.

    Units: *_pp fields are percentage points, *_pct are percentages,
    *_ms milliseconds. trust_tier is the proposing agent's effective tier.
    """

    environment: str = "canary"  # canary | preprod | prod
    trust_tier: str = "T0"
    error_rate_delta_pp: float = 0.0
    p95_latency_ms: float = 0.0
    latency_delta_pct: float = 0.0
    saturation_pct: float = 0.0
    critical_cve_count: int = 0
    high_cve_count: int = 0
    reachable_high_cve: bool = False
    retry_count_so_far: int = 0
    flakiness_probability: float = 0.0
    coverage_changed: bool = False
    quarantine_used: int = 0
    current_ramp_pct: float = 0.0
    noisy_alerts: bool = False
    destructive: bool = False
    supervisor_review: bool = False

    def as_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in dataclass_fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvaluationContext":
        known = {f.name for f in dataclass_fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


# Fields predicates may reference: context fields plus the proposal's
# stage/action/confidence.
_PREDICATE_FIELDS = frozenset(
    [f.name for f in dataclass_fields(EvaluationContext)] + ["stage", "action", "confidence"]
)

_OPS = {
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
    "in": lambda a, b: a in b,
}


@dataclass(frozen=True)
class PolicyRule:
    rule_id: str
    kind: str  # hard | soft | confidence
    effect: str  # deny | require_approval | warn | force_action
    predicate: Mapping[str, Any]
    stage_filter: str | None = None
    action_filter: tuple[str, ...] | None = None
    environment_filter: tuple[str, ...] | None = None
    force_action: str | None = None
    # forced action applies only at/above this tier (None = always)
    force_min_tier: str | None = None
    description: str = ""


@dataclass(frozen=True)
class PolicyBundle:
    version: str
    rules: tuple[PolicyRule, ...]
    min_confidence: float = 0.8
    retry_cap_preprod: int = 2
    supervisor_retry_extra: int = 1
    max_error_delta_pct: float = 2.0
    latency_warn_ms: float = 150.0
    max_canary_ramp_pct: float = 20.0
    quarantine_budget: int = 2

    def thresholds(self) -> dict[str, float]:
        out = {
            "min_confidence": self.min_confidence,
            "retry_cap_preprod": self.retry_cap_preprod,
            "supervisor_retry_extra": self.supervisor_retry_extra,
            "max_error_delta_pct": self.max_error_delta_pct,
            "latency_warn_ms": self.latency_warn_ms,
            "max_canary_ramp_pct": self.max_canary_ramp_pct,
            "quarantine_budget": self.quarantine_budget,
        }
        # derived bound: total retries permitted via the supervisor path
        out["retry_cap_with_supervisor"] = self.retry_cap_preprod + self.supervisor_retry_extra
        return out


_THRESHOLD_KEYS = (
    "min_confidence",
    "retry_cap_preprod",
    "supervisor_retry_extra",
    "max_error_delta_pct",
    "latency_warn_ms",
    "max_canary_ramp_pct",
    "quarantine_budget",
)


def _canonical_rules_digest(declared_version: str, thresholds: Mapping[str, Any], rules: tuple[PolicyRule, ...]) -> str:
    doc = {
        "version": declared_version,
        "thresholds": {k: thresholds[k] for k in sorted(thresholds)},
        "rules": [
            {
                "rule_id": r.rule_id,
                "kind": r.kind,
                "effect": r.effect,
                "predicate": r.predicate,
                "stage_filter": r.stage_filter,
                "action_filter": list(r.action_filter) if r.action_filter else None,
                "environment_filter": list(r.environment_filter) if r.environment_filter else None,
                "force_action": r.force_action,
                "force_min_tier": r.force_min_tier,
            }
            for r in rules
        ],
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _validate_predicate(node: Any, rule_id: str) -> None:
    if not isinstance(node, Mapping):
        raise PolicyError("parse_error", f"rule {rule_id}: predicate node must be a table")
    if "all" in node or "any" in node:
        key = "all" if "all" in node else "any"
        children = node[key]
        if not isinstance(children, list):
            raise PolicyError("parse_error", f"rule {rule_id}: {key} must hold a list")
        for child in children:
            _validate_predicate(child, rule_id)
        return
    if "not" in node:
        _validate_predicate(node["not"], rule_id)
        return
    fld = node.get("field")
    if fld not in _PREDICATE_FIELDS:
        raise PolicyError("unknown_field_in_predicate", f"rule {rule_id}: unknown field {fld!r}")
    if node.get("op") not in _OPS:
        raise PolicyError("parse_error", f"rule {rule_id}: unknown op {node.get('op')!r}")
    if "value" not in node and "value_from" not in node:
        raise PolicyError("parse_error", f"rule {rule_id}: comparison needs value or value_from")


def _eval_predicate(node: Mapping[str, Any], scope: Mapping[str, Any], thresholds: Mapping[str, Any],
                    observations: list[dict[str, Any]]) -> bool:
    if "all" in node:
        return all(_eval_predicate(c, scope, thresholds, observations) for c in node["all"])
    if "any" in node:
        hits = [_eval_predicate(c, scope, thresholds, observations) for c in node["any"]]
        return any(hits)
    if "not" in node:
        return not _eval_predicate(node["not"], scope, thresholds, observations)
    fld = node["field"]
    if fld not in scope:
        raise PolicyError("context_missing_field", f"predicate references absent field {fld!r}")
    observed = scope[fld]
    if "value_from" in node:
        bound = thresholds[node["value_from"]]
    else:
        bound = node["value"]
    result = _OPS[node["op"]](observed, bound)
    if result:
        observations.append({"field": fld, "observed": observed, "op": node["op"], "bound": bound})
    return result


def load_bundle(source: str | Path | Mapping[str, Any]) -> PolicyBundle:
    """Parse a policy document into an immutable bundle.

    The bundle version is the declared version plus a digest of the
    canonical rule serialization, so version strings pin rule content.
    """
    if isinstance(source, Mapping):
        doc = dict(source)
    else:
        path = Path(source)
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise PolicyError("parse_error", f"cannot load bundle: {exc}") from exc

    declared = str(doc.get("version", "0.0.0"))
    thr = dict(doc.get("thresholds", {}))
    unknown_thr = set(thr) - set(_THRESHOLD_KEYS)
    if unknown_thr:
        raise PolicyError("parse_error", f"unknown thresholds: {sorted(unknown_thr)}")

    rules: list[PolicyRule] = []
    for raw in doc.get("rules", []):
        kind = raw.get("kind")
        effect = raw.get("effect")
        if kind not in _EFFECTS_BY_KIND:
            raise PolicyError("parse_error", f"rule {raw.get('rule_id')!r}: unknown kind {kind!r}")
        if effect not in _EFFECTS_BY_KIND[kind]:
            raise PolicyError(
                "inconsistent_rule_kind",
                f"rule {raw.get('rule_id')!r}: kind {kind!r} cannot have effect {effect!r}",
            )
        predicate = raw.get("predicate", {})
        _validate_predicate(predicate, raw.get("rule_id", "?"))
        if effect == "force_action" and not raw.get("force_action"):
            raise PolicyError("parse_error", f"rule {raw.get('rule_id')!r}: force_action effect needs an action")
        rules.append(
            PolicyRule(
                rule_id=raw["rule_id"],
                kind=kind,
                effect=effect,
                predicate=predicate,
                stage_filter=raw.get("stage"),
                action_filter=tuple(raw["actions"]) if raw.get("actions") else None,
                environment_filter=tuple(raw["environments"]) if raw.get("environments") else None,
                force_action=raw.get("force_action"),
                force_min_tier=raw.get("force_min_tier"),
                description=raw.get("description", ""),
            )
        )

    bundle_fields = {k: thr[k] for k in _THRESHOLD_KEYS if k in thr}
    provisional = PolicyBundle(version=declared, rules=tuple(rules), **bundle_fields)
    digest = _canonical_rules_digest(declared, provisional.thresholds(), provisional.rules)
    return PolicyBundle(version=f"{declared}+{digest}", rules=provisional.rules, **bundle_fields)


_DEFAULT_BUNDLE_PATH = Path(__file__).parent / "data" / "default_policy.toml"


def default_bundle() -> PolicyBundle:
    """The stock guardrail bundle shipped with the package."""
    return load_bundle(_DEFAULT_BUNDLE_PATH)


def _rule_applies(rule: PolicyRule, p: AgentProposal, ctx: EvaluationContext) -> bool:
    if rule.stage_filter is not None and rule.stage_filter != p.stage.value:
        return False
    if rule.action_filter is not None and p.action not in rule.action_filter:
        return False
    if rule.environment_filter is not None and ctx.environment not in rule.environment_filter:
        return False
    return True


def _tier_at_least(tier: str, floor: str) -> bool:
    return TIER_ORDER.index(tier) >= TIER_ORDER.index(floor)


def evaluate(p: AgentProposal, ctx: EvaluationContext, bundle: PolicyBundle) -> PolicyOutcome:
    """Evaluate one proposal. Pure: same inputs always yield the same outcome.

    Precedence is total: any matching hard rule denies (optionally forcing a
    safe action); otherwise any matching confidence rule (including the
    built-in confidence floor and the destructive-op gate) requires approval;
    otherwise the proposal is allowed, carrying soft-rule warnings.
    """
    validate_proposal(p)
    scope = dict(ctx.as_dict())
    scope["stage"] = p.stage.value
    scope["action"] = p.action
    scope["confidence"] = p.confidence
    thresholds = bundle.thresholds()

    triggered: list[TriggeredRule] = []
    hard_hit = False
    confidence_hit = False
    forced: str | None = None

    for rule in bundle.rules:
        if not _rule_applies(rule, p, ctx):
            continue
        observations: list[dict[str, Any]] = []
        if not _eval_predicate(rule.predicate, scope, thresholds, observations):
            continue
        triggered.append(TriggeredRule(rule.rule_id, rule.kind, True, tuple(observations)))
        if rule.kind == HARD:
            hard_hit = True
            if rule.force_action and (
                rule.force_min_tier is None or _tier_at_least(ctx.trust_tier, rule.force_min_tier)
            ):
                forced = rule.force_action
        elif rule.kind == CONFIDENCE:
            confidence_hit = True

    rule_ids = {r.rule_id for r in triggered}

    # Built-in confidence floor: below min_confidence nothing executes
    # without a human, regardless of bundle contents.
    if p.confidence < bundle.min_confidence and "confidence_floor" not in rule_ids:
        confidence_hit = True
        triggered.append(
            TriggeredRule(
                "confidence_floor",
                CONFIDENCE,
                True,
                ({"field": "confidence", "observed": p.confidence, "op": "lt", "bound": bundle.min_confidence},),
            )
        )

    # Built-in destructive-op gate: destructive incident-response actions
    # always need a human unless a bundle rule already covers them.
    if (
        p.stage == Stage.INCIDENT_RESPONSE
        and ctx.destructive
        and "destructive_gate" not in rule_ids
    ):
        confidence_hit = True
        triggered.append(
            TriggeredRule(
                "destructive_gate",
                CONFIDENCE,
                True,
                ({"field": "destructive", "observed": True, "op": "eq", "bound": True},),
            )
        )

    if hard_hit:
        verdict = Verdict.DENY
    elif confidence_hit:
        verdict = Verdict.REQUIRE_APPROVAL
        forced = None
    else:
        verdict = Verdict.ALLOW
        forced = None

    return PolicyOutcome(
        verdict=verdict,
        triggered_rules=tuple(triggered),
        policy_version=bundle.version,
        forced_action=forced,
    )


def audit_denial(outcome: PolicyOutcome, p: AgentProposal, clock: int = 0,
                 autonomous_attempt: bool = False) -> AuditEvent:
    """Structured audit event for a denial or escalation.

    Callers append the event to the ledger; autonomous_attempt marks denials
    that count as policy-violation attempts (agent would have executed).
    """
    if outcome.verdict == Verdict.ALLOW:
        raise PolicyError("precondition_violated", "audit_denial requires DENY or REQUIRE_APPROVAL")
    return AuditEvent(
        kind="policy_denial" if outcome.verdict == Verdict.DENY else "policy_escalation",
        timestamp=clock,
        data={
            "stage": p.stage.value,
            "agent_id": p.agent_id,
            "proposed_action": p.action,
            "confidence": p.confidence,
            "verdict": outcome.verdict.value,
            "policy_version": outcome.policy_version,
            "rules": [
                {"rule_id": r.rule_id, "rule_kind": r.rule_kind, "observations": list(r.observations)}
                for r in outcome.triggered_rules
            ],
            "evidence": list(p.evidence),
            "rationale": p.rationale,
            "autonomous_attempt": autonomous_attempt,
            "forced_action": outcome.forced_action,
        },
        trace_ids=(p.trace_id,),
    )
