"""Post-hoc metrics over exported run artifacts: DORA measures, AI-specific
indicators, paired A/B comparison, and counterfactual ledger replay.

Everything here is a pure function of the JSONL exports, so any number in a
summary can be recomputed from the files it cites.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .agents import Agent, build_agents
from .ledger import LedgerEntry, read_export
from .model import DecisionRecord, PipekeeperError, Stage, Verdict
from .policy import EvaluationContext, PolicyBundle, default_bundle, evaluate


class EvaluationError(PipekeeperError):
    code = "evaluation_error"

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class DoraReport:
    lead_time_median_minutes: float | None
    lead_time_mean_minutes: float | None
    deployment_frequency_per_day: float | None
    change_failure_rate: float | None
    mttr_minutes: float | None
    promotions: int
    incidents_resolved: int
    horizon_days: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "lead_time_median_minutes": self.lead_time_median_minutes,
            "lead_time_mean_minutes": self.lead_time_mean_minutes,
            "deployment_frequency_per_day": self.deployment_frequency_per_day,
            "change_failure_rate": self.change_failure_rate,
            "mttr_minutes": self.mttr_minutes,
            "promotions": self.promotions,
            "incidents_resolved": self.incidents_resolved,
            "horizon_days": self.horizon_days,
        }


@dataclass(frozen=True)
class AiReport:
    intervention_accuracy: float | None
    human_override_rate: float | None
    false_positive_rate: float | None
    false_negative_rate: float | None
    policy_violations_blocked: int
    adjudicated: int
    human_touched: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "intervention_accuracy": self.intervention_accuracy,
            "human_override_rate": self.human_override_rate,
            "false_positive_rate": self.false_positive_rate,
            "false_negative_rate": self.false_negative_rate,
            "policy_violations_blocked": self.policy_violations_blocked,
            "adjudicated": self.adjudicated,
            "human_touched": self.human_touched,
        }


@dataclass(frozen=True)
class ReplayReport:
    decisions_replayed: int
    divergence_rate: float
    verdict_divergence: float
    hypothetical_violations: int
    per_stage: Mapping[str, Mapping[str, int]]
    skipped_human_records: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "decisions_replayed": self.decisions_replayed,
            "divergence_rate": self.divergence_rate,
            "verdict_divergence": self.verdict_divergence,
            "hypothetical_violations": self.hypothetical_violations,
            "per_stage": {k: dict(v) for k, v in self.per_stage.items()},
            "skipped_human_records": self.skipped_human_records,
        }


def _median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2 == 1:
        return float(ordered[mid])
    return (ordered[mid - 1] + ordered[mid]) / 2.0


def load_events(path: str | Path) -> list[dict[str, Any]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def dora_metrics(events: Iterable[Mapping[str, Any]]) -> DoraReport:
    """The four delivery measures, straight from the run's event log.

    Lead time is promotion minus commit per promoted change; CFR counts
    promotions that were rolled back in prod or carried/earned an incident;
    MTTR averages resolution minus true fault onset over resolved incidents.
    """
    events = list(events)
    meta = next((e for e in events if e["type"] == "run_meta"), None)
    horizon_days = (meta["horizon_minutes"] / (24 * 60)) if meta else 0.0

    leads = [e["lead_minutes"] for e in events if e["type"] == "promoted"]
    promoted_at = {e["run_id"]: e["t"] for e in events if e["type"] == "promoted"}
    prod_rollbacks = {e["run_id"] for e in events if e["type"] == "rolled_back" and e["phase"] == "prod"}

    incident_onsets: dict[str, tuple[int, str | None]] = {}
    for e in events:
        if e["type"] == "incident_opened":
            incident_onsets[e["incident_id"]] = (e["t"], e.get("run_id"))
    mttrs = [e["mttr"] for e in events if e["type"] == "incident_resolved"]
    resolved_ids = {e["incident_id"] for e in events if e["type"] == "incident_resolved"}

    horizon = meta.get("attribution_horizon_minutes", 30) if meta else 30
    failed = set(prod_rollbacks)
    for incident_id, (onset, run_id) in incident_onsets.items():
        if run_id in promoted_at:
            promo_t = promoted_at[run_id]
            resolved_t = next(
                (e["t"] for e in events
                 if e["type"] == "incident_resolved" and e["incident_id"] == incident_id),
                None,
            )
            still_live_at_promo = resolved_t is None or resolved_t > promo_t
            opened_after = onset >= promo_t
            if (opened_after and onset <= promo_t + horizon) or (onset < promo_t and still_live_at_promo):
                failed.add(run_id)

    promotions = len(leads)
    if promotions == 0:
        return DoraReport(None, None, None, None,
                          (sum(mttrs) / len(mttrs)) if mttrs else None,
                          0, len(resolved_ids), horizon_days)
    return DoraReport(
        lead_time_median_minutes=_median(leads),
        lead_time_mean_minutes=sum(leads) / promotions,
        deployment_frequency_per_day=promotions / horizon_days if horizon_days else None,
        change_failure_rate=len(failed & set(promoted_at)) / promotions,
        mttr_minutes=(sum(mttrs) / len(mttrs)) if mttrs else None,
        promotions=promotions,
        incidents_resolved=len(resolved_ids),
        horizon_days=horizon_days,
    )


def ai_metrics(ledger_entries: Sequence[LedgerEntry], events: Iterable[Mapping[str, Any]]) -> AiReport:
    """AI-specific indicators from the ledger plus scenario adjudications.

    Adjudications come from the run's oracle (injected fault state), not the
    agents' self-reports.
    """
    events = list(events)
    adjudications = [e for e in events if e["type"] == "adjudication"]
    if any(e["type"] == "decision" for e in events) and not adjudications:
        has_agent_decisions = any(
            isinstance(obj := entry.parsed(), DecisionRecord)
            and obj.inputs.get("agent_id") not in (None, "human-operator")
            for entry in ledger_entries
        )
        if has_agent_decisions:
            raise EvaluationError("missing_adjudication", "run has agent decisions but no adjudications")

    correct = sum(1 for a in adjudications if a["correct"])
    accuracy = correct / len(adjudications) if adjudications else None

    human_touched_ids: set[str] = set()
    violations = 0
    records: dict[str, DecisionRecord] = {}
    for entry in ledger_entries:
        obj = entry.parsed()
        if isinstance(obj, DecisionRecord):
            records[obj.id] = obj
        else:
            if obj.kind in ("approval_resolved", "manual_resolution"):
                decision_id = obj.data.get("decision_id")
                if decision_id:
                    human_touched_ids.add(decision_id)
            elif obj.kind == "policy_denial" and obj.data.get("autonomous_attempt"):
                violations += 1

    touched = [records[i] for i in sorted(human_touched_ids) if i in records]
    overrides = sum(1 for r in touched if r.human_overridden)
    override_rate = overrides / len(touched) if touched else None

    protective = [a for a in adjudications if a["protective"]]
    fp = sum(1 for a in protective if not a["true_fault"])
    fp_rate = fp / len(protective) if protective else None

    meta = next((e for e in events if e["type"] == "run_meta"), {})
    horizon = meta.get("attribution_horizon_minutes", 30)
    opened = {e["incident_id"]: e for e in events if e["type"] == "incident_opened"}
    missed = 0
    for incident_id, opened_event in opened.items():
        resolved = next(
            (e for e in events if e["type"] == "incident_resolved" and e["incident_id"] == incident_id),
            None,
        )
        if resolved is None or resolved.get("resolving") == "fault_expired" or resolved["mttr"] > horizon:
            missed += 1
    fn_rate = missed / len(opened) if opened else None

    return AiReport(
        intervention_accuracy=accuracy,
        human_override_rate=override_rate,
        false_positive_rate=fp_rate,
        false_negative_rate=fn_rate,
        policy_violations_blocked=violations,
        adjudicated=len(adjudications),
        human_touched=len(touched),
    )


def replay(
    ledger_entries: Sequence[LedgerEntry],
    agents: Mapping[Stage, Agent] | None = None,
    bundle: PolicyBundle | None = None,
) -> ReplayReport:
    """Re-run every recorded agent decision through (possibly alternate)
    agents and policy, from the recorded input snapshots, executing nothing.
    Self-replay with identical versions diverges nowhere, by construction.
    """
    agents = agents or build_agents()
    bundle = bundle or default_bundle()
    replayed = 0
    action_div = 0
    verdict_div = 0
    hypothetical = 0
    skipped = 0
    per_stage: dict[str, dict[str, int]] = {}

    for entry in ledger_entries:
        obj = entry.parsed()
        if not isinstance(obj, DecisionRecord):
            continue
        inputs = obj.inputs
        if inputs.get("agent_id") in (None, "human-operator"):
            skipped += 1
            continue
        snapshot = inputs.get("metrics")
        context_dict = inputs.get("context")
        if not snapshot or context_dict is None or "stage" not in snapshot:
            raise EvaluationError("insufficient_inputs",
                                  f"record {obj.id} lacks a replayable snapshot")
        stage = Stage(snapshot["stage"])
        proposal = agents[stage].propose(snapshot)
        ctx = EvaluationContext.from_dict(context_dict)
        outcome = evaluate(proposal, ctx, bundle)

        replayed += 1
        stats = per_stage.setdefault(stage.value, {"replayed": 0, "action_divergence": 0,
                                                   "verdict_divergence": 0, "denials": 0})
        stats["replayed"] += 1
        if proposal.action != obj.proposed_action:
            action_div += 1
            stats["action_divergence"] += 1
        if outcome.verdict != obj.policy_outcome:
            verdict_div += 1
            stats["verdict_divergence"] += 1
        if outcome.verdict == Verdict.DENY:
            hypothetical += 1
            stats["denials"] += 1

    return ReplayReport(
        decisions_replayed=replayed,
        divergence_rate=action_div / replayed if replayed else 0.0,
        verdict_divergence=verdict_div / replayed if replayed else 0.0,
        hypothetical_violations=hypothetical,
        per_stage=per_stage,
        skipped_human_records=skipped,
    )


# -- run summaries and A/B comparison ------------------------------------------


def summarize_run(run_dir: str | Path) -> dict[str, Any]:
    """Compute the canonical summary for a run directory from its exports."""
    run_dir = Path(run_dir)
    events = load_events(run_dir / "events.jsonl")
    _, entries = read_export(run_dir / "ledger.jsonl")
    meta = next((e for e in events if e["type"] == "run_meta"), {})
    dora = dora_metrics(events)
    ai = ai_metrics(entries, events)

    human_wait = sum(e["minutes"] for e in events if e["type"] == "human_wait")
    decision_wait = sum(e["minutes"] for e in events if e["type"] == "decision_wait")
    return {
        "scenario": meta.get("scenario"),
        "seed": meta.get("seed"),
        "mode": meta.get("mode"),
        "policy_version": meta.get("policy_version"),
        "dora": dora.to_dict(),
        "ai": ai.to_dict(),
        "human_wait_minutes_total": human_wait,
        "decision_wait_minutes_total": decision_wait,
        "ledger_entries": len(entries),
        "decisions": sum(1 for e in entries if isinstance(e.parsed(), DecisionRecord)),
    }


def write_summary(run_dir: str | Path) -> dict[str, Any]:
    summary = summarize_run(run_dir)
    out = Path(run_dir) / "summary.json"
    out.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _pct_delta(baseline: float | None, augmented: float | None) -> float | None:
    if baseline in (None, 0) or augmented is None:
        return None
    return (augmented - baseline) / baseline * 100.0


def ab_compare(baseline_summary: Mapping[str, Any], augmented_summary: Mapping[str, Any]) -> dict[str, Any]:
    """Paired comparison in the shape of a baseline/augmented/delta table.

    Both runs must share scenario and seed (identical fault schedules).
    """
    for key in ("scenario", "seed"):
        if baseline_summary.get(key) != augmented_summary.get(key):
            raise EvaluationError("unpaired_runs",
                                  f"{key} mismatch: {baseline_summary.get(key)} vs {augmented_summary.get(key)}")
    b_dora = baseline_summary["dora"]
    a_dora = augmented_summary["dora"]

    b_deploys = max(1, b_dora.get("promotions") or 0)
    a_deploys = max(1, a_dora.get("promotions") or 0)
    time_saved = (
        baseline_summary.get("human_wait_minutes_total", 0) / b_deploys
        - augmented_summary.get("decision_wait_minutes_total", 0) / a_deploys
    )

    rows = []
    for label, key, unit in (
        ("Lead Time for Changes", "lead_time_median_minutes", "min"),
        ("Deployment Frequency", "deployment_frequency_per_day", "/day"),
        ("Change Failure Rate", "change_failure_rate", ""),
        ("MTTR", "mttr_minutes", "min"),
    ):
        rows.append({
            "metric": label,
            "unit": unit,
            "baseline": b_dora.get(key),
            "augmented": a_dora.get(key),
            "delta_pct": _pct_delta(b_dora.get(key), a_dora.get(key)),
        })
    ai = augmented_summary["ai"]
    return {
        "scenario": augmented_summary.get("scenario"),
        "seed": augmented_summary.get("seed"),
        "rows": rows,
        "ai_indicators": {
            "human_override_rate": ai.get("human_override_rate"),
            "intervention_accuracy": ai.get("intervention_accuracy"),
            "policy_violations_blocked": ai.get("policy_violations_blocked"),
            "false_positive_rate": ai.get("false_positive_rate"),
            "false_negative_rate": ai.get("false_negative_rate"),
            "time_saved_per_deployment_minutes": time_saved,
        },
    }


def format_ab_markdown(report: Mapping[str, Any]) -> str:
    lines = [
        "| Metric | Baseline | AI-Augmented | Delta |",
        "| --- | --- | --- | --- |",
    ]
    for row in report["rows"]:
        base = _fmt(row["baseline"], row["unit"])
        aug = _fmt(row["augmented"], row["unit"])
        delta = f"{row['delta_pct']:+.0f}%" if row["delta_pct"] is not None else "-"
        lines.append(f"| {row['metric']} | {base} | {aug} | {delta} |")
    ai = report["ai_indicators"]
    lines.append(f"| Human Override Rate | - | {_fmt_rate(ai['human_override_rate'])} | - |")
    lines.append(f"| Intervention Accuracy | - | {_fmt_rate(ai['intervention_accuracy'])} | - |")
    lines.append(f"| Policy Violations Blocked | - | {ai['policy_violations_blocked']} | - |")
    return "\n".join(lines)


def _fmt(value: float | None, unit: str) -> str:
    if value is None:
        return "-"
    if unit == "min":
        return f"{value:.0f} min"
    if unit == "/day":
        return f"{value:.1f}/day"
    return f"{value * 100:.1f}%"


def _fmt_rate(value: float | None) -> str:
    return f"{value * 100:.1f}%" if value is not None else "-"
