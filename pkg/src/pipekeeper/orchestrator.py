"""Discrete-event pipeline engine.

Runs the stage graph per commit (build, tests, security, canary, promote)
on a 1-minute tick clock, routing every agent proposal through policy
evaluation, trust authority, and the approval channel, and appending every
decision to the hash-chained ledger before its effect applies.

Two arms share one fault schedule per seed: the augmented arm runs the
agents under policy and trust; the baseline arm replaces every agent
touchpoint with a modeled human operator paying detection, triage, and
approval latencies.
"""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from . import trust as trust_mod
from .agents import (
    Agent,
    AgentConfig,
    KpiDeltas,
    SloConfig,
    TestHistory,
    build_agents,
    compute_kpi_deltas,
    postmortem_build,
)
from .ledger import Ledger
from .model import (
    NO_ACTION,
    AgentProposal,
    AuditEvent,
    DecisionRecord,
    PipekeeperError,
    PolicyOutcome,
    Stage,
    Verdict,
    finalize_record,
    minutes_to_iso,
)
from .policy import EvaluationContext, PolicyBundle, audit_denial, default_bundle, evaluate
from .scenario import Scenario
from .telemetry import (
    USER_IMPACTING_KINDS,
    FaultSpec,
    TelemetryWindow,
    derive_stream,
    gen_test_run,
    gen_window,
    schedule_chaos,
)

PROTECTIVE_ACTIONS = frozenset({"rollback", "block", "disable", "fail", "quarantine"})

# safe default executed when an approval expires unanswered
EXPIRY_FALLBACK = {
    Stage.CANARY_ANALYSIS: "rollback",
    Stage.TEST_FAILURES: "fail",
}

_WINDOW_AGG = 5  # sliding windows aggregated for decision inputs


class OrchestratorError(PipekeeperError):
    code = "orchestrator_error"


@dataclass
class ApprovalRequest:
    request_id: str
    proposal: AgentProposal
    outcome: PolicyOutcome
    context: EvaluationContext
    snapshot: Mapping[str, Any]
    created_at: int
    deadline: int
    run_id: str | None
    oracle_action: str
    resolution: str = "pending"  # pending | approved | denied | overridden | expired
    resolved_at: int | None = None
    decision_id: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "stage": self.proposal.stage.value,
            "action": self.proposal.action,
            "confidence": self.proposal.confidence,
            "evidence": list(self.proposal.evidence),
            "rationale": self.proposal.rationale,
            "agent_id": self.proposal.agent_id,
            "verdict": self.outcome.verdict.value,
            "rules": [r.rule_id for r in self.outcome.triggered_rules],
            "created_at": self.created_at,
            "created_at_iso": minutes_to_iso(self.created_at),
            "deadline": self.deadline,
            "deadline_iso": minutes_to_iso(self.deadline),
            "run_id": self.run_id,
            "resolution": self.resolution,
            "trace_id": self.proposal.trace_id,
        }


@dataclass
class Incident:
    incident_id: str
    fault: FaultSpec
    run_id: str | None
    onset: int
    detected_at: int | None = None
    resolved_at: int | None = None
    resolving_action: str = ""
    decision_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "incident_id": self.incident_id,
            "fault_id": self.fault.fault_id,
            "cause_kind": self.fault.kind,
            "run_id": self.run_id,
            "onset": self.onset,
            "detected_at": self.detected_at,
            "resolved_at": self.resolved_at,
            "resolving_action": self.resolving_action,
            "decision_ids": list(self.decision_ids),
        }


@dataclass
class PipelineRun:
    run_id: str
    commit_idx: int
    commit_time: int
    state: str = "queued"  # queued|building|testing|security|awaiting_gate|canary|done
    next_transition: int | None = None
    stages: list[dict[str, Any]] = field(default_factory=list)
    # test stage bookkeeping
    failing_tests: list[str] = field(default_factory=list)
    retry_counts: dict[str, int] = field(default_factory=dict)
    pending_tests: int = 0
    # deployment bookkeeping
    canary_started: int | None = None
    ramp_pct: float = 0.0
    soak_elapsed: int = 0
    paused_until: int | None = None
    promote_pending: bool = False
    promoted_at: int | None = None
    rolled_back_at: int | None = None
    rollback_phase: str = ""  # canary | prod
    failed_stage: str = ""
    outcome: str = ""  # promoted | rolled_back | failed
    # post-promote flag controller
    flag_ramp_pct: float = 0.0
    next_flag_check: int | None = None

    def stage_record(self, name: str, start: int, end: int, outcome: str) -> None:
        self.stages.append({"stage": name, "start": start, "end": end, "outcome": outcome})

    @property
    def terminal(self) -> bool:
        return self.outcome != ""


class SimulationEngine:
    """Single-writer event loop over 1-minute ticks.

    External commands (approvals, kill switch) are enqueued and applied at
    the next tick boundary, which keeps the event order total and the run
    reproducible.
    """

    def __init__(
        self,
        scenario: Scenario,
        seed: int,
        bundle: PolicyBundle | None = None,
        mode: str = "augmented",
        out_dir: str | Path | None = None,
        agent_config: AgentConfig = AgentConfig(),
    ):
        if mode not in ("augmented", "baseline"):
            raise OrchestratorError(f"unknown mode {mode!r}")
        self.scenario = scenario
        self.seed = seed
        self.mode = mode
        self.bundle = bundle or default_bundle()
        self.clock = -1
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        self.ledger = Ledger(self.out_dir / "ledger.jsonl" if self.out_dir else None)
        self._events_fh = (self.out_dir / "events.jsonl").open("w") if self.out_dir else None
        self._telemetry_fh = (self.out_dir / "telemetry.jsonl").open("w") if self.out_dir else None
        self.events: list[dict[str, Any]] = []

        self.agents: dict[Stage, Agent] = build_agents(agent_config)
        agent_ids = sorted({a.agent_id for a in self.agents.values()})
        self.trust: dict[str, trust_mod.TrustState] = {
            a: trust_mod.TrustState(agent_id=a, tier=scenario.initial_tier) for a in agent_ids
        }
        self.global_kill = False

        # deterministic streams
        self._rng_telemetry = derive_stream(seed, "telemetry")
        self._rng_tests = derive_stream(seed, "tests")
        self._rng_flags = derive_stream(seed, "flags")
        rng_faults = derive_stream(seed, "faults")

        commits = scenario.commit_minutes()
        self.commit_minutes = commits
        chaos = schedule_chaos(
            scenario.chaos_rate,
            len(commits),
            rng_faults,
            kinds=scenario.chaos_kinds,
            weights=scenario.chaos_weights,
            epoch_minutes=scenario.commit_interarrival_minutes,
            duration_minutes=scenario.chaos_duration_minutes,
            suite_tests=scenario.suite.tests,
        )
        # re-anchor chaos onsets to actual commit times
        self.faults: list[FaultSpec] = []
        for f in chaos:
            offset = f.onset - f.epoch * scenario.commit_interarrival_minutes
            self.faults.append(_reanchor(f, commits[f.epoch] + offset if f.epoch < len(commits) else f.onset))
        for raw in scenario.pinned_faults:
            self.faults.append(
                FaultSpec(
                    fault_id=raw.get("fault_id", f"pinned-{len(self.faults)}"),
                    kind=raw["kind"],
                    magnitude=float(raw["magnitude"]),
                    onset=int(raw["onset"]),
                    duration=int(raw["duration"]),
                    target=raw["target"],
                    epoch=int(raw.get("epoch", 0)),
                    tests=tuple(raw.get("tests", ())),
                )
            )
        self.faults.sort(key=lambda f: (f.onset, f.fault_id))
        self._mitigated_faults: set[str] = set()
        self._health_proposed: set[str] = set()

        self.pipelines: list[PipelineRun] = []
        self.active_deploy: PipelineRun | None = None
        self.deploy_queue: list[PipelineRun] = []
        self.approvals: dict[str, ApprovalRequest] = {}
        self.incidents: dict[str, Incident] = {}
        self.incident_by_fault: dict[str, str] = {}
        self.postmortems: list[dict[str, Any]] = []
        self.history = TestHistory(suite_id=scenario.suite.suite_id)
        self.test_failure_counts: dict[str, int] = {}
        self.quarantine_budget = scenario.quarantine_budget
        self._prev_outcomes: dict[str, bool] = {}
        self._history_seq = itertools.count()
        self._live_cache: tuple[int, dict[str, list[FaultSpec]]] | None = None
        self._record_index: dict[str, DecisionRecord] = {}
        self._run_by_epoch: dict[int, PipelineRun] = {}
        # canary actions awaiting a human, per run: identical proposals are
        # not re-routed every tick while the first one is pending
        self._pending_canary: dict[str, set[str]] = {}

        # scheduled bundle replacements (the static-cap retry rule's
        # scenario hook): loaded up front, applied atomically at their tick
        from .policy import load_bundle

        self._bundle_swaps: list[tuple[int, PolicyBundle]] = []
        for at_minute, bundle_path in scenario.bundle_swaps:
            swap_path = Path(bundle_path)
            if not swap_path.is_absolute() and scenario.base_dir:
                swap_path = Path(scenario.base_dir) / swap_path
            self._bundle_swaps.append((at_minute, load_bundle(swap_path)))
        self._bundle_swaps.sort(key=lambda s: s[0])

        self._tasks: list[tuple[int, int, Callable[[], None]]] = []
        self._task_seq = itertools.count()
        self._commands: list[dict[str, Any]] = []
        self._ids = {"decision": itertools.count(1), "approval": itertools.count(1),
                     "incident": itertools.count(1), "run": itertools.count(1)}
        self._baseline_aggr: list[TelemetryWindow] = []
        self._canary_aggr: list[TelemetryWindow] = []
        self._decision_latency_total = 0
        self._human_wait_total = 0
        self._last_windows: dict[str, TelemetryWindow] = {}
        self.slo = SloConfig(error_budget_pp=scenario.slo_error_budget_pp, p95_slo_ms=scenario.slo_p95_ms)

        meta = {
            "type": "run_meta",
            "t": 0,
            "scenario": scenario.name,
            "seed": seed,
            "mode": mode,
            "horizon_minutes": scenario.horizon_minutes,
            "policy_version": self.bundle.version,
            "attribution_horizon_minutes": scenario.deploy.attribution_horizon_minutes,
            "commits": len(commits),
            "faults": [f.fault_id for f in self.faults],
        }
        self.events.append(meta)
        if self._events_fh:
            self._events_fh.write(json.dumps(meta, separators=(",", ":"), sort_keys=True) + "\n")

    # -- id and event helpers -------------------------------------------------

    def _next_id(self, kind: str, prefix: str) -> str:
        return f"{prefix}-{next(self._ids[kind]):05d}"

    def _emit(self, event_type: str, **data: Any) -> None:
        event = {"type": event_type, "t": self.clock, **data}
        self.events.append(event)
        if self._events_fh:
            self._events_fh.write(json.dumps(event, separators=(",", ":"), sort_keys=True) + "\n")

    def _emit_window(self, window: TelemetryWindow) -> None:
        self._last_windows[window.population] = window
        if self._telemetry_fh:
            self._telemetry_fh.write(json.dumps(window.to_dict(), separators=(",", ":"), sort_keys=True) + "\n")

    def _schedule(self, at: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._tasks, (max(at, self.clock + 1), next(self._task_seq), fn))

    # -- public control surface ------------------------------------------------

    def enqueue_command(self, command: dict[str, Any]) -> None:
        """Thread-safe-enough single append; applied at the next tick."""
        self._commands.append(command)

    def run(self, until: int | None = None) -> None:
        horizon = self.scenario.horizon_minutes
        end = min(until, horizon) if until is not None else horizon
        while self.clock + 1 < end:
            self.step()
        self.finalize()

    def step(self) -> None:
        self.clock += 1
        t = self.clock
        while self._bundle_swaps and self._bundle_swaps[0][0] <= t:
            _, bundle = self._bundle_swaps.pop(0)
            self.bundle = bundle
            self.ledger.append(AuditEvent(
                kind="policy_swap", timestamp=t, data={"policy_version": bundle.version},
            ))
            self._emit("policy_swap", policy_version=bundle.version)
        self._generate_telemetry(t)
        self._apply_commands()
        self.expire_approvals(t)
        self._run_due_tasks(t)
        if t in self.commit_minutes:
            self._start_pipeline(self.commit_minutes.index(t), t)
        self._advance_pipelines(t)
        self._update_incidents(t)
        if self.mode == "augmented":
            self._observe_canary(t)
            self._monitor_health(t)
            self._run_flag_controllers(t)
        else:
            self._baseline_monitoring(t)

    def finalize(self) -> None:
        for fh in (self._events_fh, self._telemetry_fh):
            if fh:
                fh.close()
        self._events_fh = self._telemetry_fh = None
        self.ledger.close()
        if self.out_dir:
            (self.out_dir / "postmortems.json").write_text(
                json.dumps(self.postmortems, indent=2, sort_keys=True) + "\n"
            )

    # -- telemetry --------------------------------------------------------------

    def _live_faults(self, t: int, population: str) -> list[FaultSpec]:
        """Faults perturbing the given population at minute t.

        Canary-attached faults travel with their change: they hit the canary
        population while the deployment is ramping and the baseline (prod)
        population after promotion, until a rollback reverts the change.
        """
        if self._live_cache is not None and self._live_cache[0] == t:
            return self._live_cache[1][population]
        live: dict[str, list[FaultSpec]] = {"baseline": [], "canary": []}
        for f in self.faults:
            if f.target == "suite" or not f.active_at(t):
                continue
            if f.fault_id in self._mitigated_faults:
                continue
            if f.target == "baseline":
                live["baseline"].append(f)
                continue
            # canary-attached
            run = self._run_for_epoch(f.epoch)
            if run is None or run.rolled_back_at is not None or run.canary_started is None:
                continue
            if run.promoted_at is None:
                live["canary"].append(f)
            else:
                live["baseline"].append(f)
        self._live_cache = (t, live)
        return live[population]

    def _invalidate_live_cache(self) -> None:
        self._live_cache = None

    def _run_for_epoch(self, epoch: int) -> PipelineRun | None:
        return self._run_by_epoch.get(epoch)

    def _generate_telemetry(self, t: int) -> None:
        base = gen_window(
            self.scenario.baseline_profile, "baseline", (t, t + 1),
            self._rng_telemetry, faults=self._live_faults(t, "baseline"),
        )
        self._emit_window(base)
        self._baseline_aggr.append(base)
        if len(self._baseline_aggr) > _WINDOW_AGG:
            self._baseline_aggr.pop(0)
        run = self.active_deploy
        if run and run.canary_started is not None and run.promoted_at is None and not run.terminal:
            canary = gen_window(
                self.scenario.canary_profile, "canary", (t, t + 1),
                self._rng_telemetry, faults=self._live_faults(t, "canary"),
            )
            self._emit_window(canary)
            self._canary_aggr.append(canary)
            if len(self._canary_aggr) > _WINDOW_AGG:
                self._canary_aggr.pop(0)

    def _aggregate(self, windows: list[TelemetryWindow], population: str, t: int) -> TelemetryWindow:
        n = sum(w.request_count for w in windows)
        errors = sum(w.error_rate * w.request_count / 100.0 for w in windows)
        return TelemetryWindow(
            window_id=f"agg-{population}-{t:06d}",
            population=population,
            start=windows[0].start,
            end=windows[-1].end,
            error_rate=(errors / n * 100.0) if n else 0.0,
            p50_ms=sum(w.p50_ms for w in windows) / len(windows),
            p95_ms=sum(w.p95_ms for w in windows) / len(windows),
            saturation=sum(w.saturation for w in windows) / len(windows),
            request_count=n,
            alerts=tuple(a for w in windows for a in w.alerts),
        )

    # -- command handling --------------------------------------------------------

    def _apply_commands(self) -> None:
        commands, self._commands = self._commands, []
        for cmd in commands:
            try:
                if cmd["kind"] == "approval":
                    self.submit_approval(cmd["request_id"], cmd["verdict"],
                                         cmd.get("operator_id", "operator"),
                                         override_action=cmd.get("action"))
                elif cmd["kind"] == "killswitch":
                    self.set_kill_switch(cmd["engage"], cmd.get("operator_id", "operator"))
            except PipekeeperError as exc:
                self._emit("command_rejected", command=cmd, error=str(exc))

    def set_kill_switch(self, engage: bool, operator_id: str) -> None:
        if engage == self.global_kill:
            return
        self.global_kill = engage
        for agent_id in sorted(self.trust):
            state, event = trust_mod.kill_switch(self.trust[agent_id], engage, operator_id, now=self.clock)
            self.trust[agent_id] = state
            if event is not None:
                self.ledger.append(event)
        self._emit("killswitch", engaged=engage, operator_id=operator_id)

    # -- pipeline lifecycle --------------------------------------------------------

    def _start_pipeline(self, commit_idx: int, t: int) -> None:
        run = PipelineRun(
            run_id=self._next_id("run", "run"),
            commit_idx=commit_idx,
            commit_time=t,
            state="building",
            next_transition=t + self.scenario.deploy.build_minutes,
        )
        self.pipelines.append(run)
        self._run_by_epoch[commit_idx] = run
        self._invalidate_live_cache()
        self._emit("commit", run_id=run.run_id, commit_idx=commit_idx)

    def _advance_pipelines(self, t: int) -> None:
        for run in self.pipelines:
            if run.terminal or run.next_transition is None or t < run.next_transition:
                continue
            if run.state == "building":
                run.stage_record("lint_build", run.commit_time, t, "pass")
                run.state = "testing"
                run.next_transition = t + self.scenario.deploy.test_minutes
            elif run.state == "testing":
                self._finish_test_stage(run, t)
            elif run.state == "security":
                self._finish_security_stage(run, t)
            elif run.state == "awaiting_gate":
                run.next_transition = None  # resolved by approval/human task
            elif run.state == "deploy_setup":
                self._start_canary(run, t)

    # -- test stage ------------------------------------------------------------------

    def _suite_faults_for(self, run: PipelineRun, t: int) -> list[FaultSpec]:
        out = []
        for f in self.faults:
            if f.target != "suite":
                continue
            if f.kind == "regression_in_commit":
                out.append(f)  # revision gating happens in gen_test_run
            elif f.epoch == run.commit_idx or f.active_at(t):
                out.append(f)
        return out

    def _finish_test_stage(self, run: PipelineRun, t: int) -> None:
        suite = self.scenario.suite
        active = [f for f in suite.tests if f not in self.history.quarantined]
        outcomes = gen_test_run(
            _restrict_suite(suite, active), run.commit_idx,
            self._suite_faults_for(run, t), self._rng_tests, self._prev_outcomes,
        )
        self._prev_outcomes.update(outcomes)
        for test_id in suite.tests:
            if test_id in outcomes:
                self.history.record(test_id, run.commit_idx, next(self._history_seq), outcomes[test_id])
        failures = sorted(tid for tid, ok in outcomes.items() if not ok)
        for tid in failures:
            self.test_failure_counts[tid] = self.test_failure_counts.get(tid, 0) + 1
        if not failures:
            run.stage_record("tests", t - self.scenario.deploy.test_minutes, t, "pass")
            self._enter_security(run, t)
            return
        run.next_transition = None  # stage completes via triage resolutions
        run.failing_tests = failures
        run.pending_tests = len(failures)
        self._emit("test_failures", run_id=run.run_id, tests=failures)
        if self.mode == "augmented":
            self._triage_failures(run, t)
        else:
            self._baseline_triage(run, t)

    def _triage_failures(self, run: PipelineRun, t: int) -> None:
        suite = self.scenario.suite
        coverage_changed = run.commit_idx in self.scenario.coverage_changed_commits
        budget = self.quarantine_budget
        agent = self.agents[Stage.TEST_FAILURES]
        for test_id in list(run.failing_tests):
            from .agents import flakiness_probability

            f = flakiness_probability(self.history, test_id)
            snapshot = {
                "stage": Stage.TEST_FAILURES.value,
                "test_id": test_id,
                "flakiness": round(f, 6),
                "history_runs": len(self.history.outcomes(test_id)),
                "coverage_changed": coverage_changed,
                "quarantine_budget_left": budget,
                "trace_id": f"triage-{run.run_id}-{test_id}",
            }
            proposal = self._safe_propose(agent, snapshot)
            if proposal.action == "quarantine":
                budget -= 1
            ctx = EvaluationContext(
                environment="preprod",
                trust_tier=self._effective_tier(agent.agent_id),
                retry_count_so_far=run.retry_counts.get(test_id, 0),
                flakiness_probability=round(f, 6),
                coverage_changed=coverage_changed,
                quarantine_used=self.scenario.quarantine_budget - budget,
            )
            oracle = self._oracle_triage(test_id, run, budget)
            self._route_decision(
                proposal, snapshot, ctx, oracle, run,
                executor=lambda action, tid=test_id, r=run: self._execute_test_action(r, tid, action),
                true_fault=oracle != "fail" or self._is_regressed(test_id, run),
            )

    def _is_regressed(self, test_id: str, run: PipelineRun) -> bool:
        return any(
            f.kind == "regression_in_commit" and test_id in f.tests and run.commit_idx >= f.epoch
            for f in self._suite_faults_for(run, self.clock)
        )

    def _oracle_triage(self, test_id: str, run: PipelineRun, budget_left: int) -> str:
        # ground truth from the injected fault state
        for f in self._suite_faults_for(run, self.clock):
            if f.kind == "regression_in_commit" and test_id in f.tests and run.commit_idx >= f.epoch:
                return "fail"
        is_flaky = test_id in self.scenario.suite.flaky or any(
            f.kind == "flaky_burst" and test_id in f.tests for f in self._suite_faults_for(run, self.clock)
        )
        if not is_flaky:
            return "fail"
        return "quarantine" if budget_left > 0 else "retry"

    def _execute_test_action(self, run: PipelineRun, test_id: str, action: str) -> None:
        if run.terminal:
            return
        if action == "retry":
            run.retry_counts[test_id] = run.retry_counts.get(test_id, 0) + 1
            self._schedule(self.clock + self.scenario.deploy.retry_minutes,
                           lambda: self._rerun_test(run, test_id))
            return
        if action == "quarantine":
            if self.quarantine_budget > 0:
                self.quarantine_budget -= 1
                self.history.quarantined.add(test_id)
                self._emit("quarantined", run_id=run.run_id, test=test_id)
                self._test_resolved(run, test_id, passed=True)
            else:
                self._fail_pipeline(run, "tests")
            return
        # fail / none
        self._fail_pipeline(run, "tests")

    def _rerun_test(self, run: PipelineRun, test_id: str) -> None:
        if run.terminal:
            return
        suite = self.scenario.suite
        outcome = gen_test_run(
            _restrict_suite(suite, [test_id]), run.commit_idx,
            self._suite_faults_for(run, self.clock), self._rng_tests, self._prev_outcomes,
        )
        passed = outcome[test_id]
        self._prev_outcomes[test_id] = passed
        self.history.record(test_id, run.commit_idx, next(self._history_seq), passed)
        self._emit("test_retried", run_id=run.run_id, test=test_id, passed=passed)
        if passed:
            self._test_resolved(run, test_id, passed=True)
            return
        self.test_failure_counts[test_id] = self.test_failure_counts.get(test_id, 0) + 1
        if self.mode == "augmented":
            self._retriage_single(run, test_id)
        else:
            self._baseline_handle_failure(run, test_id)

    def _retriage_single(self, run: PipelineRun, test_id: str) -> None:
        from .agents import flakiness_probability

        agent = self.agents[Stage.TEST_FAILURES]
        f = flakiness_probability(self.history, test_id)
        snapshot = {
            "stage": Stage.TEST_FAILURES.value,
            "test_id": test_id,
            "flakiness": round(f, 6),
            "history_runs": len(self.history.outcomes(test_id)),
            "coverage_changed": run.commit_idx in self.scenario.coverage_changed_commits,
            "quarantine_budget_left": self.quarantine_budget,
            "trace_id": f"triage-{run.run_id}-{test_id}-r{run.retry_counts.get(test_id, 0)}",
        }
        proposal = self._safe_propose(agent, snapshot)
        ctx = EvaluationContext(
            environment="preprod",
            trust_tier=self._effective_tier(agent.agent_id),
            retry_count_so_far=run.retry_counts.get(test_id, 0),
            flakiness_probability=round(f, 6),
            coverage_changed=snapshot["coverage_changed"],
            quarantine_used=self.scenario.quarantine_budget - self.quarantine_budget,
        )
        oracle = self._oracle_triage(test_id, run, self.quarantine_budget)
        self._route_decision(
            proposal, snapshot, ctx, oracle, run,
            executor=lambda action, tid=test_id, r=run: self._execute_test_action(r, tid, action),
            true_fault=oracle != "fail" or self._is_regressed(test_id, run),
        )

    def _test_resolved(self, run: PipelineRun, test_id: str, passed: bool) -> None:
        if run.terminal:
            return
        run.pending_tests -= 1
        if run.pending_tests <= 0:
            run.stage_record("tests", run.commit_time + self.scenario.deploy.build_minutes,
                             self.clock, "pass")
            self._enter_security(run, self.clock)

    def _fail_pipeline(self, run: PipelineRun, stage: str) -> None:
        if run.terminal:
            return
        run.outcome = "failed"
        run.failed_stage = stage
        run.state = "done"
        run.stage_record(stage, run.commit_time, self.clock, "fail")
        self._emit("pipeline_failed", run_id=run.run_id, stage=stage)
        self._release_deploy_slot(run)

    # -- security stage ---------------------------------------------------------------

    def _enter_security(self, run: PipelineRun, t: int) -> None:
        run.state = "security"
        run.next_transition = t + self.scenario.deploy.security_minutes

    def _finish_security_stage(self, run: PipelineRun, t: int) -> None:
        findings = list(self.scenario.security_findings.get(run.commit_idx, ()))
        if not findings:
            run.stage_record("security", t - self.scenario.deploy.security_minutes, t, "pass")
            self._queue_for_deploy(run, t)
            return
        if self.mode == "baseline":
            self._baseline_security(run, findings, t)
            return
        agent = self.agents[Stage.SECURITY_GATE]
        snapshot = {
            "stage": Stage.SECURITY_GATE.value,
            "findings": findings,
            "trace_id": f"sec-{run.run_id}",
        }
        proposal = self._safe_propose(agent, snapshot)
        critical = sum(1 for f in findings if f["severity"] == "critical")
        high = sum(1 for f in findings if f["severity"] == "high")
        ctx = EvaluationContext(
            environment="preprod",
            trust_tier=self._effective_tier(agent.agent_id),
            critical_cve_count=critical,
            high_cve_count=high,
            reachable_high_cve=any(f["severity"] == "high" and f.get("reachable") for f in findings),
        )
        oracle = self._oracle_security(findings)
        self._route_decision(
            proposal, snapshot, ctx, oracle, run,
            executor=lambda action, r=run: self._execute_security_action(r, action),
            on_deny=lambda r=run: self._fail_pipeline(r, "security"),
            true_fault=oracle in ("block", "auto_pr"),
        )

    def _oracle_security(self, findings: list[Mapping[str, Any]]) -> str:
        if any(f["severity"] == "critical" for f in findings):
            return "block"
        if any(f["severity"] == "high" and f.get("reachable") for f in findings):
            return "auto_pr"
        return "allow"

    def _execute_security_action(self, run: PipelineRun, action: str) -> None:
        if run.terminal:
            return
        if action == "allow":
            run.stage_record("security", run.commit_time, self.clock, "pass")
            self._queue_for_deploy(run, self.clock)
            return
        if action == "auto_pr":
            self._emit("remediation_proposed", run_id=run.run_id, kind="auto_pr")
        self._fail_pipeline(run, "security")

    # -- deployment -------------------------------------------------------------------

    def _queue_for_deploy(self, run: PipelineRun, t: int) -> None:
        if self.active_deploy is None:
            self._begin_deploy(run, t)
        else:
            self.deploy_queue.append(run)
            run.state = "awaiting_gate"
            run.next_transition = None

    def _begin_deploy(self, run: PipelineRun, t: int) -> None:
        self.active_deploy = run
        if self.mode == "baseline":
            # manual gate before the canary even starts
            wait = self.scenario.human.baseline_approval_minutes
            self._human_wait(wait, "canary_gate")
            run.state = "awaiting_gate"
            self._schedule(t + wait, lambda: self._enter_deploy_setup(run))
        else:
            self._enter_deploy_setup(run)

    def _enter_deploy_setup(self, run: PipelineRun) -> None:
        if run.terminal:
            self._release_deploy_slot(run)
            return
        run.state = "deploy_setup"
        run.next_transition = self.clock + self.scenario.deploy.deploy_setup_minutes

    def _start_canary(self, run: PipelineRun, t: int) -> None:
        run.state = "canary"
        run.next_transition = None
        run.canary_started = t
        self._invalidate_live_cache()
        run.ramp_pct = self.scenario.deploy.initial_ramp_pct
        run.soak_elapsed = 0
        self._canary_aggr = []
        self._emit("deploy_started", run_id=run.run_id, ramp=run.ramp_pct)
        if self.mode == "baseline":
            soak_done = t + self.scenario.deploy.soak_ticks
            wait = self.scenario.human.baseline_approval_minutes
            self._schedule(soak_done + wait, lambda: self._baseline_promote_check(run))
            self._human_wait(wait, "promote_gate")

    def _release_deploy_slot(self, run: PipelineRun) -> None:
        if self.active_deploy is run:
            self.active_deploy = None
            if self.deploy_queue:
                nxt = self.deploy_queue.pop(0)
                self._begin_deploy(nxt, self.clock)

    def _execute_canary_action(self, run: PipelineRun, action: str) -> None:
        # promoted runs stay eligible for prod rollback; only a prior
        # rollback or a failed pipeline ends the deployment's story
        if run.canary_started is None or run.rolled_back_at is not None or run.outcome == "failed":
            return
        if action == "rollback":
            self._rollback(run, phase="canary" if run.promoted_at is None else "prod")
        elif action == "promote":
            if run.promoted_at is None and run.rolled_back_at is None:
                run.promoted_at = self.clock
                self._invalidate_live_cache()
                run.ramp_pct = 100.0
                run.outcome = "promoted"
                run.state = "done"
                run.flag_ramp_pct = self.scenario.deploy.initial_ramp_pct
                run.next_flag_check = self.clock + self.scenario.deploy.flag_interval_ticks
                run.stage_record("canary", run.canary_started, self.clock, "pass")
                self._emit("promoted", run_id=run.run_id, lead_minutes=self.clock - run.commit_time)
                self._release_deploy_slot(run)
        elif action == "pause":
            if run.promoted_at is None:
                run.paused_until = self.clock + 5
                self._emit("paused", run_id=run.run_id, until=run.paused_until)
        elif action == "tune_flags":
            # mitigate flag-attributable regressions without killing the deploy
            for f in self._live_faults(self.clock, "canary"):
                if f.fault_id in self.scenario.flag_attributed_faults:
                    self._mitigated_faults.add(f.fault_id)
                    self._invalidate_live_cache()
                    self._resolve_incident_for_fault(f, "tune_flags")
            self._emit("flags_tuned", run_id=run.run_id)

    def _rollback(self, run: PipelineRun, phase: str) -> None:
        if run.rolled_back_at is not None:
            return
        run.rolled_back_at = self.clock
        run.rollback_phase = phase
        self._invalidate_live_cache()
        if phase == "canary":
            run.outcome = "rolled_back"
            run.state = "done"
            if run.canary_started is not None:
                run.stage_record("canary", run.canary_started, self.clock, "fail")
        # prod rollback keeps outcome=promoted (the promotion is counted and
        # marked failed for CFR purposes via rolled_back_at)
        self._emit("rolled_back", run_id=run.run_id, phase=phase)
        for f in self.faults:
            if f.target == "canary" and f.epoch == run.commit_idx:
                self._resolve_incident_for_fault(f, "rollback")
        if phase == "canary":
            self._release_deploy_slot(run)

    # -- canary observation (augmented) --------------------------------------------

    def _observe_canary(self, t: int) -> None:
        run = self.active_deploy
        if (
            run is None or run.terminal or run.canary_started is None
            or run.promoted_at is not None
            or len(self._canary_aggr) < 3 or len(self._baseline_aggr) < 3
        ):
            return
        run.soak_elapsed = t - run.canary_started
        deploy = self.scenario.deploy
        if run.paused_until is None or t >= run.paused_until:
            run.paused_until = None
            # ramp stepping inside the pre-promote envelope
            if (
                run.soak_elapsed > 0
                and run.soak_elapsed % deploy.ramp_interval_ticks == 0
                and run.ramp_pct < deploy.max_precommit_ramp_pct
            ):
                run.ramp_pct = min(deploy.max_precommit_ramp_pct, run.ramp_pct + deploy.ramp_step_pp)
                self._emit("ramp_changed", run_id=run.run_id, ramp=run.ramp_pct)

        depth = min(len(self._baseline_aggr), len(self._canary_aggr))
        base = self._aggregate(self._baseline_aggr[-depth:], "baseline", t)
        canary = self._aggregate(self._canary_aggr[-depth:], "canary", t)
        deltas = compute_kpi_deltas(base, canary)
        soak_complete = run.soak_elapsed >= deploy.soak_ticks and run.paused_until is None
        flag_attr = any(
            f.fault_id in self.scenario.flag_attributed_faults
            for f in self._live_faults(t, "canary")
        )
        agent = self.agents[Stage.CANARY_ANALYSIS]
        snapshot = {
            "stage": Stage.CANARY_ANALYSIS.value,
            "deltas": deltas.to_dict(),
            "slo": {"error_budget_pp": self.slo.error_budget_pp, "p95_slo_ms": self.slo.p95_slo_ms},
            "max_error_delta_pct": self.bundle.max_error_delta_pct,
            "flag_attributed": flag_attr,
            "trace_id": canary.window_id,
        }
        proposal = self._safe_propose(agent, snapshot)
        if proposal.action == "promote" and not soak_complete:
            return  # healthy tick during soak: telemetry only, no decision
        if proposal.action in self._pending_canary.get(run.run_id, set()):
            return  # same disposition already waiting on a human
        live_fault = any(f.kind in USER_IMPACTING_KINDS for f in self._live_faults(t, "canary"))
        if proposal.action == "promote":
            oracle = "promote" if not live_fault else "rollback"
        else:
            oracle = "rollback" if live_fault else ("promote" if soak_complete else "pause")
        ctx = EvaluationContext(
            environment="canary",
            trust_tier=self._effective_tier(agent.agent_id),
            error_rate_delta_pp=deltas.error_rate_delta_pp,
            p95_latency_ms=deltas.p95_latency_canary_ms,
            latency_delta_pct=deltas.latency_delta_pct,
            current_ramp_pct=run.ramp_pct,
        )
        self._mark_detected(run, t)
        self._route_decision(
            proposal, snapshot, ctx, oracle, run,
            executor=lambda action, r=run: self._execute_canary_action(r, action),
            trace_extra=(base.window_id,),
            true_fault=live_fault,
        )

    def _mark_detected(self, run: PipelineRun, t: int) -> None:
        for f in self.faults:
            if f.target == "canary" and f.epoch == run.commit_idx and f.active_at(t):
                inc_id = self.incident_by_fault.get(f.fault_id)
                if inc_id and self.incidents[inc_id].detected_at is None:
                    self.incidents[inc_id].detected_at = t

    # -- deployment health + prod incidents (augmented) ------------------------------

    def _monitor_health(self, t: int) -> None:
        base = self._last_windows.get("baseline")
        if base is None:
            return
        nominal = self.scenario.baseline_profile.saturation_pct
        agg = self._aggregate(self._baseline_aggr, "baseline", t)
        delta = agg.saturation - nominal
        noisy = base.noisy_alerts
        agent = self.agents[Stage.DEPLOYMENT_HEALTH]
        cfg = agent.config
        for fault in self._live_faults(t, "baseline"):
            if fault.kind not in ("resource_saturation", "noisy_alerts"):
                continue
            if fault.fault_id in self._health_proposed:
                continue
            if delta < cfg.saturation_delta_threshold_pp and agg.saturation < cfg.saturation_scale_threshold_pct:
                continue
            self._health_proposed.add(fault.fault_id)
            snapshot = {
                "stage": Stage.DEPLOYMENT_HEALTH.value,
                "saturation_pct": round(agg.saturation, 3),
                "saturation_delta_pp": round(delta, 3),
                "noisy_alerts": noisy,
                "trace_id": base.window_id,
            }
            proposal = self._safe_propose(agent, snapshot)
            ctx = EvaluationContext(
                environment="prod",
                trust_tier=self._effective_tier(agent.agent_id),
                saturation_pct=round(agg.saturation, 3),
                noisy_alerts=noisy,
            )
            oracle = NO_ACTION if noisy else "auto_scale"
            self._route_decision(
                proposal, snapshot, ctx, oracle, None,
                executor=lambda action, f=fault: self._execute_health_action(f, action),
                incident_fault=fault,
                true_fault=fault.kind == "resource_saturation",
            )
        # post-promote regressions escalate to incident response
        for fault in self._live_faults(t, "baseline"):
            if fault.target != "canary" or fault.kind not in USER_IMPACTING_KINDS:
                continue
            run = self._run_for_epoch(fault.epoch)
            if run is None or run.promoted_at is None or run.rolled_back_at is not None:
                continue
            if fault.fault_id in self._health_proposed:
                continue
            self._health_proposed.add(fault.fault_id)
            agent = self.agents[Stage.INCIDENT_RESPONSE]
            snapshot = {
                "stage": Stage.INCIDENT_RESPONSE.value,
                "cause_kind": fault.kind,
                "post_promote": True,
                "trace_id": f"incident-{fault.fault_id}",
            }
            proposal = self._safe_propose(agent, snapshot)
            destructive = proposal.action == "rollback"
            ctx = EvaluationContext(
                environment="prod",
                trust_tier=self._effective_tier(agent.agent_id),
                destructive=destructive,
            )
            inc_id = self.incident_by_fault.get(fault.fault_id)
            if inc_id and self.incidents[inc_id].detected_at is None:
                self.incidents[inc_id].detected_at = t
            self._route_decision(
                proposal, snapshot, ctx, "rollback", run,
                executor=lambda action, r=run: self._execute_canary_action(r, action),
                incident_fault=fault,
                true_fault=True,
            )

    def _execute_health_action(self, fault: FaultSpec, action: str) -> None:
        if action in ("auto_scale", "run_runbook"):
            self._mitigated_faults.add(fault.fault_id)
            self._invalidate_live_cache()
            self._emit("scaled_out", fault_id=fault.fault_id, action=action)
            self._resolve_incident_for_fault(fault, action)
        elif action == "rollback":
            run = self._run_for_epoch(fault.epoch)
            if run is not None:
                self._rollback(run, phase="prod")

    # -- feature flag controller (augmented, post-promote) ---------------------------

    def _run_flag_controllers(self, t: int) -> None:
        latest = None
        for run in self.pipelines:
            if run.promoted_at is not None and run.rolled_back_at is None:
                if latest is None or run.promoted_at > latest.promoted_at:
                    latest = run
        for run in self.pipelines:
            if run.promoted_at is None or run.rolled_back_at is not None or run is not latest:
                continue
            if run.next_flag_check is None or t < run.next_flag_check or run.flag_ramp_pct >= 100.0:
                continue
            run.next_flag_check = t + self.scenario.deploy.flag_interval_ticks
            flag_fault = next(
                (f for f in self._live_faults(t, "baseline")
                 if f.fault_id in self.scenario.flag_attributed_faults),
                None,
            )
            rng = self._rng_flags
            if flag_fault is not None:
                error_pp = flag_fault.magnitude if flag_fault.kind == "error_spike" else 0.5
                p95 = self.slo.p95_slo_ms * 1.6
            else:
                error_pp = rng.gauss(0, 0.15)
                p95 = self.scenario.baseline_profile.latency_median_ms * 1.2 + rng.gauss(0, 4)
            deltas = KpiDeltas(
                error_rate_delta_pp=round(error_pp, 4),
                p95_latency_baseline_ms=round(self.scenario.baseline_profile.latency_median_ms, 3),
                p95_latency_canary_ms=round(p95, 3),
                latency_delta_pct=0.0,
                saturation_delta_pp=0.0,
                sample_sizes=(400, 400),
            )
            agent = self.agents[Stage.FEATURE_FLAGS]
            snapshot = {
                "stage": Stage.FEATURE_FLAGS.value,
                "deltas": deltas.to_dict(),
                "slo": {"error_budget_pp": self.slo.error_budget_pp, "p95_slo_ms": self.slo.p95_slo_ms},
                "current_ramp_pct": run.flag_ramp_pct,
                "trace_id": f"flag-{run.run_id}-{t}",
            }
            proposal = self._safe_propose(agent, snapshot)
            oracle = "ramp_up" if flag_fault is None else ("disable" if error_pp >= 1.2 else "ramp_down")
            ctx = EvaluationContext(
                environment="prod",
                trust_tier=self._effective_tier(agent.agent_id),
                current_ramp_pct=run.flag_ramp_pct,
            )
            self._route_decision(
                proposal, snapshot, ctx, oracle, run,
                executor=lambda action, r=run, ff=flag_fault: self._execute_flag_action(r, action, ff),
                true_fault=flag_fault is not None,
                envelope_ramp=0.0,
            )

    def _execute_flag_action(self, run: PipelineRun, action: str, fault: FaultSpec | None) -> None:
        step = self.scenario.deploy.ramp_step_pp
        if action == "ramp_up":
            run.flag_ramp_pct = min(100.0, run.flag_ramp_pct + step)
        elif action == "ramp_down":
            run.flag_ramp_pct = max(0.0, run.flag_ramp_pct - step)
        elif action == "disable":
            run.flag_ramp_pct = 0.0
            if fault is not None:
                self._mitigated_faults.add(fault.fault_id)
                self._invalidate_live_cache()
                self._resolve_incident_for_fault(fault, "disable")
        self._emit("flag_ramp", run_id=run.run_id, ramp=run.flag_ramp_pct, action=action)

    # -- incidents -------------------------------------------------------------------

    def _update_incidents(self, t: int) -> None:
        for fault in self.faults:
            if fault.kind not in USER_IMPACTING_KINDS:
                continue
            live_baseline = fault in self._live_faults(t, "baseline")
            live_canary = fault in self._live_faults(t, "canary")
            inc_id = self.incident_by_fault.get(fault.fault_id)
            if (live_baseline or live_canary) and inc_id is None:
                incident = Incident(
                    incident_id=self._next_id("incident", "inc"),
                    fault=fault,
                    run_id=(self._run_for_epoch(fault.epoch) or PipelineRun("", 0, 0)).run_id
                    if fault.target == "canary" else None,
                    onset=t,
                )
                self.incidents[incident.incident_id] = incident
                self.incident_by_fault[fault.fault_id] = incident.incident_id
                self._emit("incident_opened", incident_id=incident.incident_id,
                           fault_id=fault.fault_id, cause_kind=fault.kind, run_id=incident.run_id)
            elif inc_id is not None and not (live_baseline or live_canary):
                incident = self.incidents[inc_id]
                if incident.resolved_at is None:
                    # fault drained without a mitigating action
                    incident.resolved_at = t
                    incident.resolving_action = "fault_expired"
                    self._emit("incident_resolved", incident_id=inc_id, resolving="fault_expired",
                               mttr=t - incident.onset)
                    self._open_postmortem(incident)

    def _resolve_incident_for_fault(self, fault: FaultSpec, action: str) -> None:
        inc_id = self.incident_by_fault.get(fault.fault_id)
        if inc_id is None:
            return
        incident = self.incidents[inc_id]
        if incident.resolved_at is not None:
            return
        incident.resolved_at = self.clock
        incident.resolving_action = action
        if incident.detected_at is None:
            incident.detected_at = self.clock
        self._emit("incident_resolved", incident_id=inc_id, resolving=action,
                   mttr=self.clock - incident.onset)
        self._open_postmortem(incident)

    def _open_postmortem(self, incident: Incident) -> None:
        from .model import record_to_dict

        decisions = []
        for decision_id in incident.decision_ids:
            obj = self._record_index.get(decision_id)
            if obj is None:
                continue
            d = record_to_dict(obj)
            d["timestamp"] = obj.timestamp
            decisions.append(d)
        report = postmortem_build(
            decisions, incident.to_dict(), incident.incident_id,
            flaky_failure_counts=self.test_failure_counts,
        )
        self.postmortems.append(report.to_dict())
        self.ledger.append(AuditEvent(
            kind="postmortem",
            timestamp=self.clock,
            data={"incident_id": incident.incident_id,
                  "remediations": len(report.remediation_proposals),
                  "mttr_minutes": report.mttr_minutes},
        ))
        self._emit("postmortem_opened", incident_id=incident.incident_id)

    # -- decision routing (augmented) ---------------------------------------------

    def _effective_tier(self, agent_id: str) -> str:
        return self.trust[agent_id].effective_tier

    # safe action proposed when an agent implementation fails; confidence 0
    # forces the policy engine to escalate to a human
    _DEGRADED_ACTION = {
        Stage.TEST_FAILURES: "fail",
        Stage.SECURITY_GATE: "block",
        Stage.CANARY_ANALYSIS: "pause",
        Stage.DEPLOYMENT_HEALTH: "rollback",
        Stage.FEATURE_FLAGS: "ramp_down",
        Stage.INCIDENT_RESPONSE: "run_runbook",
    }

    def _safe_propose(self, agent: Agent, snapshot: Mapping[str, Any]) -> AgentProposal:
        """Agent exceptions never crash the run: they degrade to a
        zero-confidence safe proposal that escalates to human review."""
        stage = Stage(snapshot["stage"])
        try:
            return agent.propose(snapshot)
        except Exception as exc:
            self._emit("agent_error", stage=stage.value, agent_id=agent.agent_id, error=str(exc))
            return AgentProposal(
                stage=stage,
                action=self._DEGRADED_ACTION[stage],
                confidence=0.0,
                evidence=("agent failure: degraded to human review",),
                rationale=f"{agent.agent_id} failed internally; holding for approval",
                trace_id=snapshot.get("trace_id") or f"degraded-{self.clock}",
                agent_id=agent.agent_id,
                agent_version=agent.agent_version,
                model_id=agent.model_id,
            )

    def _route_decision(
        self,
        proposal: AgentProposal,
        snapshot: Mapping[str, Any],
        ctx: EvaluationContext,
        oracle_action: str,
        run: PipelineRun | None,
        executor: Callable[[str], None],
        on_deny: Callable[[], None] | None = None,
        incident_fault: FaultSpec | None = None,
        trace_extra: tuple[str, ...] = (),
        true_fault: bool = False,
        envelope_ramp: float | None = None,
    ) -> None:
        outcome = evaluate(proposal, ctx, self.bundle)
        state = self.trust[proposal.agent_id]
        tier = state.effective_tier
        # the T2 envelope bounds canary traffic; non-canary stages pass their
        # own envelope_ramp (flag ramps are not canary ramps)
        auth = trust_mod.authority(
            tier, proposal.stage, proposal.action, outcome.verdict,
            ramp_pct=ctx.current_ramp_pct if envelope_ramp is None else envelope_ramp,
            destructive=ctx.destructive,
            kill_switch=state.kill_switch_engaged,
            ramp_envelope_pct=self.bundle.max_canary_ramp_pct,
        )
        inputs = {
            "metrics": dict(snapshot),
            "logs": list(proposal.evidence),
            "context": ctx.as_dict(),
            "agent_id": proposal.agent_id,
        }
        self._adjudicate(proposal, oracle_action, tier, true_fault)

        if outcome.verdict == Verdict.ALLOW and outcome.triggered_rules:
            # soft matches never change the verdict but stay explainable
            self.ledger.append(AuditEvent(
                kind="policy_warning",
                timestamp=self.clock,
                data={
                    "stage": proposal.stage.value,
                    "agent_id": proposal.agent_id,
                    "proposed_action": proposal.action,
                    "rules": [
                        {"rule_id": r.rule_id, "rule_kind": r.rule_kind,
                         "observations": list(r.observations)}
                        for r in outcome.triggered_rules
                    ],
                },
                trace_ids=(proposal.trace_id,),
            ))

        if outcome.verdict == Verdict.DENY:
            autonomous_attempt = tier in ("T2", "T3")
            self.ledger.append(audit_denial(outcome, proposal, clock=self.clock,
                                            autonomous_attempt=autonomous_attempt))
            record = self._write_record(proposal, outcome, "denied", inputs, trace_extra, run, incident_fault)
            if autonomous_attempt:
                self._trust_sample(proposal.agent_id, trust_mod.KIND_AUTONOMOUS, correct=False,
                                   violation=True, decision_id=record.id)
            if outcome.forced_action:
                executor(outcome.forced_action)
            elif on_deny is not None:
                on_deny()
            else:
                executor(NO_ACTION)
            return

        if auth == trust_mod.AUTHORITY_AUTONOMOUS:
            record = self._write_record(proposal, outcome, "auto", inputs, trace_extra, run, incident_fault)
            executor(proposal.action)
            agent_id = proposal.agent_id
            decision_id = record.id
            horizon = self.scenario.deploy.attribution_horizon_minutes
            decision_run = run
            if self.trust[agent_id].tier in ("T2", "T3"):
                self._schedule(
                    self.clock + horizon,
                    lambda: self._score_autonomous(agent_id, decision_id, decision_run),
                )
            return

        if auth == trust_mod.AUTHORITY_APPROVAL:
            self._open_approval(proposal, outcome, ctx, snapshot, inputs, oracle_action, run,
                                executor, incident_fault, trace_extra)
            return

        # recommend-only: audit the recommendation, leave execution to humans
        self.ledger.append(AuditEvent(
            kind="recommendation",
            timestamp=self.clock,
            data={
                "stage": proposal.stage.value,
                "agent_id": proposal.agent_id,
                "proposed_action": proposal.action,
                "confidence": proposal.confidence,
                "verdict": outcome.verdict.value,
                "final_action": NO_ACTION,
                "evidence": list(proposal.evidence),
            },
            trace_ids=(proposal.trace_id,),
        ))
        self._trust_sample(proposal.agent_id, trust_mod.KIND_RECOMMENDATION,
                           correct=proposal.action == oracle_action, violation=False,
                           decision_id=proposal.trace_id)
        if proposal.stage == Stage.CANARY_ANALYSIS and run is not None:
            self._pending_canary.setdefault(run.run_id, set()).add(proposal.action)
        if self.scenario.human.mode == "model":
            created = self.clock
            due = created + self.scenario.human.augmented_response_minutes
            self._schedule(due, lambda: self._manual_resolution(
                proposal, outcome, ctx, inputs, oracle_action, run, executor, incident_fault,
                trace_extra, created))

    def _manual_resolution(
        self, proposal, outcome, ctx, inputs, oracle_action, run, executor,
        incident_fault, trace_extra, created_at,
    ) -> None:
        if proposal.stage == Stage.CANARY_ANALYSIS and run is not None:
            self._pending_canary.get(run.run_id, set()).discard(proposal.action)
        resolution, override = self._operator_verdict(proposal, oracle_action)
        self._decision_latency_total += self.clock - created_at
        self._emit("decision_wait", minutes=self.clock - created_at, kind="recommendation")
        record = self._write_record(proposal, outcome, resolution, inputs, trace_extra, run,
                                    incident_fault, override_action=override)
        self.ledger.append(AuditEvent(
            kind="manual_resolution",
            timestamp=self.clock,
            data={"decision_id": record.id, "resolution": resolution,
                  "operator_id": "modeled-operator", "final_action": record.final_action},
            trace_ids=(proposal.trace_id,),
        ))
        final = record.final_action
        if final != NO_ACTION:
            executor(final)

    def _operator_verdict(self, proposal: AgentProposal, oracle_action: str) -> tuple[str, str | None]:
        """Modeled reviewer: approve on agreement, steer to the oracle action
        otherwise. An unnecessary protective proposal is rejected rather than
        turned into an early promotion."""
        if proposal.action == oracle_action:
            return "approved", None
        if oracle_action in ("promote", NO_ACTION) or oracle_action not in _stage_actions(proposal.stage):
            return "overridden", NO_ACTION
        return "overridden", oracle_action

    def _open_approval(self, proposal, outcome, ctx, snapshot, inputs, oracle_action, run,
                       executor, incident_fault, trace_extra) -> None:
        request = ApprovalRequest(
            request_id=self._next_id("approval", "apr"),
            proposal=proposal,
            outcome=outcome,
            context=ctx,
            snapshot=snapshot,
            created_at=self.clock,
            deadline=self.clock + self.scenario.deploy.approval_window_minutes,
            run_id=run.run_id if run else None,
            oracle_action=oracle_action,
        )
        self.approvals[request.request_id] = request
        request._inputs = inputs  # type: ignore[attr-defined]
        request._executor = executor  # type: ignore[attr-defined]
        request._incident_fault = incident_fault  # type: ignore[attr-defined]
        request._trace_extra = trace_extra  # type: ignore[attr-defined]
        request._run = run  # type: ignore[attr-defined]
        self.ledger.append(AuditEvent(
            kind="approval_requested",
            timestamp=self.clock,
            data={"request_id": request.request_id, "stage": proposal.stage.value,
                  "agent_id": proposal.agent_id, "proposed_action": proposal.action,
                  "confidence": proposal.confidence, "deadline": minutes_to_iso(request.deadline),
                  "verdict": outcome.verdict.value},
            trace_ids=(proposal.trace_id,),
        ))
        self._emit("approval_requested", request_id=request.request_id, stage=proposal.stage.value)
        if proposal.stage == Stage.CANARY_ANALYSIS and run is not None:
            self._pending_canary.setdefault(run.run_id, set()).add(proposal.action)
        if self.scenario.human.mode == "model":
            due = self.clock + self.scenario.human.augmented_response_minutes
            if due < request.deadline:
                rid = request.request_id
                self._schedule(due, lambda: self._modeled_approval(rid))

    def _modeled_approval(self, request_id: str) -> None:
        request = self.approvals.get(request_id)
        if request is None or request.resolution != "pending":
            return
        resolution, override = self._operator_verdict(request.proposal, request.oracle_action)
        verdict = {"approved": "approve", "overridden": "override"}.get(resolution, "deny")
        self.submit_approval(request_id, verdict, "modeled-operator", override_action=override)

    def submit_approval(self, request_id: str, verdict: str, operator_id: str,
                        override_action: str | None = None) -> ApprovalRequest:
        """Resolve a pending approval: approve | deny | override."""
        request = self.approvals.get(request_id)
        if request is None:
            raise OrchestratorError(f"unknown_request: {request_id}")
        # the response window is closed at its right end: a submission landing
        # exactly at the deadline tick is already expired
        if request.resolution == "expired" or (request.resolution == "pending" and self.clock >= request.deadline):
            raise OrchestratorError(f"expired: {request_id}")
        if request.resolution != "pending":
            raise OrchestratorError(f"already_resolved: {request_id}")
        if verdict == "approve":
            resolution, override = "approved", None
        elif verdict == "deny":
            # rejecting an ALLOW-verdict proposal is an operator override to no-op
            if request.outcome.verdict == Verdict.ALLOW:
                resolution, override = "overridden", NO_ACTION
            else:
                resolution, override = "denied", None
        elif verdict == "override":
            resolution, override = "overridden", override_action or NO_ACTION
        else:
            raise OrchestratorError(f"unknown verdict {verdict!r}")

        request.resolution = resolution
        request.resolved_at = self.clock
        if request.proposal.stage == Stage.CANARY_ANALYSIS and request.run_id:
            self._pending_canary.get(request.run_id, set()).discard(request.proposal.action)
        wait = self.clock - request.created_at
        self._decision_latency_total += wait
        self._emit("decision_wait", minutes=wait, kind="approval")
        record = self._write_record(
            request.proposal, request.outcome, resolution,
            getattr(request, "_inputs"), getattr(request, "_trace_extra"),
            getattr(request, "_run"), getattr(request, "_incident_fault"),
            override_action=override,
        )
        request.decision_id = record.id
        self.ledger.append(AuditEvent(
            kind="approval_resolved",
            timestamp=self.clock,
            data={"request_id": request_id, "resolution": resolution,
                  "operator_id": operator_id, "final_action": record.final_action,
                  "decision_id": record.id},
            trace_ids=(request.proposal.trace_id,),
        ))
        state = self.trust[request.proposal.agent_id]
        if state.tier == "T1":
            self._trust_sample(request.proposal.agent_id, trust_mod.KIND_APPROVAL,
                               correct=resolution == "approved", violation=False,
                               decision_id=record.id)
        if record.final_action != NO_ACTION:
            getattr(request, "_executor")(record.final_action)
        return request

    def expire_approvals(self, now: int) -> list[ApprovalRequest]:
        """Resolve overdue requests with the per-stage safe fallback."""
        expired = []
        for request in list(self.approvals.values()):
            if request.resolution != "pending" or now < request.deadline:
                continue
            fallback = EXPIRY_FALLBACK.get(request.proposal.stage, NO_ACTION)
            if self.global_kill:
                # the kill switch disables every autonomous execution path,
                # timeout fallbacks included; the record still lands
                fallback = NO_ACTION
            request.resolution = "expired"
            request.resolved_at = now
            if request.proposal.stage == Stage.CANARY_ANALYSIS and request.run_id:
                self._pending_canary.get(request.run_id, set()).discard(request.proposal.action)
            record = self._write_record(
                request.proposal, request.outcome, "expired",
                getattr(request, "_inputs"), getattr(request, "_trace_extra"),
                getattr(request, "_run"), getattr(request, "_incident_fault"),
                fallback_action=fallback,
            )
            request.decision_id = record.id
            self.ledger.append(AuditEvent(
                kind="approval_timeout",
                timestamp=now,
                data={"request_id": request.request_id, "fallback_action": fallback,
                      "decision_id": record.id,
                      "deadline": minutes_to_iso(request.deadline)},
                trace_ids=(request.proposal.trace_id,),
            ))
            self._emit("approval_expired", request_id=request.request_id, fallback=fallback)
            if fallback != NO_ACTION:
                getattr(request, "_executor")(fallback)
            elif request.proposal.stage == Stage.SECURITY_GATE and getattr(request, "_run") is not None:
                self._fail_pipeline(getattr(request, "_run"), "security")
            expired.append(request)
        return expired

    def _write_record(self, proposal, outcome, resolution, inputs, trace_extra, run,
                      incident_fault, override_action=None, fallback_action=None) -> DecisionRecord:
        record = finalize_record(
            proposal, outcome, resolution, self.clock,
            record_id=self._next_id("decision", "d"),
            override_action=override_action,
            fallback_action=fallback_action,
            inputs=inputs,
            extra_trace_ids=trace_extra,
        )
        self.ledger.append(record)
        self._record_index[record.id] = record
        self._emit("decision", decision_id=record.id, stage=record.stage.value,
                   run_id=run.run_id if run else None,
                   final_action=record.final_action, proposed_action=record.proposed_action,
                   policy_outcome=record.policy_outcome.value,
                   human_overridden=record.human_overridden)
        if incident_fault is not None:
            inc_id = self.incident_by_fault.get(incident_fault.fault_id)
            if inc_id:
                self.incidents[inc_id].decision_ids.append(record.id)
        elif run is not None:
            for f in self.faults:
                if f.target == "canary" and f.epoch == run.commit_idx:
                    inc_id = self.incident_by_fault.get(f.fault_id)
                    if inc_id and self.incidents[inc_id].resolved_at is None:
                        self.incidents[inc_id].decision_ids.append(record.id)
        return record

    def _adjudicate(self, proposal: AgentProposal, oracle_action: str, tier: str,
                    true_fault: bool) -> None:
        self._emit(
            "adjudication",
            stage=proposal.stage.value,
            agent_id=proposal.agent_id,
            proposed=proposal.action,
            oracle=oracle_action,
            correct=proposal.action == oracle_action,
            tier=tier,
            protective=proposal.action in ("rollback", "block"),
            true_fault=true_fault,
            trace_id=proposal.trace_id,
        )

    def _trust_sample(self, agent_id: str, kind: str, correct: bool, violation: bool,
                      decision_id: str) -> None:
        state = self.trust[agent_id]
        if kind != trust_mod.expected_kind(state.tier):
            return
        state = trust_mod.record_outcome(state, trust_mod.OutcomeSample(
            decision_id=decision_id, kind=kind, correct=correct,
            policy_violation_attempt=violation, timestamp=self.clock,
        ))
        verdict, state = trust_mod.evaluate_transition(
            state, max_tier=self.scenario.max_tier_at(self.clock), now=self.clock,
        )
        self.trust[agent_id] = state
        if verdict != "stay":
            self.ledger.append(AuditEvent(
                kind="tier_transition",
                timestamp=self.clock,
                data={"agent_id": agent_id, "verdict": verdict, "tier": state.tier},
            ))
            self._emit("tier_transition", agent_id=agent_id, verdict=verdict, tier=state.tier)

    def _score_autonomous(self, agent_id: str, decision_id: str, run: PipelineRun | None) -> None:
        horizon = self.scenario.deploy.attribution_horizon_minutes
        attributed = False
        for incident in self.incidents.values():
            if run is not None and incident.run_id == run.run_id:
                if incident.onset > self.clock - horizon and incident.resolved_at is None:
                    attributed = True
        self._trust_sample(agent_id, trust_mod.KIND_AUTONOMOUS, correct=not attributed,
                           violation=False, decision_id=decision_id)

    # -- task queue ------------------------------------------------------------------

    def _run_due_tasks(self, t: int) -> None:
        while self._tasks and self._tasks[0][0] <= t:
            _, _, fn = heapq.heappop(self._tasks)
            fn()

    # -- baseline arm (modeled humans, no agents) -------------------------------------

    def _human_wait(self, minutes: int, kind: str) -> None:
        self._human_wait_total += minutes
        self._emit("human_wait", minutes=minutes, kind=kind)

    def _human_record(self, stage: Stage, action: str, run: PipelineRun | None,
                      rationale: str, trace_id: str) -> DecisionRecord:
        proposal = AgentProposal(
            stage=stage, action=action, confidence=1.0,
            evidence=(), rationale=rationale, trace_id=trace_id,
            agent_id="human-operator", agent_version="human", model_id="human",
        )
        outcome = PolicyOutcome(Verdict.ALLOW, (), policy_version="manual")
        record = finalize_record(
            proposal, outcome, "approved", self.clock,
            record_id=self._next_id("decision", "d"),
            inputs={"metrics": {}, "logs": [], "context": {}, "agent_id": "human-operator"},
        )
        self.ledger.append(record)
        self._record_index[record.id] = record
        self._emit("decision", decision_id=record.id, stage=stage.value,
                   run_id=run.run_id if run else None, final_action=action,
                   proposed_action=action, policy_outcome="ALLOW", human_overridden=False)
        return record

    def _baseline_triage(self, run: PipelineRun, t: int) -> None:
        wait = self.scenario.human.baseline_triage_minutes
        self._human_wait(wait * len(run.failing_tests), "triage")
        for test_id in list(run.failing_tests):
            self._schedule(t + wait, lambda tid=test_id: self._baseline_handle_failure(run, tid))

    def _baseline_handle_failure(self, run: PipelineRun, test_id: str) -> None:
        if run.terminal:
            return
        action = self._oracle_triage(test_id, run, self.quarantine_budget)
        if action == "retry" and run.retry_counts.get(test_id, 0) >= self.bundle.retry_cap_preprod:
            action = "fail"  # baseline operators respect the same retry discipline
        self._human_record(Stage.TEST_FAILURES, action, run,
                           f"manual triage of {test_id}", f"triage-{run.run_id}-{test_id}")
        self._execute_test_action(run, test_id, action)

    def _baseline_security(self, run: PipelineRun, findings: list[Mapping[str, Any]], t: int) -> None:
        wait = self.scenario.human.baseline_approval_minutes
        self._human_wait(wait, "security_review")
        action = self._oracle_security(findings)

        def resolve() -> None:
            if run.terminal:
                return
            self._human_record(Stage.SECURITY_GATE, action, run, "manual security review",
                               f"sec-{run.run_id}")
            self._execute_security_action(run, action)

        self._schedule(t + wait, resolve)

    def _baseline_promote_check(self, run: PipelineRun) -> None:
        if run.terminal or run.canary_started is None:
            return
        # the reviewer only knows about degradation that has been detected;
        # a fault younger than the detection latency slips through the gate
        detected = [
            f for f in self._live_faults(self.clock, "canary")
            if f.kind in USER_IMPACTING_KINDS
            and self.clock - f.onset >= self.scenario.human.baseline_detection_minutes
        ]
        if detected:
            self._human_record(Stage.CANARY_ANALYSIS, "rollback", run, "manual canary review",
                               f"canary-{run.run_id}")
            self._execute_canary_action(run, "rollback")
            return
        self._human_record(Stage.CANARY_ANALYSIS, "promote", run, "manual canary review",
                           f"canary-{run.run_id}")
        self._execute_canary_action(run, "promote")

    def _baseline_monitoring(self, t: int) -> None:
        for fault in self.faults:
            if fault.kind not in USER_IMPACTING_KINDS:
                continue
            inc_id = self.incident_by_fault.get(fault.fault_id)
            if inc_id is None:
                continue
            incident = self.incidents[inc_id]
            if incident.resolved_at is not None or incident.detected_at is not None:
                continue
            if t - incident.onset >= self.scenario.human.baseline_detection_minutes:
                incident.detected_at = t
                self._human_wait(self.scenario.human.baseline_detection_minutes, "detection")
                wait = self.scenario.human.baseline_approval_minutes
                self._human_wait(wait, "incident_approval")
                self._schedule(t + wait, lambda f=fault: self._baseline_mitigate(f))
        self._baseline_flag_toil(t)

    def _baseline_flag_toil(self, t: int) -> None:
        # humans tune the same feature flags on the same cadence, each step
        # waiting on a manual review
        latest = None
        for run in self.pipelines:
            if run.promoted_at is not None and run.rolled_back_at is None:
                if latest is None or run.promoted_at > latest.promoted_at:
                    latest = run
        run = latest
        if run is None or run.next_flag_check is None or t < run.next_flag_check:
            return
        if run.flag_ramp_pct >= 100.0:
            return
        run.next_flag_check = t + self.scenario.deploy.flag_interval_ticks
        wait = self.scenario.human.baseline_approval_minutes
        self._human_wait(wait, "flag_review")

        def execute(r=run) -> None:
            if r.rolled_back_at is not None:
                return
            r.flag_ramp_pct = min(100.0, r.flag_ramp_pct + self.scenario.deploy.ramp_step_pp)
            self._human_record(Stage.FEATURE_FLAGS, "ramp_up", r, "manual flag review",
                               f"flag-{r.run_id}-{t}")
            self._emit("flag_ramp", run_id=r.run_id, ramp=r.flag_ramp_pct, action="ramp_up")

        self._schedule(t + wait, execute)

    def _baseline_mitigate(self, fault: FaultSpec) -> None:
        inc_id = self.incident_by_fault.get(fault.fault_id)
        if inc_id is None or self.incidents[inc_id].resolved_at is not None:
            return
        if fault.target == "canary":
            run = self._run_for_epoch(fault.epoch)
            if run is not None and run.rolled_back_at is None:
                phase = "canary" if run.promoted_at is None else "prod"
                stage = Stage.CANARY_ANALYSIS if phase == "canary" else Stage.INCIDENT_RESPONSE
                self._human_record(stage, "rollback", run, "manual incident response",
                                   f"incident-{fault.fault_id}")
                self._rollback(run, phase)
        else:
            self._human_record(Stage.DEPLOYMENT_HEALTH, "auto_scale", None,
                               "manual scale-out", f"incident-{fault.fault_id}")
            self._execute_health_action(fault, "auto_scale")

    # -- snapshots for the API/console --------------------------------------------------

    def status(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario.name,
            "seed": self.seed,
            "mode": self.mode,
            "clock": self.clock,
            "clock_iso": minutes_to_iso(max(self.clock, 0)),
            "horizon_minutes": self.scenario.horizon_minutes,
            "pipelines": len(self.pipelines),
            "promoted": sum(1 for p in self.pipelines if p.promoted_at is not None),
            "ledger_entries": len(self.ledger),
            "pending_approvals": sum(1 for a in self.approvals.values() if a.resolution == "pending"),
            "kill_switch_engaged": self.global_kill,
            "policy_version": self.bundle.version,
        }

    def tier_state(self) -> dict[str, Any]:
        return {
            "kill_switch_engaged": self.global_kill,
            "agents": {
                agent_id: {
                    "tier": state.tier,
                    "effective_tier": state.effective_tier,
                    "window": len(state.window),
                    "violations_in_window": state.violations_in_window,
                }
                for agent_id, state in sorted(self.trust.items())
            },
        }

    def pending_approvals(self) -> list[dict[str, Any]]:
        return [a.to_dict() for a in self.approvals.values() if a.resolution == "pending"]


def _stage_actions(stage: Stage) -> frozenset[str]:
    from .model import ACTION_CATALOG

    return ACTION_CATALOG[stage]


def _restrict_suite(suite, tests):
    from .telemetry import SuiteProfile

    keep = tuple(t for t in suite.tests if t in set(tests))
    return SuiteProfile(
        tests=keep,
        flaky={k: v for k, v in suite.flaky.items() if k in set(tests)},
        base_pass_prob=suite.base_pass_prob,
        suite_id=suite.suite_id,
    )


def _reanchor(fault: FaultSpec, onset: int) -> FaultSpec:
    return FaultSpec(
        fault_id=fault.fault_id,
        kind=fault.kind,
        magnitude=fault.magnitude,
        onset=onset,
        duration=fault.duration,
        target=fault.target,
        epoch=fault.epoch,
        tests=fault.tests,
    )


def run_simulation(
    scenario: Scenario,
    seed: int,
    mode: str,
    bundle: PolicyBundle | None = None,
    out_dir: str | Path | None = None,
) -> SimulationEngine:
    """Run one arm to the horizon and write its artifacts."""
    engine = SimulationEngine(scenario, seed, bundle=bundle, mode=mode, out_dir=out_dir)
    engine.run()
    return engine
