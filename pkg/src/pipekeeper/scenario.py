"""Scenario configuration: service profiles, test suite, chaos mixture,
human-latency models, deployment pacing, and the phased trust plan.

Scenarios are TOML files; everything that shapes a run lives here so that
(scenario, seed) fully determines the output.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .model import PipekeeperError
from .telemetry import FAULT_KINDS, Profile, SuiteProfile

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ScenarioError(PipekeeperError):
    code = "scenario_invalid"


@dataclass(frozen=True)
class HumanModel:
    """Modeled operator latencies, in simulated minutes.

    The baseline arm pays detection + approval + triage latencies at every
    human touchpoint; the augmented arm pays only the (usually shorter)
    response latency on approval requests. mode="none" leaves augmented
    approvals unanswered so timeout fallbacks fire.
    """

    baseline_detection_minutes: int = 20
    baseline_approval_minutes: int = 15
    baseline_triage_minutes: int = 15
    augmented_response_minutes: int = 10
    mode: str = "model"  # model | none

    # modeled reviewers follow the scenario oracle; probability they rubber-
    # stamp a proposal they disagree with instead of overriding it
    agreement_slack: float = 0.0


@dataclass(frozen=True)
class DeployPlan:
    initial_ramp_pct: float = 10.0
    ramp_step_pp: float = 10.0
    ramp_interval_ticks: int = 10
    flag_interval_ticks: int = 30
    max_precommit_ramp_pct: float = 20.0
    soak_ticks: int = 30
    approval_window_minutes: int = 15
    attribution_horizon_minutes: int = 30
    # fixed stage durations (minutes)
    build_minutes: int = 8
    test_minutes: int = 10
    security_minutes: int = 4
    deploy_setup_minutes: int = 3
    retry_minutes: int = 2


@dataclass(frozen=True)
class TrustPhase:
    start_day: int
    max_tier: str


@dataclass(frozen=True)
class Scenario:
    name: str
    horizon_days: int
    commit_interarrival_minutes: int
    first_commit_minute: int
    baseline_profile: Profile
    canary_profile: Profile
    suite: SuiteProfile
    flaky_flip_prob: float
    quarantine_budget: int
    slo_p95_ms: float
    slo_error_budget_pp: float
    chaos_rate: float
    chaos_kinds: tuple[str, ...]
    chaos_weights: tuple[float, ...] | None
    chaos_duration_minutes: int
    pinned_faults: tuple[Mapping[str, Any], ...]
    security_findings: Mapping[int, tuple[Mapping[str, Any], ...]]  # commit index -> findings
    human: HumanModel
    deploy: DeployPlan
    trust_phases: tuple[TrustPhase, ...]
    initial_tier: str = "T0"
    coverage_changed_commits: tuple[int, ...] = ()
    flag_attributed_faults: tuple[str, ...] = ()
    # optional mid-run bundle replacements: (minute, bundle path)
    bundle_swaps: tuple[tuple[int, str], ...] = ()
    base_dir: str | None = None

    @property
    def horizon_minutes(self) -> int:
        return self.horizon_days * 24 * 60

    def commit_minutes(self) -> list[int]:
        out = []
        t = self.first_commit_minute
        while t < self.horizon_minutes:
            out.append(t)
            t += self.commit_interarrival_minutes
        return out

    def max_tier_at(self, minute: int) -> str:
        day = minute // (24 * 60)
        tier = "T0"
        for phase in self.trust_phases:
            if day >= phase.start_day:
                tier = phase.max_tier
        return tier


def _profile_from(doc: Mapping[str, Any], defaults: Profile) -> Profile:
    return Profile(
        error_rate_pct=doc.get("error_rate_pct", defaults.error_rate_pct),
        latency_median_ms=doc.get("latency_median_ms", defaults.latency_median_ms),
        latency_sigma=doc.get("latency_sigma", defaults.latency_sigma),
        saturation_pct=doc.get("saturation_pct", defaults.saturation_pct),
        requests_per_window=doc.get("requests_per_window", defaults.requests_per_window),
    )


def load_scenario(source: str | Path | Mapping[str, Any]) -> Scenario:
    """Parse and validate a scenario document. Raises ScenarioError with a
    readable message for anything malformed."""
    base_dir: str | None = None
    if isinstance(source, Mapping):
        doc = dict(source)
    else:
        path = Path(source)
        base_dir = str(path.parent)
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ScenarioError(f"cannot load scenario: {exc}") from exc

    try:
        meta = doc.get("scenario", {})
        horizon_days = int(meta.get("horizon_days", 14))
        if horizon_days <= 0:
            raise ScenarioError("horizon_days must be positive")

        commits = doc.get("commits", {})
        interarrival = int(commits.get("interarrival_minutes", 480))
        if interarrival <= 0:
            raise ScenarioError("commit interarrival must be positive")

        base_profile = _profile_from(doc.get("profiles", {}).get("baseline", {}), Profile())
        canary_profile = _profile_from(doc.get("profiles", {}).get("canary", {}), base_profile)

        suite_doc = doc.get("suite", {})
        num_tests = int(suite_doc.get("num_tests", 30))
        flaky_count = int(suite_doc.get("flaky_tests", 2))
        if flaky_count > num_tests:
            raise ScenarioError("flaky_tests cannot exceed num_tests")
        flip = float(suite_doc.get("flaky_flip_prob", 0.5))
        tests = tuple(f"test_{i:03d}" for i in range(num_tests))
        flaky = {t: flip for t in tests[:flaky_count]}
        suite = SuiteProfile(
            tests=tests,
            flaky=flaky,
            base_pass_prob=float(suite_doc.get("base_pass_prob", 0.999)),
            suite_id=suite_doc.get("suite_id", "suite"),
        )

        slo = doc.get("slo", {})
        chaos = doc.get("chaos", {})
        kinds = tuple(chaos.get("kinds", FAULT_KINDS))
        unknown = set(kinds) - set(FAULT_KINDS)
        if unknown:
            raise ScenarioError(f"unknown chaos kinds: {sorted(unknown)}")
        weights = chaos.get("weights")
        if weights is not None and len(weights) != len(kinds):
            raise ScenarioError("chaos weights must match kinds")

        security = {}
        for entry in doc.get("security", {}).get("findings", []):
            security[int(entry["commit"])] = tuple(entry.get("items", []))

        human_doc = doc.get("human", {})
        human = HumanModel(
            baseline_detection_minutes=int(human_doc.get("baseline_detection_minutes", 20)),
            baseline_approval_minutes=int(human_doc.get("baseline_approval_minutes", 15)),
            baseline_triage_minutes=int(human_doc.get("baseline_triage_minutes", 15)),
            augmented_response_minutes=int(human_doc.get("augmented_response_minutes", 10)),
            mode=human_doc.get("mode", "model"),
            agreement_slack=float(human_doc.get("agreement_slack", 0.0)),
        )
        if human.mode not in ("model", "none"):
            raise ScenarioError(f"unknown human mode {human.mode!r}")

        deploy_doc = doc.get("deploy", {})
        deploy = DeployPlan(
            initial_ramp_pct=float(deploy_doc.get("initial_ramp_pct", 10.0)),
            ramp_step_pp=float(deploy_doc.get("ramp_step_pp", 10.0)),
            ramp_interval_ticks=int(deploy_doc.get("ramp_interval_ticks", 10)),
            flag_interval_ticks=int(deploy_doc.get("flag_interval_ticks", 30)),
            max_precommit_ramp_pct=float(deploy_doc.get("max_precommit_ramp_pct", 20.0)),
            soak_ticks=int(deploy_doc.get("soak_ticks", 30)),
            approval_window_minutes=int(deploy_doc.get("approval_window_minutes", 15)),
            attribution_horizon_minutes=int(deploy_doc.get("attribution_horizon_minutes", 30)),
            build_minutes=int(deploy_doc.get("build_minutes", 8)),
            test_minutes=int(deploy_doc.get("test_minutes", 10)),
            security_minutes=int(deploy_doc.get("security_minutes", 4)),
            deploy_setup_minutes=int(deploy_doc.get("deploy_setup_minutes", 3)),
            retry_minutes=int(deploy_doc.get("retry_minutes", 2)),
        )

        phases = []
        for ph in doc.get("trust", {}).get("phases", [{"start_day": 0, "max_tier": "T3"}]):
            tier = ph["max_tier"]
            if tier not in ("T0", "T1", "T2", "T3"):
                raise ScenarioError(f"unknown tier {tier!r} in trust phases")
            phases.append(TrustPhase(start_day=int(ph["start_day"]), max_tier=tier))
        phases.sort(key=lambda p: p.start_day)
        initial_tier = doc.get("trust", {}).get("initial_tier", "T0")
        if initial_tier not in ("T0", "T1", "T2", "T3"):
            raise ScenarioError(f"unknown initial tier {initial_tier!r}")

        swaps = tuple(
            (int(s["at_minutes"]), str(s["bundle"]))
            for s in doc.get("policy", {}).get("swaps", [])
        )

        return Scenario(
            name=meta.get("name", "scenario"),
            horizon_days=horizon_days,
            commit_interarrival_minutes=interarrival,
            first_commit_minute=int(commits.get("first_at_minutes", 60)),
            baseline_profile=base_profile,
            canary_profile=canary_profile,
            suite=suite,
            flaky_flip_prob=flip,
            quarantine_budget=int(suite_doc.get("quarantine_budget", 2)),
            slo_p95_ms=float(slo.get("p95_ms", 200.0)),
            slo_error_budget_pp=float(slo.get("error_budget_pp", 2.0)),
            chaos_rate=float(chaos.get("rate", 0.0)),
            chaos_kinds=kinds,
            chaos_weights=tuple(weights) if weights else None,
            chaos_duration_minutes=int(chaos.get("duration_minutes", 240)),
            pinned_faults=tuple(doc.get("faults", {}).get("pinned", [])),
            security_findings=security,
            human=human,
            deploy=deploy,
            trust_phases=tuple(phases),
            initial_tier=initial_tier,
            coverage_changed_commits=tuple(doc.get("suite", {}).get("coverage_changed_commits", [])),
            flag_attributed_faults=tuple(chaos.get("flag_attributed_faults", [])),
            bundle_swaps=swaps,
            base_dir=base_dir,
        )
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"scenario document invalid: {exc}") from exc
