"""Seeded synthetic telemetry: metrics windows for baseline and canary
populations, per-test outcomes, and chaos fault scheduling.

All randomness flows from named streams split off one 64-bit master seed,
so identical (scenario, seed) pairs produce byte-identical event streams.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .model import PipekeeperError

CHAOS_RATE_CAP = 0.15

FAULT_KINDS = (
    "latency_spike",
    "error_spike",
    "flaky_burst",
    "resource_saturation",
    "noisy_alerts",
    "regression_in_commit",
)

# magnitude ranges per kind (units differ: pp, ms, flip probability);
# latency spikes start at +180ms so a degraded canary p95 always clears the
# 200ms SLO term in the risk score
_MAGNITUDE_RANGES = {
    "error_spike": (2.5, 6.0),
    "latency_spike": (180.0, 340.0),
    "flaky_burst": (0.45, 0.7),
    "resource_saturation": (20.0, 35.0),
    "noisy_alerts": (20.0, 30.0),  # saturation bump accompanying the alert storm
    "regression_in_commit": (1.0, 1.0),
}

_TARGET_FOR_KIND = {
    "error_spike": "canary",
    "latency_spike": "canary",
    "flaky_burst": "suite",
    "resource_saturation": "baseline",
    "noisy_alerts": "baseline",
    "regression_in_commit": "suite",
}

# kinds whose activity degrades what users see (incidents open at onset)
USER_IMPACTING_KINDS = frozenset({"error_spike", "latency_spike", "resource_saturation"})


class TelemetryError(PipekeeperError):
    code = "telemetry_error"

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


def derive_stream(seed: int, name: str) -> random.Random:
    """Split a named deterministic stream off the master seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass(frozen=True)
class Profile:
    """Nominal service behavior for one population."""

    error_rate_pct: float = 1.0
    latency_median_ms: float = 120.0
    latency_sigma: float = 0.25
    saturation_pct: float = 55.0
    requests_per_window: int = 120


@dataclass(frozen=True)
class FaultSpec:
    fault_id: str
    kind: str
    magnitude: float
    onset: int  # simulated minute
    duration: int  # minutes, > 0
    target: str  # baseline | canary | suite
    epoch: int = 0  # deployment epoch the fault is attached to
    tests: tuple[str, ...] = ()  # targeted tests for suite faults

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise TelemetryError("invalid_fault", "duration must be positive")
        lo, hi = _MAGNITUDE_RANGES[self.kind]
        if not (lo <= self.magnitude <= hi):
            raise TelemetryError(
                "invalid_fault", f"{self.kind} magnitude {self.magnitude} outside [{lo}, {hi}]"
            )

    def active_at(self, minute: int) -> bool:
        return self.onset <= minute < self.onset + self.duration


@dataclass(frozen=True)
class TelemetryWindow:
    window_id: str
    population: str  # baseline | canary
    start: int
    end: int  # exclusive
    error_rate: float  # percent of requests
    p50_ms: float
    p95_ms: float
    saturation: float  # percent
    request_count: int
    alerts: tuple[dict[str, Any], ...] = ()

    def __post_init__(self) -> None:
        if self.request_count > 0 and self.p50_ms > self.p95_ms:
            raise TelemetryError("invalid_window", "p50 must not exceed p95")

    @property
    def noisy_alerts(self) -> bool:
        return any(a.get("noisy") for a in self.alerts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "window_id": self.window_id,
            "population": self.population,
            "start": self.start,
            "end": self.end,
            "error_rate": self.error_rate,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "saturation": self.saturation,
            "request_count": self.request_count,
            "alerts": list(self.alerts),
        }


def _percentile(sorted_values: Sequence[float], q: float) -> float:
    if not sorted_values:
        return 0.0
    idx = q * (len(sorted_values) - 1)
    lo = int(idx)
    hi = min(lo + 1, len(sorted_values) - 1)
    frac = idx - lo
    return sorted_values[lo] * (1 - frac) + sorted_values[hi] * frac


def gen_window(
    profile: Profile,
    population: str,
    interval: tuple[int, int],
    rng: random.Random,
    faults: Iterable[FaultSpec] = (),
    window_id: str | None = None,
) -> TelemetryWindow:
    """Sample one KPI window from the profile plus any active faults.

    Faults are applied as supplied; the caller decides which faults reach
    which population (canary faults never perturb baseline windows).
    """
    start, end = interval
    error_pp = 0.0
    latency_shift = 0.0
    saturation_pp = 0.0
    noisy = False
    for fault in faults:
        if fault.kind == "error_spike":
            error_pp += fault.magnitude
        elif fault.kind == "latency_spike":
            latency_shift += fault.magnitude
        elif fault.kind == "resource_saturation":
            saturation_pp += fault.magnitude
        elif fault.kind == "noisy_alerts":
            noisy = True
            saturation_pp += fault.magnitude

    n = profile.requests_per_window
    p_err = min(1.0, max(0.0, (profile.error_rate_pct + error_pp) / 100.0))
    errors = sum(1 for _ in range(n) if rng.random() < p_err)
    mu = profile.latency_median_ms
    samples = sorted(
        rng.lognormvariate(_ln(mu), profile.latency_sigma) + latency_shift for _ in range(n)
    )
    saturation = max(0.0, min(100.0, profile.saturation_pct + saturation_pp + rng.gauss(0, 1.5)))

    alerts: list[dict[str, Any]] = []
    if noisy:
        for i in range(3):
            alerts.append({"alert_id": f"al-{start}-{i}", "noisy": True})

    return TelemetryWindow(
        window_id=window_id or f"win-{population}-{start:06d}",
        population=population,
        start=start,
        end=end,
        error_rate=(errors / n * 100.0) if n else 0.0,
        p50_ms=_percentile(samples, 0.50) if n else 0.0,
        p95_ms=_percentile(samples, 0.95) if n else 0.0,
        saturation=saturation,
        request_count=n,
        alerts=tuple(alerts),
    )


def _ln(x: float) -> float:
    import math

    return math.log(x)


def schedule_chaos(
    rate: float,
    horizon_epochs: int,
    rng: random.Random,
    *,
    kinds: Sequence[str] = FAULT_KINDS,
    weights: Sequence[float] | None = None,
    epoch_minutes: int = 480,
    onset_offset_range: tuple[int, int] = (10, 110),
    duration_minutes: int = 240,
    suite_tests: Sequence[str] = (),
) -> list[FaultSpec]:
    """Each deployment epoch independently receives a fault with probability
    ``rate``; kinds are drawn from the configured mixture. Raises
    rate_exceeds_cap above the 15% injection ceiling."""
    if rate > CHAOS_RATE_CAP:
        raise TelemetryError("rate_exceeds_cap", f"chaos rate {rate} exceeds cap {CHAOS_RATE_CAP}")
    if rate < 0:
        raise TelemetryError("invalid_rate", "chaos rate must be non-negative")
    faults: list[FaultSpec] = []
    for epoch in range(horizon_epochs):
        if rng.random() >= rate:
            continue
        kind = rng.choices(list(kinds), weights=list(weights) if weights else None, k=1)[0]
        lo, hi = _MAGNITUDE_RANGES[kind]
        magnitude = lo if lo == hi else rng.uniform(lo, hi)
        offset = rng.randint(*onset_offset_range)
        tests: tuple[str, ...] = ()
        if kind in ("flaky_burst", "regression_in_commit") and suite_tests:
            count = 1 if kind == "regression_in_commit" else min(2, len(suite_tests))
            tests = tuple(sorted(rng.sample(list(suite_tests), count)))
        faults.append(
            FaultSpec(
                fault_id=f"fault-{epoch:04d}",
                kind=kind,
                magnitude=round(magnitude, 3),
                onset=epoch * epoch_minutes + offset,
                duration=duration_minutes,
                target=_TARGET_FOR_KIND[kind],
                epoch=epoch,
                tests=tests,
            )
        )
    return sorted(faults, key=lambda f: f.onset)


@dataclass(frozen=True)
class SuiteProfile:
    """Per-suite test behavior: a deterministic core plus a flaky subset."""

    tests: tuple[str, ...]
    flaky: Mapping[str, float] = field(default_factory=dict)  # test_id -> flip prob
    base_pass_prob: float = 0.999
    suite_id: str = "suite"


def gen_test_run(
    suite: SuiteProfile,
    revision: int,
    active_faults: Iterable[FaultSpec],
    rng: random.Random,
    prev_outcomes: Mapping[str, bool] | None = None,
) -> dict[str, bool]:
    """One suite execution. Flaky tests flip from their previous outcome
    with their flip probability; regression faults fail their targets
    deterministically at and after the faulty revision, so retries never
    flip them."""
    prev = dict(prev_outcomes or {})
    burst_targets: dict[str, float] = {}
    regressed: set[str] = set()
    for fault in active_faults:
        if fault.kind == "flaky_burst":
            for t in fault.tests:
                burst_targets[t] = max(burst_targets.get(t, 0.0), fault.magnitude)
        elif fault.kind == "regression_in_commit" and revision >= fault.epoch:
            regressed.update(fault.tests)

    outcomes: dict[str, bool] = {}
    for test_id in suite.tests:
        if test_id in regressed:
            outcomes[test_id] = False
            continue
        flip = suite.flaky.get(test_id)
        if test_id in burst_targets:
            flip = max(flip or 0.0, burst_targets[test_id])
        if flip is not None:
            last = prev.get(test_id, True)
            outcomes[test_id] = (not last) if rng.random() < flip else last
        else:
            outcomes[test_id] = rng.random() < suite.base_pass_prob
    return outcomes
