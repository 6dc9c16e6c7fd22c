"""Command-line surface: batch runs, reports, replay, A/B comparison,
ledger verification and query, policy checks, and the live server.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import evaluation
from .agents import build_agents
from .api import DEFAULT_PORT, TOKEN_ENV, serve as serve_api
from .ledger import LedgerQuery, query_file, read_export, verify_file
from .model import AgentProposal, PipekeeperError, Stage, record_to_dict
from .orchestrator import SimulationEngine, run_simulation
from .policy import EvaluationContext, default_bundle, evaluate, load_bundle
from .scenario import load_scenario


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


@click.group()
def main() -> None:
    """Policy-bounded decision control plane for CI/CD pipelines."""


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--mode", type=click.Choice(["augmented", "baseline", "both"]), default="augmented",
              show_default=True)
@click.option("--bundle", "bundle_file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Policy bundle (defaults to the packaged bundle).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def run(scenario_file: str, seed: int, mode: str, bundle_file: str | None, out_dir: str) -> None:
    """Run a scenario and write ledger, events, telemetry, and summary."""
    try:
        scenario = load_scenario(scenario_file)
        bundle = load_bundle(bundle_file) if bundle_file else default_bundle()
        modes = ["augmented", "baseline"] if mode == "both" else [mode]
        for arm in modes:
            arm_dir = Path(out_dir) / arm if mode == "both" else Path(out_dir)
            run_simulation(scenario, seed, arm, bundle=bundle, out_dir=arm_dir)
            summary = evaluation.write_summary(arm_dir)
            click.echo(f"{arm}: wrote {arm_dir} "
                       f"(promotions={summary['dora']['promotions']}, "
                       f"decisions={summary['decisions']})")
    except PipekeeperError as exc:
        _fail(str(exc))


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--port", type=int, default=DEFAULT_PORT, show_default=True)
@click.option("--bundle", "bundle_file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--realtime-factor", type=float, default=600.0, show_default=True,
              help="Simulated minutes per wall-clock minute.")
@click.option("--static", "static_dir", type=click.Path(file_okay=False, exists=True), default=None,
              help="Directory of console assets to serve at /.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
def serve(scenario_file: str, seed: int, port: int, bundle_file: str | None,
          realtime_factor: float, static_dir: str | None, out_dir: str | None) -> None:
    """Serve a live accelerated run for the operator console."""
    try:
        token = os.environ.get(TOKEN_ENV)
        if not token:
            _fail(f"{TOKEN_ENV} must be set to serve")
        scenario = load_scenario(scenario_file)
        bundle = load_bundle(bundle_file) if bundle_file else default_bundle()
        engine = SimulationEngine(scenario, seed, bundle=bundle, mode="augmented", out_dir=out_dir)
        click.echo(f"serving {scenario.name} on 127.0.0.1:{port} (factor {realtime_factor:g})")
        serve_api(engine, port=port, token=token, realtime_factor=realtime_factor,
                  static_dir=static_dir)
    except PipekeeperError as exc:
        _fail(str(exc))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["json", "markdown-table"]), default="json",
              show_default=True)
def report(run_dir: str, fmt: str) -> None:
    """Recompute and print a run's metrics from its exported artifacts."""
    try:
        summary = evaluation.summarize_run(run_dir)
        if fmt == "json":
            click.echo(json.dumps(summary, indent=2, sort_keys=True))
            return
        dora = summary["dora"]
        ai = summary["ai"]
        lines = ["| Metric | Value |", "| --- | --- |"]
        lines.append(f"| Lead Time (median) | {_fmt_min(dora['lead_time_median_minutes'])} |")
        lines.append(f"| Deployment Frequency | {_fmt_num(dora['deployment_frequency_per_day'])}/day |")
        lines.append(f"| Change Failure Rate | {_fmt_rate(dora['change_failure_rate'])} |")
        lines.append(f"| MTTR | {_fmt_min(dora['mttr_minutes'])} |")
        lines.append(f"| Human Override Rate | {_fmt_rate(ai['human_override_rate'])} |")
        lines.append(f"| Intervention Accuracy | {_fmt_rate(ai['intervention_accuracy'])} |")
        lines.append(f"| Policy Violations Blocked | {ai['policy_violations_blocked']} |")
        click.echo("\n".join(lines))
    except (PipekeeperError, OSError, KeyError) as exc:
        _fail(str(exc))


def _fmt_min(v) -> str:
    return f"{v:.0f} min" if v is not None else "-"


def _fmt_num(v) -> str:
    return f"{v:.1f}" if v is not None else "-"


def _fmt_rate(v) -> str:
    return f"{v * 100:.1f}%" if v is not None else "-"


@main.command()
@click.argument("ledger_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--bundle", "bundle_file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Alternate policy bundle for the counterfactual.")
@click.option("--agents", "agents_version", default=None,
              help="Alternate agent version label.")
def replay(ledger_file: str, bundle_file: str | None, agents_version: str | None) -> None:
    """Counterfactually re-evaluate a recorded ledger; executes nothing."""
    try:
        _, entries = read_export(ledger_file)
        bundle = load_bundle(bundle_file) if bundle_file else default_bundle()
        agents = build_agents(agent_version=agents_version) if agents_version else build_agents()
        result = evaluation.replay(entries, agents=agents, bundle=bundle)
        click.echo(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    except PipekeeperError as exc:
        _fail(str(exc))


@main.command()
@click.argument("baseline_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("augmented_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["json", "markdown-table"]), default="markdown-table",
              show_default=True)
def ab(baseline_dir: str, augmented_dir: str, fmt: str) -> None:
    """Paired baseline-vs-augmented comparison over two run directories."""
    try:
        base = evaluation.summarize_run(baseline_dir)
        aug = evaluation.summarize_run(augmented_dir)
        result = evaluation.ab_compare(base, aug)
        if fmt == "json":
            click.echo(json.dumps(result, indent=2, sort_keys=True))
        else:
            click.echo(evaluation.format_ab_markdown(result))
    except PipekeeperError as exc:
        _fail(str(exc))


@main.group()
def ledger() -> None:
    """Ledger verification and queries."""


@ledger.command("verify")
@click.argument("ledger_file", type=click.Path(exists=True, dir_okay=False))
def ledger_verify(ledger_file: str) -> None:
    """Verify the hash chain; prints the first bad sequence on tampering."""
    try:
        bad = verify_file(ledger_file)
    except PipekeeperError as exc:
        _fail(str(exc))
        return
    if bad is None:
        count = len(read_export(ledger_file)[1])
        click.echo(f"ok: {count} entries, chain intact")
    else:
        click.echo(f"TAMPERED: first bad sequence {bad}", err=True)
        sys.exit(1)


@ledger.command("query")
@click.argument("ledger_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--stage", default=None)
@click.option("--outcome", "policy_outcome", default=None)
@click.option("--overridden/--not-overridden", "human_overridden", default=None)
@click.option("--agent", "agent_id", default=None)
@click.option("--trace-id", default=None)
@click.option("--kind", default=None, help="decision | audit | an audit kind")
def ledger_query(ledger_file: str, stage: str | None, policy_outcome: str | None,
                 human_overridden: bool | None, agent_id: str | None,
                 trace_id: str | None, kind: str | None) -> None:
    """Print matching entries as JSONL."""
    try:
        query = LedgerQuery(stage=stage, policy_outcome=policy_outcome,
                            human_overridden=human_overridden, agent_id=agent_id,
                            trace_id=trace_id, kind=kind)
        for entry in query_file(ledger_file, query):
            obj = entry.parsed()
            body = record_to_dict(obj) if hasattr(obj, "proposed_action") else obj.to_dict()
            click.echo(json.dumps({"sequence": entry.sequence, **body}, sort_keys=True))
    except PipekeeperError as exc:
        _fail(str(exc))


@main.group()
def policy() -> None:
    """Policy bundle validation and one-off evaluation."""


@policy.command("check")
@click.argument("bundle_file", type=click.Path(exists=True, dir_okay=False))
def policy_check(bundle_file: str) -> None:
    """Validate a bundle document and print its effective version."""
    try:
        bundle = load_bundle(bundle_file)
        click.echo(f"ok: version {bundle.version}, {len(bundle.rules)} rules, "
                   f"min_confidence {bundle.min_confidence}")
    except PipekeeperError as exc:
        _fail(str(exc))


@policy.command("eval")
@click.argument("proposal_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("context_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--bundle", "bundle_file", type=click.Path(exists=True, dir_okay=False), default=None)
def policy_eval(proposal_file: str, context_file: str, bundle_file: str | None) -> None:
    """Evaluate one proposal JSON against one context JSON."""
    try:
        p_doc = json.loads(Path(proposal_file).read_text())
        c_doc = json.loads(Path(context_file).read_text())
        proposal = AgentProposal(
            stage=Stage(p_doc["stage"]),
            action=p_doc["action"],
            confidence=float(p_doc["confidence"]),
            evidence=tuple(p_doc.get("evidence", ())),
            rationale=p_doc.get("rationale", ""),
            trace_id=p_doc.get("trace_id", "cli"),
            agent_id=p_doc.get("agent_id", "cli"),
            agent_version=p_doc.get("agent_version", "cli"),
            model_id=p_doc.get("model_id", "cli"),
        )
        ctx = EvaluationContext.from_dict(c_doc)
        bundle = load_bundle(bundle_file) if bundle_file else default_bundle()
        outcome = evaluate(proposal, ctx, bundle)
        click.echo(json.dumps({
            "verdict": outcome.verdict.value,
            "policy_version": outcome.policy_version,
            "forced_action": outcome.forced_action,
            "triggered_rules": [
                {"rule_id": r.rule_id, "rule_kind": r.rule_kind, "matched": r.matched,
                 "observations": list(r.observations)}
                for r in outcome.triggered_rules
            ],
        }, indent=2, sort_keys=True))
    except (PipekeeperError, KeyError, ValueError) as exc:
        _fail(str(exc))


@main.group()
def tier() -> None:
    """Trust tier inspection (live server)."""


@tier.command("show")
@click.option("--url", default=f"http://127.0.0.1:{DEFAULT_PORT}", show_default=True)
@click.option("--token", default=None, help=f"Defaults to ${TOKEN_ENV}.")
def tier_show(url: str, token: str | None) -> None:
    _server_get(url, "/tier", token)


@main.command()
@click.argument("state", type=click.Choice(["on", "off"]))
@click.option("--url", default=f"http://127.0.0.1:{DEFAULT_PORT}", show_default=True)
@click.option("--token", default=None)
def killswitch(state: str, url: str, token: str | None) -> None:
    """Engage or release the kill switch on a live server."""
    _server_post(url, "/killswitch", {"engage": state == "on", "operator_id": "cli"}, token)


def _auth_headers(token: str | None) -> dict[str, str]:
    value = token or os.environ.get(TOKEN_ENV, "")
    return {"Authorization": f"Bearer {value}"}


def _server_get(url: str, path: str, token: str | None) -> None:
    import urllib.error
    import urllib.request

    req = urllib.request.Request(url + path, headers=_auth_headers(token))
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            click.echo(resp.read().decode())
    except (urllib.error.URLError, OSError) as exc:
        _fail(f"server unreachable: {exc}")


def _server_post(url: str, path: str, body: dict, token: str | None) -> None:
    import urllib.error
    import urllib.request

    data = json.dumps(body).encode()
    req = urllib.request.Request(url + path, data=data, method="POST",
                                 headers={**_auth_headers(token), "Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            click.echo(resp.read().decode())
    except (urllib.error.URLError, OSError) as exc:
        _fail(f"server unreachable: {exc}")


if __name__ == "__main__":
    main()
