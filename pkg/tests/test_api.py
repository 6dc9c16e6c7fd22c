from __future__ import annotations

import json
import time

import pytest
from fastapi.testclient import TestClient

from pipekeeper.api import RunController, create_app
from pipekeeper.orchestrator import SimulationEngine
from pipekeeper.scenario import load_scenario

from .test_orchestrator import scenario_doc, spike_fault

TOKEN = "test-token"


def make_controller(doc=None, seed=7) -> RunController:
    doc = doc or scenario_doc()
    engine = SimulationEngine(load_scenario(doc), seed=seed, mode="augmented")
    return RunController(engine)


@pytest.fixture
def live():
    doc = scenario_doc()
    doc["human"] = {"mode": "none"}
    doc["trust"] = {"phases": [{"start_day": 0, "max_tier": "T1"}], "initial_tier": "T1"}
    doc["faults"] = {"pinned": [spike_fault()]}
    controller = make_controller(doc)
    client = TestClient(create_app(controller, token=TOKEN))
    client.headers["Authorization"] = f"Bearer {TOKEN}"
    return controller, client


class TestAuth:
    def test_missing_token_is_401(self, live):
        _, client = live
        assert client.get("/run", headers={"Authorization": ""}).status_code == 401

    def test_wrong_token_is_401(self, live):
        _, client = live
        assert client.get("/run", headers={"Authorization": "Bearer nope"}).status_code == 401

    def test_mutations_need_token_too(self, live):
        _, client = live
        r = client.post("/killswitch", json={"engage": True}, headers={"Authorization": ""})
        assert r.status_code == 401


class TestEndpoints:
    def test_run_status(self, live):
        controller, client = live
        controller.step(5)
        body = client.get("/run").json()
        assert body["clock"] == 4
        assert body["mode"] == "augmented"

    def test_approval_round_trip_executes_next_tick(self, live):
        controller, client = live
        while not controller.engine.pending_approvals() and controller.engine.clock < 200:
            controller.step()
        pending = client.get("/approvals/pending").json()["pending"]
        assert pending
        request_id = pending[0]["request_id"]
        assert pending[0]["minutes_remaining"] > 0
        r = client.post(f"/approvals/{request_id}", json={"verdict": "approve", "operator_id": "op"})
        assert r.status_code == 200 and r.json()["status"] == "queued"
        controller.step()  # command applies at the tick boundary
        assert controller.engine.approvals[request_id].resolution == "approved"
        # audit trail round trip
        decisions = client.get("/decisions", params={"kind": "approval_resolved"}).json()
        assert decisions["total"] >= 1

    def test_unknown_approval_404(self, live):
        _, client = live
        assert client.post("/approvals/apr-nope", json={"verdict": "approve"}).status_code == 404

    def test_already_resolved_409(self, live):
        controller, client = live
        while not controller.engine.pending_approvals() and controller.engine.clock < 200:
            controller.step()
        request_id = controller.engine.pending_approvals()[0]["request_id"]
        client.post(f"/approvals/{request_id}", json={"verdict": "approve"})
        controller.step()
        assert client.post(f"/approvals/{request_id}", json={"verdict": "deny"}).status_code == 409

    def test_invalid_body_422(self, live):
        controller, client = live
        while not controller.engine.pending_approvals() and controller.engine.clock < 200:
            controller.step()
        request_id = controller.engine.pending_approvals()[0]["request_id"]
        assert client.post(f"/approvals/{request_id}", json={"verdict": "maybe"}).status_code == 422
        assert client.post(f"/approvals/{request_id}",
                           json={"verdict": "override"}).status_code == 422
        assert client.post(f"/approvals/{request_id}",
                           json={"verdict": "override", "action": "bogus"}).status_code == 422

    def test_killswitch_visible_in_tier(self, live):
        controller, client = live
        controller.step()
        r = client.post("/killswitch", json={"engage": True, "operator_id": "op"})
        assert r.status_code == 200
        controller.step()
        tier = client.get("/tier").json()
        assert tier["kill_switch_engaged"] is True
        assert all(a["effective_tier"] == "T0" for a in tier["agents"].values())

    def test_metrics_snapshot(self, live):
        controller, client = live
        controller.step(120)
        body = client.get("/metrics").json()
        assert "dora" in body and "ai" in body

    def test_decision_detail_and_404(self, live):
        controller, client = live
        controller.step(200)
        decisions = client.get("/decisions", params={"kind": "decision"}).json()
        if decisions["entries"]:
            decision_id = decisions["entries"][0]["payload"]["id"]
            detail = client.get(f"/decisions/{decision_id}")
            assert detail.status_code == 200
            assert detail.json()["payload"]["id"] == decision_id
        assert client.get("/decisions/d-nope").status_code == 404


class TestEventStream:
    def test_stream_delivers_ledger_in_sequence_order(self, live):
        controller, client = live
        controller.step(120)
        controller.finished = True  # let the stream terminate
        received = []
        with client.stream("GET", "/events", params={"since": 0}) as response:
            assert response.status_code == 200
            current_event = None
            for line in response.iter_lines():
                if line.startswith("event: "):
                    current_event = line.split(": ", 1)[1]
                elif line.startswith("data: ") and current_event == "ledger":
                    received.append(json.loads(line[6:]))
                elif current_event == "end":
                    break
        sequences = [e["sequence"] for e in received]
        assert sequences == sorted(sequences)
        assert sequences and sequences[0] == 0

    def test_cursor_reconnect_misses_nothing(self, live):
        controller, client = live
        controller.step(120)
        controller.finished = True
        total = len(controller.engine.ledger)
        cursor = total // 2
        received = []
        with client.stream("GET", "/events", params={"since": cursor}) as response:
            current_event = None
            for line in response.iter_lines():
                if line.startswith("event: "):
                    current_event = line.split(": ", 1)[1]
                elif line.startswith("data: ") and current_event == "ledger":
                    received.append(json.loads(line[6:]))
                elif current_event == "end":
                    break
        assert [e["sequence"] for e in received] == list(range(cursor, total))


class TestApiThinness:
    def test_api_driven_run_self_replays_exactly(self, live):
        # the service adds no business logic: a run steered over the API
        # still replays with zero divergence from its recorded snapshots
        from pipekeeper.evaluation import replay

        controller, client = live
        while not controller.engine.pending_approvals() and controller.engine.clock < 200:
            controller.step()
        request_id = controller.engine.pending_approvals()[0]["request_id"]
        client.post(f"/approvals/{request_id}", json={"verdict": "approve", "operator_id": "op"})
        controller.step(100)
        report = replay(controller.engine.ledger.entries())
        assert report.decisions_replayed > 0
        assert report.divergence_rate == 0.0
        assert report.verdict_divergence == 0.0


class TestPacedController:
    def test_background_pacing_advances_clock(self):
        doc = scenario_doc()
        engine = SimulationEngine(load_scenario(doc), seed=7, mode="augmented")
        controller = RunController(engine, realtime_factor=60000.0)
        controller.start()
        deadline = time.time() + 5.0
        while engine.clock < 50 and time.time() < deadline:
            time.sleep(0.01)
        controller.stop()
        assert engine.clock >= 50
