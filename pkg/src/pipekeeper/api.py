"""HTTP + server-sent-events surface for live runs.

A thin translation layer: every verdict and metric comes from the core
modules; mutations are enqueued into the engine's single event loop and
take effect at the next tick boundary. All endpoints require the static
bearer token from PIPEKEEPER_TOKEN (single trust level).
"""

from __future__ import annotations

import json
import os
import threading
import time
from pathlib import Path
from typing import Any, Iterator

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import FileResponse, StreamingResponse

from .evaluation import ai_metrics, dora_metrics
from .ledger import LedgerQuery
from .model import ACTION_CATALOG, DecisionRecord, minutes_to_iso
from .orchestrator import SimulationEngine

DEFAULT_PORT = 7377
TOKEN_ENV = "PIPEKEEPER_TOKEN"


class RunController:
    """Owns a live engine and an optional pacing thread.

    realtime_factor maps simulated minutes to wall time: factor 600 plays
    one simulated minute every 0.1 s. With no factor, ticks advance only
    when step() is called (used by tests).
    """

    def __init__(self, engine: SimulationEngine, realtime_factor: float | None = None):
        self.engine = engine
        self.realtime_factor = realtime_factor
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.finished = False

    def start(self) -> None:
        if self.realtime_factor is None or self._thread is not None:
            return
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        pause = 60.0 / self.realtime_factor
        horizon = self.engine.scenario.horizon_minutes
        while not self._stop.is_set() and self.engine.clock + 1 < horizon:
            self.engine.step()
            time.sleep(pause)
        if not self._stop.is_set():
            self.engine.finalize()
        self.finished = True

    def stop(self) -> None:
        self._stop.set()

    def step(self, ticks: int = 1) -> None:
        for _ in range(ticks):
            self.engine.step()


def _payload_dict(entry) -> dict[str, Any]:
    obj = entry.parsed()
    if isinstance(obj, DecisionRecord):
        from .model import record_to_dict

        body = record_to_dict(obj)
        body["payload_kind"] = "decision"
        body["tick"] = obj.timestamp
    else:
        body = obj.to_dict()
        body["payload_kind"] = "audit"
        body["tick"] = obj.timestamp
    return {
        "sequence": entry.sequence,
        "entry_hash_hex": entry.entry_hash.hex(),
        "prev_hash_hex": entry.prev_hash.hex(),
        # exact canonical bytes, so clients can recompute the chain
        "payload_text": entry.payload.decode("utf-8"),
        "payload": body,
    }


def create_app(controller: RunController, token: str | None = None,
               static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="pipekeeper", version="0.1.0")
    expected = token if token is not None else os.environ.get(TOKEN_ENV, "")
    engine = controller.engine

    def authorize(request: Request) -> None:
        if not expected:
            raise HTTPException(401, "server has no token configured")
        header = request.headers.get("authorization", "")
        if header != f"Bearer {expected}":
            raise HTTPException(401, "bad token")

    auth = Depends(authorize)

    @app.get("/run", dependencies=[auth])
    def run_status() -> dict[str, Any]:
        return {**engine.status(), "finished": controller.finished}

    @app.get("/decisions", dependencies=[auth])
    def decisions(
        stage: str | None = None,
        policy_outcome: str | None = None,
        human_overridden: bool | None = None,
        trace_id: str | None = None,
        kind: str | None = None,
        since: int = 0,
        limit: int = 200,
    ) -> dict[str, Any]:
        query = LedgerQuery(stage=stage, policy_outcome=policy_outcome,
                            human_overridden=human_overridden, trace_id=trace_id, kind=kind)
        hits = [e for e in engine.ledger.query(query) if e.sequence >= since]
        return {
            "total": len(hits),
            "entries": [_payload_dict(e) for e in hits[:limit]],
            "head_sequence": len(engine.ledger) - 1,
        }

    @app.get("/decisions/{decision_id}", dependencies=[auth])
    def decision_detail(decision_id: str) -> dict[str, Any]:
        for entry in engine.ledger.entries():
            obj = entry.parsed()
            if isinstance(obj, DecisionRecord) and obj.id == decision_id:
                return _payload_dict(entry)
        raise HTTPException(404, f"unknown decision {decision_id}")

    @app.get("/approvals/pending", dependencies=[auth])
    def approvals_pending() -> dict[str, Any]:
        now = max(engine.clock, 0)
        pending = engine.pending_approvals()
        for item in pending:
            item["now"] = now
            item["now_iso"] = minutes_to_iso(now)
            item["minutes_remaining"] = max(0, item["deadline"] - now)
        return {"pending": pending, "now": now}

    @app.post("/approvals/{request_id}", dependencies=[auth])
    def resolve_approval(request_id: str, body: dict[str, Any]) -> dict[str, Any]:
        verdict = body.get("verdict")
        if verdict not in ("approve", "deny", "override"):
            raise HTTPException(422, f"unknown verdict {verdict!r}")
        request = engine.approvals.get(request_id)
        if request is None:
            raise HTTPException(404, f"unknown approval {request_id}")
        if request.resolution != "pending":
            raise HTTPException(409, f"approval already {request.resolution}")
        action = body.get("action")
        if verdict == "override":
            if not action:
                raise HTTPException(422, "override needs an action")
            stage = request.proposal.stage
            if action != "none" and action not in ACTION_CATALOG[stage]:
                raise HTTPException(422, f"action {action!r} not allowed at {stage.value}")
        engine.enqueue_command({
            "kind": "approval",
            "request_id": request_id,
            "verdict": verdict,
            "action": action,
            "operator_id": body.get("operator_id", "console"),
        })
        return {"status": "queued", "request_id": request_id, "verdict": verdict}

    @app.post("/killswitch", dependencies=[auth])
    def killswitch(body: dict[str, Any]) -> dict[str, Any]:
        engage = body.get("engage")
        if not isinstance(engage, bool):
            raise HTTPException(422, "body needs boolean 'engage'")
        engine.enqueue_command({
            "kind": "killswitch",
            "engage": engage,
            "operator_id": body.get("operator_id", "console"),
        })
        return {"status": "queued", "engage": engage}

    @app.get("/tier", dependencies=[auth])
    def tier() -> dict[str, Any]:
        return engine.tier_state()

    @app.get("/metrics", dependencies=[auth])
    def metrics() -> dict[str, Any]:
        dora = dora_metrics(engine.events)
        ai = ai_metrics(engine.ledger.entries(), engine.events)
        return {"dora": dora.to_dict(), "ai": ai.to_dict(), "clock": engine.clock}

    @app.get("/events", dependencies=[auth])
    def events(request: Request, since: int = 0) -> StreamingResponse:
        def stream() -> Iterator[str]:
            cursor = since
            telemetry_seen: dict[str, str] = {}
            idle = 0
            while True:
                sent = False
                entries = engine.ledger.entries(cursor)
                for entry in entries:
                    payload = json.dumps(_payload_dict(entry), sort_keys=True)
                    yield f"id: {entry.sequence}\nevent: ledger\ndata: {payload}\n\n"
                    cursor = entry.sequence + 1
                    sent = True
                for population, window in sorted(engine._last_windows.items()):
                    if telemetry_seen.get(population) != window.window_id:
                        telemetry_seen[population] = window.window_id
                        yield ("event: telemetry\ndata: "
                               + json.dumps(window.to_dict(), sort_keys=True) + "\n\n")
                        sent = True
                if controller.finished and not sent:
                    yield "event: end\ndata: {}\n\n"
                    return
                if not sent:
                    idle += 1
                    if idle % 50 == 0:
                        yield ": keepalive\n\n"
                    time.sleep(0.05)
                else:
                    idle = 0

        return StreamingResponse(stream(), media_type="text/event-stream")

    if static_dir is not None:
        static_path = Path(static_dir)

        @app.get("/")
        def index() -> FileResponse:
            return FileResponse(static_path / "index.html")

        @app.get("/assets/{name}")
        def asset(name: str) -> FileResponse:
            root = (static_path / "assets").resolve()
            target = (root / name).resolve()
            if not str(target).startswith(str(root)) or not target.is_file():
                raise HTTPException(404, "no such asset")
            return FileResponse(target)

    return app


def serve(engine: SimulationEngine, port: int = DEFAULT_PORT, token: str | None = None,
          realtime_factor: float = 600.0, static_dir: str | Path | None = None) -> None:
    """Run the live service until the simulation completes or is stopped."""
    import uvicorn

    controller = RunController(engine, realtime_factor)
    app = create_app(controller, token=token, static_dir=static_dir)
    controller.start()
    try:
        uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
    finally:
        controller.stop()
