"""External service boundary: resource-oriented JSON endpoints plus a
one-way server-push event stream.

The gateway is a thin projection over a running lab runtime (store, engine,
orchestrator, bus). Severing it never halts execution: the runtime pumps on
its own thread, and a restarted gateway rebuilds its event journal from the
engine's committed log, so clients can resume from their last seen sequence
number. Mutating endpoints require an operator bearer token.

    GET  /health                      GET  /resources
    GET  /resources/{uuid}            GET  /resources/{uuid}/lineage
    GET  /graph                       POST /protocols/compile
    POST /task-groups                 GET  /task-groups/{id}
    POST /jobs/{id}/approve           GET  /events   (server-sent events)
"""

from __future__ import annotations

import argparse
import json
import threading
import time
from dataclasses import dataclass
from typing import Any, Iterator

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import StreamingResponse

from .compiler import compile_protocol, estimate, parse_protocol, plan_to_taskgroup
from .crutd import CrutdEvent
from .errors import LabError
from .simlab.scenario import ScenarioRuntime, prepare_runtime

DEFAULT_TOKENS = {"operator-token": "operator", "viewer-token": "viewer"}


@dataclass
class JournalEntry:
    journal_seq: int
    kind: str  # "crutd" | "job"
    payload: dict[str, Any]

    def sse(self) -> str:
        body = dict(self.payload)
        body["journal_seq"] = self.journal_seq
        return f"event: {self.kind}\ndata: {json.dumps(body)}\n\n"


class EventJournal:
    """Ordered fan-out buffer rebuilt from the engine log on restart."""

    def __init__(self, events: list[CrutdEvent]) -> None:
        self._entries: list[JournalEntry] = []
        self._lock = threading.Lock()
        for event in events:
            self.push("crutd", event.to_dict())

    def push(self, kind: str, payload: dict[str, Any]) -> None:
        with self._lock:
            self._entries.append(JournalEntry(len(self._entries) + 1, kind, payload))

    def since(self, seq: int) -> list[JournalEntry]:
        with self._lock:
            return self._entries[seq:]

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


class GatewayService:
    """Shared state behind the endpoint handlers."""

    def __init__(self, runtime: ScenarioRuntime,
                 tokens: dict[str, str] | None = None) -> None:
        self.runtime = runtime
        self.tokens = dict(tokens or DEFAULT_TOKENS)
        self.lock = threading.RLock()
        self.journal = EventJournal(runtime.engine.events)
        self.idempotency: dict[str, str] = {}
        self._pump: threading.Thread | None = None
        self._pumping = False
        runtime.engine.listeners.append(
            lambda event: self.journal.push("crutd", event.to_dict()))
        runtime.orchestrator.on_job_change = \
            lambda job: self.journal.push("job", job.to_dict())

    # -- time ------------------------------------------------------------------

    def step(self, dt: float) -> None:
        with self.lock:
            self.runtime.network.step(dt)

    def start_pump(self, sim_dt: float = 0.05, wall_dt: float = 0.02) -> None:
        if self._pumping:
            return
        self._pumping = True

        def loop() -> None:
            while self._pumping:
                self.step(sim_dt)
                time.sleep(wall_dt)

        self._pump = threading.Thread(target=loop, daemon=True)
        self._pump.start()

    def stop_pump(self) -> None:
        self._pumping = False
        if self._pump is not None:
            self._pump.join(timeout=2.0)
            self._pump = None

    # -- auth ------------------------------------------------------------------

    def role_of(self, request: Request) -> str:
        header = request.headers.get("authorization", "")
        token = header.removeprefix("Bearer ").strip()
        role = self.tokens.get(token)
        if role is None:
            raise HTTPException(status_code=401, detail="unknown bearer token")
        return role

    def require_operator(self, request: Request) -> str:
        role = self.role_of(request)
        if role != "operator":
            raise HTTPException(status_code=403,
                                detail="operator role required")
        return role


def _http_error(exc: LabError, status: int = 409) -> HTTPException:
    return HTTPException(status_code=status, detail=exc.to_dict())


def create_app(service: GatewayService) -> FastAPI:
    app = FastAPI(title="lab gateway", version="0.1.0")
    runtime = service.runtime

    def viewer(request: Request) -> str:
        return service.role_of(request)

    def operator(request: Request) -> str:
        return service.require_operator(request)

    @app.get("/health")
    def health() -> dict[str, Any]:
        with service.lock:
            return {"ok": True, "sim_time": runtime.network.now,
                    "events": len(runtime.engine.events)}

    @app.get("/resources")
    def resources(subtree: str | None = None,
                  role: str = Depends(viewer)) -> dict[str, Any]:
        with service.lock:
            store = runtime.store
            root = subtree or store.root_uuid
            if root not in store:
                raise HTTPException(status_code=404, detail="unknown subtree")
            uuids = store.query_subtree(root)
            return {"snapshot_hash": store.snapshot().hash_hex,
                    "records": [store.get(u).to_dict() for u in uuids]}

    @app.get("/resources/{uid}")
    def resource(uid: str, role: str = Depends(viewer)) -> dict[str, Any]:
        with service.lock:
            if uid not in runtime.store:
                raise HTTPException(status_code=404, detail="unknown uuid")
            return runtime.store.get(uid).to_dict()

    @app.get("/resources/{uid}/lineage")
    def lineage(uid: str, role: str = Depends(viewer)) -> dict[str, Any]:
        with service.lock:
            try:
                return runtime.engine.lineage(uid).to_dict()
            except LabError as exc:
                raise _http_error(exc, status=404)

    @app.get("/graph")
    def graph(role: str = Depends(viewer)) -> dict[str, Any]:
        with service.lock:
            return {"edges": [e.to_dict() for e in runtime.graph.edges()]}

    @app.post("/protocols/compile")
    def compile_endpoint(body: dict[str, Any],
                         role: str = Depends(viewer)) -> dict[str, Any]:
        with service.lock:
            try:
                ops = parse_protocol(json.dumps(body.get("protocol", body)))
                plan = compile_protocol(ops, runtime.store, runtime.graph)
            except LabError as exc:
                raise _http_error(exc, status=422)
            return {"plan": plan.to_dict(), "estimate": estimate(plan)}

    @app.post("/task-groups", status_code=201)
    def submit_group(body: dict[str, Any],
                     role: str = Depends(operator)) -> dict[str, Any]:
        key = body.get("idempotency_key")
        with service.lock:
            if key and key in service.idempotency:
                return {"group_id": service.idempotency[key], "duplicate": True}
            try:
                if "protocol" in body:
                    ops = parse_protocol(json.dumps(body["protocol"]))
                    plan = compile_protocol(ops, runtime.store, runtime.graph)
                    group = plan_to_taskgroup(plan, runtime.store,
                                              runtime.host.device_node_of)
                    group["submitted_by"] = body.get("submitted_by", "gateway")
                else:
                    group = body
                group_id = runtime.orchestrator.submit(group)
            except LabError as exc:
                raise _http_error(exc, status=422)
            if key:
                service.idempotency[key] = group_id
            return {"group_id": group_id, "duplicate": False}

    @app.get("/task-groups/{group_id}")
    def group_status(group_id: str,
                     role: str = Depends(viewer)) -> dict[str, Any]:
        with service.lock:
            orch = runtime.orchestrator
            group = orch.groups.get(group_id)
            if group is None:
                raise HTTPException(status_code=404, detail="unknown group")
            return {"group_id": group_id,
                    "submitted_by": group.submitted_by,
                    "status": group.status(orch.jobs),
                    "jobs": [orch.jobs[j].to_dict() for j in group.job_ids]}

    @app.post("/jobs/{job_id}/approve")
    def approve(job_id: str, body: dict[str, Any],
                role: str = Depends(operator)) -> dict[str, Any]:
        with service.lock:
            try:
                job = runtime.orchestrator.approve(
                    job_id, body.get("decision", "approve"),
                    body.get("approver", "operator"))
            except LabError as exc:
                raise _http_error(exc)
            return job.to_dict()

    @app.get("/events")
    def events(since: int = 0, follow: bool = True, timeout: float = 30.0,
               role: str = Depends(viewer)) -> StreamingResponse:
        def stream() -> Iterator[str]:
            cursor = since
            deadline = time.monotonic() + timeout
            while True:
                batch = service.journal.since(cursor)
                for entry in batch:
                    cursor = entry.journal_seq
                    yield entry.sse()
                if not follow:
                    return
                if time.monotonic() > deadline:
                    return
                time.sleep(0.05)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="labkernel.gateway",
        description="serve the lab gateway over a simulated runtime")
    parser.add_argument("--scenario", required=True,
                        help="scenario file providing the runtime")
    parser.add_argument("--port", type=int, default=8099)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--tokens", help="json file mapping token -> role")
    parser.add_argument("--sim-dt", type=float, default=0.05)
    args = parser.parse_args(argv)

    tokens = DEFAULT_TOKENS
    if args.tokens:
        tokens = json.loads(open(args.tokens, "r", encoding="utf-8").read())
    runtime = prepare_runtime(args.scenario)
    service = GatewayService(runtime, tokens)
    service.start_pump(sim_dt=args.sim_dt)
    app = create_app(service)

    import uvicorn
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
