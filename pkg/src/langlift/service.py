"""HTTP annotation service for the blinded preference study.

Annotators pull tasks in a per-annotator seeded order, each pair served to
an annotator at most once; judgments append to a durable JSONL log.  With
exclusive mode on, a pair held in flight by one annotator is not assigned
to another.  Results (with model names revealed) require the admin token.
"""

from __future__ import annotations

import os
import threading
import zlib

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .preference import CHOICES, Judgment, PreferencePair, aggregate, append_judgment, load_judgments

ADMIN_TOKEN_ENV = "EVAL_ADMIN_TOKEN"


class AnnotationStore:
    """Linearized task assignment and judgment log (single lock)."""

    def __init__(
        self,
        pairs: list[PreferencePair],
        judgments_path: str,
        seed: int = 0,
        exclusive: bool = False,
    ):
        self.pairs = {p.pair_id: p for p in pairs}
        self.order_source = [p.pair_id for p in pairs]
        self.judgments_path = judgments_path
        self.seed = seed
        self.exclusive = exclusive
        self.judgments: list[Judgment] = []
        self.judged: set[tuple[str, str]] = set()  # (pair_id, annotator_id)
        self.in_flight: dict[str, str] = {}  # pair_id -> annotator_id
        self._session_counter = 0
        self._lock = threading.Lock()
        if os.path.exists(judgments_path):
            for j in load_judgments(judgments_path):
                self.judgments.append(j)
                self.judged.add((j.pair_id, j.annotator_id))

    def new_session(self) -> str:
        with self._lock:
            self._session_counter += 1
            return f"annotator-{self._session_counter}"

    def _order_for(self, annotator_id: str) -> list[str]:
        mix = zlib.crc32(annotator_id.encode("utf-8")) ^ (self.seed & 0xFFFFFFFF)
        rng = np.random.default_rng(mix)
        order = list(self.order_source)
        rng.shuffle(order)
        return order

    def next_for(self, annotator_id: str) -> PreferencePair | None:
        with self._lock:
            held = [pid for pid, holder in self.in_flight.items() if holder == annotator_id]
            if held:
                return self.pairs[held[0]]
            for pid in self._order_for(annotator_id):
                if (pid, annotator_id) in self.judged:
                    continue
                if self.exclusive and self.in_flight.get(pid, annotator_id) != annotator_id:
                    continue
                self.in_flight[pid] = annotator_id
                return self.pairs[pid]
            return None

    def submit(self, pair_id: str, annotator_id: str, choice: str) -> int:
        """HTTP-style status: 201 created, 404 unknown pair, 409 duplicate."""
        with self._lock:
            if pair_id not in self.pairs:
                return 404
            if (pair_id, annotator_id) in self.judged:
                return 409
            judgment = Judgment(pair_id, choice, "human", annotator_id)
            self.judgments.append(judgment)
            self.judged.add((pair_id, annotator_id))
            if self.in_flight.get(pair_id) == annotator_id:
                del self.in_flight[pair_id]
            append_judgment(judgment, self.judgments_path)
            return 201

    def results(self, focal: str | None = None):
        with self._lock:
            return aggregate(list(self.judgments), list(self.pairs.values()), focal)

    def progress(self, annotator_id: str) -> dict:
        with self._lock:
            done = sum(1 for pid, ann in self.judged if ann == annotator_id)
            return {"judged_count": done, "total_count": len(self.pairs)}


def create_app(store: AnnotationStore, static_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="preference annotation service")

    @app.post("/api/session")
    async def new_session():
        annotator_id = store.new_session()
        return JSONResponse({"annotator_id": annotator_id}, status_code=201)

    @app.get("/api/tasks/next")
    async def next_task(annotator_id: str = ""):
        if not annotator_id:
            return JSONResponse({"error": "annotator_id is required"}, status_code=400)
        pair = store.next_for(annotator_id)
        if pair is None:
            return {"done": True, **store.progress(annotator_id)}
        return {**pair.annotator_view(), **store.progress(annotator_id)}

    @app.post("/api/tasks/{pair_id}/judgment")
    async def submit_judgment(pair_id: str, request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "body must be JSON"}, status_code=400)
        if not isinstance(body, dict):
            return JSONResponse({"error": "body must be a JSON object"}, status_code=400)
        annotator_id = body.get("annotator_id")
        choice = body.get("choice")
        if not annotator_id or choice not in CHOICES:
            return JSONResponse(
                {"error": f"need annotator_id and choice in {list(CHOICES)}"}, status_code=400
            )
        status = store.submit(pair_id, annotator_id, choice)
        if status == 404:
            return JSONResponse({"error": f"unknown pair {pair_id!r}"}, status_code=404)
        if status == 409:
            return JSONResponse({"error": "already judged by this annotator"}, status_code=409)
        return JSONResponse({"ok": True, **store.progress(annotator_id)}, status_code=201)

    @app.get("/api/results")
    async def results(request: Request, token: str = "", focal: str | None = None):
        expected = os.environ.get(ADMIN_TOKEN_ENV)
        if not expected:
            return JSONResponse({"error": f"{ADMIN_TOKEN_ENV} is not configured"}, status_code=403)
        auth = request.headers.get("authorization", "")
        bearer = auth.removeprefix("Bearer ").strip() if auth else ""
        if token != expected and bearer != expected:
            return JSONResponse({"error": "admin token required"}, status_code=401)
        return store.results(focal).as_dict()

    if static_dir:
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app


def serve(store: AnnotationStore, host: str, port: int, static_dir: str | None = None) -> None:
    import uvicorn

    uvicorn.run(create_app(store, static_dir), host=host, port=port, log_level="info")
