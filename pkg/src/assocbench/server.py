"""HTTP session service for human testers and the review UI.

A session walks the same plan, RNG streams, and step accounting as a model
round, so a scripted client answering with ground truth reproduces the
perfect-oracle round for the same seed. Humans answer by choice only; the
deduction call is skipped (testers deduce implicitly) though optional
evidence text is stored verbatim.

The correct option index never appears in any payload before that step's
answer has been received. Only answered steps are visible in summaries, and
a wrong answer terminates the session, so live sessions reveal nothing.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from random import Random

from fastapi import FastAPI, HTTPException, Response
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .builder import (
    BuilderError,
    PoolExhausted,
    RoundPlan,
    StepCandidates,
    candidate_step,
    make_round,
)
from .corpus import Corpus, CorpusError
from .runner import (
    TERMINAL_CAP_REACHED,
    TERMINAL_EXHAUSTED,
    TERMINAL_WRONG_ANSWER,
    StepRecord,
    ground_truth_examples,
)

PHASE_PREVIEW = "preview"
PHASE_MAIN = "main"
PHASE_DONE = "done"

REPORT_CATEGORIES = ("privacy", "bias", "discomfort", "other")


class CreateSessionRequest(BaseModel):
    kind: str = "synchronous"
    concepts: list[str]
    strategy_view: str = "NoM"
    seed: int | str | None = None
    cap: int | None = None
    example_count: int | None = None
    tester: str = "anon"


class AnswerRequest(BaseModel):
    choice: str
    evidence: str | None = None


class EthicReportRequest(BaseModel):
    category: str
    note: str = ""


@dataclass
class Session:
    id: str
    tester: str
    strategy_view: str
    plan: RoundPlan
    rng: Random
    preview: list[dict]
    phase: str = PHASE_PREVIEW
    query: str = ""
    t: int = 0
    pending: StepCandidates | None = None
    steps: list[StepRecord] = field(default_factory=list)
    evidence: list[dict] = field(default_factory=list)
    terminal: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def final_step_count(self) -> int:
        return sum(1 for s in self.steps if s.association_correct)


class SessionService:
    """In-memory session store with per-session append-only event logs."""

    def __init__(
        self,
        corpus: Corpus,
        out_dir: str | Path,
        default_cap: int = 500,
        default_example_count: int = 3,
    ) -> None:
        self.corpus = corpus
        self.out_dir = Path(out_dir)
        self.default_cap = default_cap
        self.default_example_count = default_example_count
        self.sessions: dict[str, Session] = {}
        self._registry_lock = threading.Lock()
        (self.out_dir / "sessions").mkdir(parents=True, exist_ok=True)

    # -- event log ---------------------------------------------------------
    def _log_event(self, session_id: str, event: dict) -> None:
        path = self.out_dir / "sessions" / f"{session_id}.jsonl"
        record = {"at": time.time(), **event}
        with path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    # -- operations ---------------------------------------------------------
    def create(self, req: CreateSessionRequest) -> Session:
        seed = req.seed if req.seed is not None else uuid.uuid4().int % 10**9
        cap = req.cap if req.cap is not None else self.default_cap
        example_count = (
            req.example_count
            if req.example_count is not None
            else self.default_example_count
        )
        try:
            plan = make_round(
                self.corpus, req.kind, req.concepts, cap, seed, example_count
            )
            examples = ground_truth_examples(
                self.corpus, plan.concepts, example_count, Random(f"{seed}|examples")
            )
        except (BuilderError, CorpusError) as e:
            raise HTTPException(status_code=400, detail=str(e))

        preview = [
            {
                "anchor": self._image_payload(ex.anchor),
                "positive": self._image_payload(ex.positive),
                "shared_concepts": sorted(ex.shared),
            }
            for ex in examples
        ]
        session = Session(
            id=uuid.uuid4().hex,
            tester=req.tester,
            strategy_view=req.strategy_view,
            plan=plan,
            rng=Random(f"{seed}|steps"),
            preview=preview,
            query=plan.start,
        )
        with self._registry_lock:
            self.sessions[session.id] = session
        self._log_event(
            session.id,
            {
                "event": "created",
                "tester": session.tester,
                "plan": plan.as_dict(),
                "strategy_view": req.strategy_view,
            },
        )
        return session

    def get(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return session

    def _image_payload(self, sample_id: str) -> dict:
        sample = self.corpus.sample(sample_id)
        ref = sample.image_ref
        url = ref if ref.startswith(("http://", "https://")) else f"/images/{ref}"
        return {"id": sample.id, "url": url}

    def next_question(self, session: Session) -> dict:
        with session.lock:
            if session.phase == PHASE_DONE:
                raise HTTPException(
                    status_code=409,
                    detail={
                        "terminal": session.terminal,
                        "final_step_count": session.final_step_count,
                    },
                )
            if session.phase == PHASE_PREVIEW:
                session.phase = PHASE_MAIN
            if session.pending is None:
                try:
                    session.pending = candidate_step(
                        self.corpus, session.plan, session.t, session.query, session.rng
                    )
                except PoolExhausted:
                    session.phase = PHASE_DONE
                    session.terminal = TERMINAL_EXHAUSTED
                    self._log_event(
                        session.id, {"event": "exhausted", "t": session.t}
                    )
                    raise HTTPException(
                        status_code=409,
                        detail={
                            "terminal": session.terminal,
                            "final_step_count": session.final_step_count,
                        },
                    )
            cands = session.pending
            return {
                "t": cands.step_index,
                "query": self._image_payload(cands.query),
                "options": [
                    self._image_payload(cands.option1),
                    self._image_payload(cands.option2),
                ],
            }

    def answer(self, session: Session, req: AnswerRequest) -> dict:
        if req.choice not in ("Image1", "Image2"):
            raise HTTPException(status_code=400, detail="choice must be Image1 or Image2")
        with session.lock:
            if session.phase == PHASE_DONE or session.pending is None:
                raise HTTPException(status_code=409, detail="no pending question")
            cands = session.pending
            chosen = 1 if req.choice == "Image1" else 2
            correct = chosen == cands.correct
            record = StepRecord(
                t=cands.step_index,
                concept=session.plan.concept_schedule[cands.step_index],
                query=cands.query,
                option1=cands.option1,
                option2=cands.option2,
                correct_option=cands.correct,
                chosen_option=chosen,
                association_correct=correct,
                deduced=frozenset(),
                deduction_correct=None,
                memory_snapshot={},
                raw_association=req.choice,
                raw_deduction=None,
                latency=0.0,
            )
            session.steps.append(record)
            session.pending = None
            if req.evidence:
                session.evidence.append({"t": cands.step_index, "text": req.evidence})
            if correct:
                session.query = cands.positive
                session.t += 1
                if session.t >= session.plan.cap:
                    session.phase = PHASE_DONE
                    session.terminal = TERMINAL_CAP_REACHED
            else:
                session.phase = PHASE_DONE
                session.terminal = TERMINAL_WRONG_ANSWER
            self._log_event(
                session.id,
                {
                    "event": "answered",
                    "t": record.t,
                    "choice": req.choice,
                    "correct": correct,
                    "evidence": req.evidence,
                },
            )
            return {"correct": correct, "step_count": session.final_step_count}

    def ethic_report(self, session: Session, req: EthicReportRequest) -> None:
        if not req.category.strip():
            raise HTTPException(status_code=400, detail="category must be nonempty")
        with session.lock:
            if session.pending is not None:
                on_screen = [
                    session.pending.query,
                    session.pending.option1,
                    session.pending.option2,
                ]
            elif session.steps:
                last = session.steps[-1]
                on_screen = [last.query, last.option1, last.option2]
            else:
                on_screen = [session.query]
        queue_path = self.out_dir / "review_queue.jsonl"
        with self._registry_lock:
            with queue_path.open("a", encoding="utf-8") as fh:
                for sid in on_screen:
                    sample = self.corpus.sample(sid)
                    fh.write(
                        json.dumps(
                            {
                                "id": sample.id,
                                "image": sample.image_ref,
                                "labels": sorted(sample.labels),
                                "verdict": "keep",
                                "ethic_flag": req.category,
                                "note": req.note,
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )
        self._log_event(
            session.id,
            {
                "event": "reported",
                "category": req.category,
                "note": req.note,
                "samples": on_screen,
            },
        )

    def summary(self, session: Session) -> dict:
        with session.lock:
            steps = [
                {
                    "t": s.t,
                    "query": s.query,
                    "option1": s.option1,
                    "option2": s.option2,
                    "correct_option": s.correct_option,
                    "chosen_option": s.chosen_option,
                    "association_correct": s.association_correct,
                }
                for s in session.steps
            ]
            return {
                "session_id": session.id,
                "tester": session.tester,
                "phase": session.phase,
                "strategy_view": session.strategy_view,
                "plan": session.plan.as_dict(),
                "terminal": session.terminal,
                "final_step_count": session.final_step_count,
                "steps": steps,
                "evidence": list(session.evidence),
            }


def create_app(
    corpus: Corpus,
    out_dir: str | Path,
    images_root: str | Path | None = None,
    webui_dist: str | Path | None = None,
    default_cap: int = 500,
    default_example_count: int = 3,
) -> FastAPI:
    service = SessionService(
        corpus,
        out_dir,
        default_cap=default_cap,
        default_example_count=default_example_count,
    )
    app = FastAPI(title="assocbench session service")
    app.state.service = service

    @app.post("/sessions", status_code=201)
    def create_session(req: CreateSessionRequest):
        session = service.create(req)
        return {
            "session_id": session.id,
            "seed": session.plan.seed,
            "cap": session.plan.cap,
            "example_count": session.plan.example_count,
            "preview": session.preview,
        }

    @app.get("/sessions/{session_id}/next")
    def next_question(session_id: str):
        return service.next_question(service.get(session_id))

    @app.post("/sessions/{session_id}/answer")
    def answer(session_id: str, req: AnswerRequest):
        return service.answer(service.get(session_id), req)

    @app.post("/sessions/{session_id}/report", status_code=204)
    def ethic_report(session_id: str, req: EthicReportRequest):
        service.ethic_report(service.get(session_id), req)
        return Response(status_code=204)

    @app.get("/sessions/{session_id}/summary")
    def summary(session_id: str):
        return service.summary(service.get(session_id))

    if images_root is not None:
        root = Path(images_root).resolve()

        @app.get("/images/{image_path:path}")
        def serve_image(image_path: str):
            target = (root / image_path).resolve()
            if not str(target).startswith(str(root)) or not target.is_file():
                raise HTTPException(status_code=404, detail="image not found")
            return FileResponse(target)

    if webui_dist is not None and Path(webui_dist).is_dir():
        app.mount("/", StaticFiles(directory=str(webui_dist), html=True), name="webui")

    return app
