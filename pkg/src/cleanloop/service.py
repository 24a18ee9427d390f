"""HTTP session service for human-driven correction loops.

One session = one active loop over one dataset. The slow step (cross-validated
retraining) runs on a background thread per session; clients poll status and
fetch the outstanding batch when the phase reaches ``awaiting_annotations``.
Corrections are applied all-or-nothing per batch. Every payload carries
``"v": 1``.

Phases move scoring -> awaiting_annotations -> retraining -> (scoring |
stopped). Sessions checkpoint at the awaiting and stopped boundaries, so a
restarted server resumes mid-loop sessions from disk.
"""

from __future__ import annotations

import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from . import __version__
from .data import dataset_to_jsonl, error_mask_by_id, load_dataset
from .evaluation import average_precision, pr_curve
from .loop import (
    ActiveLoop,
    AnnotatorAnswer,
    StopConfig,
    dataset_sha256,
    load_checkpoint,
    restore_state,
    save_checkpoint,
    state_snapshot,
)
from .scoring import EnsembleConfig
from .trainer import TrainerConfig

PHASES = ("scoring", "awaiting_annotations", "retraining", "stopped")
UI_DIR_ENV = "CLEANLOOP_UI_DIR"


class ServiceStartupError(RuntimeError):
    """Unusable persisted state; the server refuses to start."""


@dataclass
class Session:
    id: str
    loop: ActiveLoop
    dataset_path: str
    dataset_hash: str
    fold_count: int
    mode: str  # "simulation" when gold labels exist, else "live"
    initial_mask: dict[str, bool] | None
    token: str | None = None
    phase: str = "scoring"
    progress: float = 0.0
    outstanding: list[str] | None = None
    stop_requested: bool = False
    created_at: float = field(default_factory=time.time)
    updated_at: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)
    worker: threading.Thread | None = None


def _error(status: int, message: str, **extra) -> JSONResponse:
    return JSONResponse({"v": 1, "error": message, **extra}, status_code=status)


class SessionManager:
    def __init__(self, *, default_dataset: Path | None, default_k: int,
                 checkpoint_dir: Path | None, threads: int | None):
        self.default_dataset = default_dataset
        self.default_k = default_k
        self.checkpoint_dir = checkpoint_dir
        self.threads = threads
        self.sessions: dict[str, Session] = {}
        if checkpoint_dir is not None:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            self._restore_all(checkpoint_dir)

    # -- persistence -------------------------------------------------------

    def _checkpoint(self, session: Session) -> None:
        if self.checkpoint_dir is None:
            return
        loop = session.loop
        snapshot = {
            "v": 1,
            "session_id": session.id,
            "phase": session.phase,
            "mode": session.mode,
            "outstanding": session.outstanding,
            "stop_requested": session.stop_requested,
            "token": session.token,
            "fold_count": session.fold_count,
            "trainer": {
                "epochs": loop.trainer_config.epochs,
                "learning_rate": loop.trainer_config.learning_rate,
                "batch_size": loop.trainer_config.batch_size,
                "l2": loop.trainer_config.l2,
                "seed": loop.trainer_config.seed,
            },
            "ensemble": {
                "use_train_ensembling": loop.ensemble_config.use_train_ensembling,
                "use_test_ensembling": loop.ensemble_config.use_test_ensembling,
                "base_score": loop.ensemble_config.base_score,
            },
            "state": state_snapshot(
                loop.state,
                dataset_path=session.dataset_path,
                dataset_hash=session.dataset_hash,
            ),
        }
        save_checkpoint(self.checkpoint_dir / f"{session.id}.json", snapshot)

    def _restore_all(self, directory: Path) -> None:
        for path in sorted(directory.glob("*.json")):
            try:
                snapshot = load_checkpoint(path)
                self._restore_one(snapshot)
            except (ValueError, KeyError, OSError) as exc:
                raise ServiceStartupError(f"corrupt checkpoint {path}: {exc}") from None

    def _restore_one(self, snapshot: dict) -> None:
        inner = snapshot["state"]
        dataset_path = inner["dataset_path"]
        current_hash = dataset_sha256(dataset_path)
        if current_hash != inner["dataset_sha256"]:
            raise ValueError(f"dataset {dataset_path} changed since checkpoint")
        dataset = load_dataset(dataset_path)
        state = restore_state(inner, dataset)
        trainer = snapshot["trainer"]
        ensemble = snapshot["ensemble"]
        loop = ActiveLoop(
            state.dataset,
            fold_count=snapshot["fold_count"],
            trainer_config=TrainerConfig(**trainer),
            ensemble_config=EnsembleConfig(**ensemble),
            k=state.k,
            state=state,
            threads=self.threads,
        )
        session = Session(
            id=snapshot["session_id"],
            loop=loop,
            dataset_path=dataset_path,
            dataset_hash=current_hash,
            fold_count=snapshot["fold_count"],
            mode=snapshot["mode"],
            initial_mask=error_mask_by_id(dataset) if dataset.has_gold else None,
            token=snapshot["token"],
            phase=snapshot["phase"],
            outstanding=snapshot["outstanding"],
            stop_requested=snapshot["stop_requested"],
        )
        self.sessions[session.id] = session
        if session.phase in ("scoring", "retraining"):
            self._spawn_compute(session)  # died mid-compute; redo the pass

    # -- lifecycle ---------------------------------------------------------

    def create(self, dataset_ref: str | None, body: dict) -> Session:
        path = Path(dataset_ref) if dataset_ref else self.default_dataset
        if path is None:
            raise FileNotFoundError("no dataset_ref given and no default dataset configured")
        if not Path(path).is_file():
            raise FileNotFoundError(f"dataset not found: {path}")
        dataset = load_dataset(path)

        k = int(body.get("k", self.default_k))
        if k < 1:
            raise ValueError("k must be >= 1")
        fold_count = int(body.get("folds", 10))
        stop_body = body.get("stop", {})
        stop = StopConfig(
            max_iterations=int(stop_body.get("max_iterations", 40)),
            budget=stop_body.get("budget"),
            error_fraction_threshold=stop_body.get("error_fraction_threshold"),
        )
        trainer_body = body.get("trainer", {})
        trainer = TrainerConfig(
            epochs=int(trainer_body.get("epochs", 10)),
            learning_rate=float(trainer_body.get("learning_rate", 0.1)),
            batch_size=int(trainer_body.get("batch_size", 32)),
            l2=float(trainer_body.get("l2", 1e-6)),
            seed=int(trainer_body.get("seed", 0)),
        )
        ensemble_body = body.get("ensemble", {})
        ensemble = EnsembleConfig(
            use_train_ensembling=bool(ensemble_body.get("use_train_ensembling", True)),
            use_test_ensembling=bool(ensemble_body.get("use_test_ensembling", True)),
            base_score=str(ensemble_body.get("base_score", "aum_prob")),
        )
        loop = ActiveLoop(
            dataset,
            fold_count=fold_count,
            trainer_config=trainer,
            ensemble_config=ensemble,
            k=k,
            stop_config=stop,
            threads=self.threads,
        )
        session = Session(
            id=uuid.uuid4().hex[:12],
            loop=loop,
            dataset_path=str(path),
            dataset_hash=dataset_sha256(path),
            fold_count=fold_count,
            mode="simulation" if dataset.has_gold else "live",
            initial_mask=error_mask_by_id(dataset) if dataset.has_gold else None,
            token=body.get("token"),
        )
        self.sessions[session.id] = session
        self._spawn_compute(session)
        return session

    def _spawn_compute(self, session: Session) -> None:
        worker = threading.Thread(target=self._compute, args=(session,), daemon=True)
        session.worker = worker
        worker.start()

    def _compute(self, session: Session) -> None:
        loop = session.loop
        total = session.fold_count * loop.trainer_config.epochs
        done = 0
        tick_lock = threading.Lock()

        def tick():
            nonlocal done
            with tick_lock:
                done += 1
                session.progress = done / total

        with session.lock:
            session.phase = "scoring"
            session.progress = 0.0
            session.updated_at = time.time()
        try:
            loop.compute_scores(on_epoch=tick)
        except Exception as exc:  # fail the session rather than hang clients
            with session.lock:
                self._stop(session, f"error: {exc}")
            return
        with session.lock:
            if session.stop_requested:
                self._stop(session, "manual")
                return
            batch = loop.next_batch()
            if not batch:
                exhausted = len(loop.state.corrected_ids) >= len(loop.state.dataset.instances)
                self._stop(session, "exhausted" if exhausted else "budget")
                return
            session.outstanding = batch
            session.phase = "awaiting_annotations"
            session.updated_at = time.time()
            self._checkpoint(session)

    def _stop(self, session: Session, reason: str) -> None:
        # caller holds session.lock; any outstanding batch stays recorded so
        # the report can list it as unanswered
        session.phase = "stopped"
        session.loop.state.stop_reason = reason
        session.updated_at = time.time()
        self._checkpoint(session)


def create_app(
    *,
    default_dataset: Path | None = None,
    default_k: int = 50,
    checkpoint_dir: Path | None = None,
    threads: int | None = None,
    ui_dir: Path | None = None,
) -> FastAPI:
    manager = SessionManager(
        default_dataset=default_dataset,
        default_k=default_k,
        checkpoint_dir=checkpoint_dir,
        threads=threads,
    )
    app = FastAPI(title="cleanloop", version=__version__)
    app.state.manager = manager

    if ui_dir is None and os.environ.get(UI_DIR_ENV):
        ui_dir = Path(os.environ[UI_DIR_ENV])
    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    def authorized(session: Session, request: Request) -> bool:
        if session.token is None:
            return True
        header = request.headers.get("authorization", "")
        return header == f"Bearer {session.token}"

    def get_session(session_id: str) -> Session | None:
        return manager.sessions.get(session_id)

    @app.get("/healthz")
    def healthz():
        return {"v": 1, "version": __version__}

    @app.post("/sessions", status_code=202)
    async def create_session(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error(400, "request body must be a JSON object")
        if not isinstance(body, dict):
            return _error(400, "request body must be a JSON object")
        try:
            session = manager.create(body.get("dataset_ref"), body)
        except FileNotFoundError as exc:
            return _error(404, str(exc))
        except (ValueError, TypeError) as exc:
            return _error(400, str(exc))
        return {"v": 1, "session_id": session.id}

    @app.get("/sessions/{session_id}/batch")
    def get_batch(session_id: str, request: Request):
        session = get_session(session_id)
        if session is None:
            return _error(404, "unknown session")
        if not authorized(session, request):
            return _error(401, "missing or invalid session token")
        with session.lock:
            if session.phase == "stopped":
                return _error(
                    410,
                    "session stopped",
                    stop_reason=session.loop.state.stop_reason,
                    report_url=f"/sessions/{session.id}/report",
                )
            if session.phase != "awaiting_annotations" or session.outstanding is None:
                return _error(409, "batch not ready", phase=session.phase,
                              progress=round(session.progress, 4))
            state = session.loop.state
            dataset = state.dataset
            index = dataset.instance_index()
            names = dataset.label_space.labels
            scores = state.last_scores
            items = []
            for rank, iid in enumerate(session.outstanding, start=1):
                inst = dataset.instances[index[iid]]
                item = {
                    "id": iid,
                    "rank": rank,
                    "score": scores.scores[iid] if scores else None,
                }
                if dataset.task_kind == "classification":
                    item["text"] = inst.text
                    item["label"] = names[inst.observed_labels[0]]
                else:
                    item["tokens"] = list(inst.tokens or ())
                    item["labels"] = [names[y] for y in inst.observed_labels]
                items.append(item)
            return {
                "v": 1,
                "iteration": state.iteration + 1,
                "task_kind": dataset.task_kind,
                "label_space": list(names),
                "k": state.k,
                "items": items,
            }

    @app.post("/sessions/{session_id}/corrections")
    async def post_corrections(session_id: str, request: Request):
        session = get_session(session_id)
        if session is None:
            return _error(404, "unknown session")
        if not authorized(session, request):
            return _error(401, "missing or invalid session token")
        try:
            body = await request.json()
        except Exception:
            return _error(422, "request body must be a JSON object")
        decisions = body.get("decisions") if isinstance(body, dict) else None
        if not isinstance(decisions, dict):
            return _error(422, "missing 'decisions' object")
        with session.lock:
            if session.phase != "awaiting_annotations" or session.outstanding is None:
                return _error(409, "no outstanding batch", phase=session.phase)
            batch = session.outstanding
            if set(decisions) != set(batch):
                missing = sorted(set(batch) - set(decisions))[:3]
                extra = sorted(set(decisions) - set(batch))[:3]
                return _error(
                    422,
                    "decisions must cover exactly the outstanding batch",
                    missing=missing,
                    unknown=extra,
                )
            dataset = session.loop.state.dataset
            space = dataset.label_space
            index = dataset.instance_index()
            parsed: dict[str, tuple[int, ...] | None] = {}
            for iid, decision in decisions.items():
                if not isinstance(decision, dict):
                    return _error(422, f"decision for {iid} must be an object")
                if decision.get("confirm"):
                    parsed[iid] = None
                    continue
                raw = decision.get("labels", decision.get("label"))
                if raw is None:
                    return _error(422, f"decision for {iid} needs 'confirm' or labels")
                values = raw if isinstance(raw, list) else [raw]
                try:
                    labels = tuple(space.index(str(v)) for v in values)
                except ValueError as exc:
                    return _error(422, f"decision for {iid}: {exc}")
                if len(labels) != dataset.instances[index[iid]].n_units:
                    return _error(422, f"decision for {iid} has the wrong label count")
                parsed[iid] = labels
            outcome = session.loop.submit(batch, AnnotatorAnswer(parsed))
            session.outstanding = None
            session.phase = "retraining"
            session.updated_at = time.time()
            if outcome.stopped or session.stop_requested:
                manager._stop(session, outcome.stop_reason or "manual")
            else:
                manager._spawn_compute(session)
            return {
                "v": 1,
                "iteration": outcome.iteration,
                "batch_error_fraction": outcome.batch_error_fraction,
                "stopped": session.phase == "stopped",
            }

    @app.get("/sessions/{session_id}/status")
    def get_status(session_id: str, request: Request):
        session = get_session(session_id)
        if session is None:
            return _error(404, "unknown session")
        if not authorized(session, request):
            return _error(401, "missing or invalid session token")
        with session.lock:
            state = session.loop.state
            payload = {
                "v": 1,
                "phase": session.phase,
                "mode": session.mode,
                "iteration": state.iteration,
                "corrected_count": len(state.corrected_ids),
                "total": len(state.dataset.instances),
                "last_batch_error_fraction": state.last_batch_error_fraction,
                "progress": round(session.progress, 4),
            }
            if session.phase == "stopped":
                payload["stop_reason"] = state.stop_reason
            return payload

    @app.get("/sessions/{session_id}/report")
    def get_report(session_id: str, request: Request):
        session = get_session(session_id)
        if session is None:
            return _error(404, "unknown session")
        if not authorized(session, request):
            return _error(401, "missing or invalid session token")
        with session.lock:
            if session.phase != "stopped":
                return _error(409, "session still running", phase=session.phase)
            state = session.loop.state
            iterations = [
                {
                    "iteration": r.iteration,
                    "queried": len(r.queried),
                    "changed": len(r.changed),
                    "answered": True,
                }
                for r in state.query_log
            ]
            if session.outstanding:
                iterations.append(
                    {
                        "iteration": state.iteration + 1,
                        "queried": len(session.outstanding),
                        "changed": None,
                        "answered": False,
                    }
                )
            payload = {
                "v": 1,
                "mode": session.mode,
                "stop_reason": state.stop_reason,
                "iterations": iterations,
                "query_log": [
                    {"iteration": r.iteration, "queried": list(r.queried),
                     "changed": list(r.changed)}
                    for r in state.query_log
                ],
                "corrected_count": len(state.corrected_ids),
                "total": len(state.dataset.instances),
                "dataset_url": f"/sessions/{session.id}/dataset",
            }
            if session.mode == "simulation" and session.initial_mask is not None:
                ranking = session.loop.final_ranking()
                payload["ap"] = average_precision(ranking, session.initial_mask)
                payload["pr_curve"] = [
                    [r, p] for r, p in pr_curve(ranking, session.initial_mask)
                ]
            return payload

    @app.get("/sessions/{session_id}/dataset")
    def get_dataset(session_id: str, request: Request):
        session = get_session(session_id)
        if session is None:
            return _error(404, "unknown session")
        if not authorized(session, request):
            return _error(401, "missing or invalid session token")
        with session.lock:
            text = dataset_to_jsonl(session.loop.state.dataset)
        return PlainTextResponse(text, media_type="application/x-ndjson")

    @app.post("/sessions/{session_id}/stop")
    def stop_session(session_id: str, request: Request):
        session = get_session(session_id)
        if session is None:
            return _error(404, "unknown session")
        if not authorized(session, request):
            return _error(401, "missing or invalid session token")
        with session.lock:
            if session.phase == "stopped":
                return {"v": 1, "stopped": True, "already_stopped": True}
            session.stop_requested = True
            if session.phase == "awaiting_annotations":
                manager._stop(session, "manual")
                return {"v": 1, "stopped": True}
        return JSONResponse({"v": 1, "stopped": False, "stopping": True}, status_code=202)

    return app
