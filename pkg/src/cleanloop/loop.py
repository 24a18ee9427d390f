"""The active correction loop.

Each iteration retrains from scratch, ranks the not-yet-reviewed instances by
ensemble error score, routes the top k to an annotator, applies the answers,
and re-checks the stopping rules. Confirmed-correct instances are marked
corrected too: every routed instance consumes annotation budget and is never
routed again.

``ActiveLoop`` exposes the iteration as explicit steps (score, batch, submit)
so the HTTP service can suspend between ranking and annotation; ``run_loop``
drives it to completion against a callback annotator.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .data import Correction, Dataset, apply_corrections
from .scoring import EnsembleConfig, ScoreVector, ensemble_scores
from .trainer import TrainerConfig, cross_validate


@dataclass(frozen=True)
class StopConfig:
    """Stopping rules; ``max_iterations=0`` is the non-active single scoring pass."""

    max_iterations: int = 40
    budget: int | None = None
    error_fraction_threshold: float | None = None

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget must be >= 1 when set")
        if self.error_fraction_threshold is not None and not (
            0 <= self.error_fraction_threshold < 1
        ):
            raise ValueError("error_fraction_threshold must be in [0, 1)")


@dataclass(frozen=True)
class QueryRecord:
    iteration: int
    queried: tuple[str, ...]
    changed: tuple[str, ...]


@dataclass
class SessionState:
    dataset: Dataset
    k: int
    stop_config: StopConfig
    seed: int = 0
    iteration: int = 0
    query_log: list[QueryRecord] = field(default_factory=list)
    corrected_ids: set[str] = field(default_factory=set)
    last_scores: ScoreVector | None = None
    last_batch_error_fraction: float | None = None
    stop_reason: str | None = None


@dataclass(frozen=True)
class AnnotatorAnswer:
    """Per queried id: replacement labels, or None for confirmed-correct."""

    decisions: dict[str, tuple[int, ...] | None]


Annotator = Callable[[Dataset, list[str]], AnnotatorAnswer]


def select_batch(scores: ScoreVector, state: SessionState) -> list[str]:
    """Top-k uncorrected ids by descending score, ties by ascending id."""
    missing = {inst.id for inst in state.dataset.instances} ^ set(scores.scores)
    if missing:
        raise ValueError(f"scores do not cover the dataset exactly (mismatch: {sorted(missing)[:3]})")
    candidates = [iid for iid in scores.ranking() if iid not in state.corrected_ids]
    return candidates[: state.k]


def simulated_annotator(dataset: Dataset, batch: list[str]) -> AnnotatorAnswer:
    """Oracle annotator: corrects to gold when observed disagrees, else confirms."""
    if not dataset.has_gold:
        raise ValueError("simulated annotator requires gold labels")
    index = dataset.instance_index()
    decisions: dict[str, tuple[int, ...] | None] = {}
    for iid in batch:
        inst = dataset.instances[index[iid]]
        if inst.observed_labels != inst.gold_labels:
            decisions[iid] = inst.gold_labels
        else:
            decisions[iid] = None
    return AnnotatorAnswer(decisions)


def should_stop(state: SessionState, last_batch_error_fraction: float | None) -> tuple[bool, str | None]:
    """Evaluate the stopping rules; the reason names the rule that fired."""
    cfg = state.stop_config
    if state.iteration >= cfg.max_iterations:
        return True, "max_iterations"
    if len(state.corrected_ids) >= len(state.dataset.instances):
        return True, "exhausted"
    if cfg.budget is not None and len(state.corrected_ids) >= cfg.budget:
        return True, "budget"
    if (
        cfg.error_fraction_threshold is not None
        and last_batch_error_fraction is not None
        and last_batch_error_fraction <= cfg.error_fraction_threshold
    ):
        return True, "error_fraction"
    return False, None


@dataclass(frozen=True)
class BatchOutcome:
    iteration: int
    queried: tuple[str, ...]
    changed: tuple[str, ...]
    batch_error_fraction: float
    stopped: bool
    stop_reason: str | None


class ActiveLoop:
    """Stepwise driver of one correction session over a fixed configuration."""

    def __init__(
        self,
        dataset: Dataset,
        *,
        fold_count: int,
        trainer_config: TrainerConfig,
        ensemble_config: EnsembleConfig | None = None,
        k: int = 50,
        stop_config: StopConfig | None = None,
        state: SessionState | None = None,
        threads: int | None = None,
    ):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.fold_count = fold_count
        self.trainer_config = trainer_config
        self.ensemble_config = ensemble_config or EnsembleConfig()
        self.threads = threads
        self.state = state or SessionState(
            dataset=dataset,
            k=k,
            stop_config=stop_config or StopConfig(),
            seed=trainer_config.seed,
        )

    def compute_scores(self, on_epoch=None) -> ScoreVector:
        """One retrain-and-score pass over the current (partially corrected) dataset."""
        tensor = cross_validate(
            self.state.dataset, self.fold_count, self.trainer_config,
            threads=self.threads, on_epoch=on_epoch,
        )
        self.state.last_scores = ensemble_scores(tensor, self.ensemble_config)
        return self.state.last_scores

    def next_batch(self) -> list[str]:
        """The batch to route next; capped by any remaining annotation budget."""
        if self.state.last_scores is None:
            raise RuntimeError("no scores computed yet")
        batch = select_batch(self.state.last_scores, self.state)
        budget = self.state.stop_config.budget
        if budget is not None:
            batch = batch[: max(budget - len(self.state.corrected_ids), 0)]
        return batch

    def submit(self, batch: list[str], answer: AnnotatorAnswer) -> BatchOutcome:
        """Apply one batch of annotator decisions and advance the iteration."""
        state = self.state
        if set(answer.decisions) != set(batch):
            raise ValueError("annotator answer must cover exactly the queried batch")
        overlap = set(batch) & state.corrected_ids
        if overlap:
            raise ValueError(f"batch re-queries corrected instances: {sorted(overlap)[:3]}")
        index = state.dataset.instance_index()
        corrections = []
        for iid in batch:
            labels = answer.decisions[iid]
            if labels is None:
                # confirmation: rewrite the current labels so the instance is
                # marked corrected and leaves the query pool
                labels = state.dataset.instances[index[iid]].observed_labels
            corrections.append(Correction(iid, tuple(labels)))
        outcome = apply_corrections(state.dataset, corrections)
        state.dataset = outcome.dataset
        state.corrected_ids.update(batch)
        state.iteration += 1
        record = QueryRecord(
            iteration=state.iteration,
            queried=tuple(batch),
            changed=outcome.changed_ids,
        )
        state.query_log.append(record)
        fraction = len(outcome.changed_ids) / len(batch)
        state.last_batch_error_fraction = fraction
        stopped, reason = should_stop(state, fraction)
        if stopped:
            state.stop_reason = reason
        return BatchOutcome(
            iteration=state.iteration,
            queried=record.queried,
            changed=record.changed,
            batch_error_fraction=fraction,
            stopped=stopped,
            stop_reason=reason,
        )

    def final_ranking(self) -> list[str]:
        """Queried ids in query order, then the rest by the last computed score."""
        state = self.state
        queried = [iid for record in state.query_log for iid in record.queried]
        seen = set(queried)
        if state.last_scores is None:
            raise RuntimeError("no scores computed yet")
        rest = [iid for iid in state.last_scores.ranking() if iid not in seen]
        return queried + rest


@dataclass
class LoopResult:
    state: SessionState
    final_ranking: list[str]


def run_loop(
    dataset: Dataset,
    *,
    fold_count: int,
    trainer_config: TrainerConfig,
    ensemble_config: EnsembleConfig | None = None,
    k: int = 50,
    stop_config: StopConfig | None = None,
    annotator: Annotator = simulated_annotator,
    threads: int | None = None,
    state: SessionState | None = None,
) -> LoopResult:
    """Drive the loop to a stopping condition with a callback annotator.

    With ``max_iterations=0`` this is the non-active variant: a single scoring
    pass whose ranking is purely score-ordered.
    """
    loop = ActiveLoop(
        dataset,
        fold_count=fold_count,
        trainer_config=trainer_config,
        ensemble_config=ensemble_config,
        k=k,
        stop_config=stop_config,
        state=state,
        threads=threads,
    )
    state = loop.state
    while True:
        loop.compute_scores()
        if state.iteration >= state.stop_config.max_iterations:
            state.stop_reason = "max_iterations"
            break
        batch = loop.next_batch()
        if not batch:
            all_done = len(state.corrected_ids) >= len(state.dataset.instances)
            state.stop_reason = "exhausted" if all_done else "budget"
            break
        outcome = loop.submit(batch, annotator(state.dataset, batch))
        if outcome.stopped:
            break
    return LoopResult(state=state, final_ranking=loop.final_ranking())


def dataset_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_snapshot(state: SessionState, *, dataset_path: str, dataset_hash: str) -> dict:
    """JSON-serializable session checkpoint; features stay out (dataset by reference)."""
    corrected_labels = {
        inst.id: list(inst.observed_labels)
        for inst in state.dataset.instances
        if inst.id in state.corrected_ids
    }
    scores = state.last_scores
    return {
        "v": 1,
        "dataset_path": dataset_path,
        "dataset_sha256": dataset_hash,
        "k": state.k,
        "seed": state.seed,
        "iteration": state.iteration,
        "stop_config": {
            "max_iterations": state.stop_config.max_iterations,
            "budget": state.stop_config.budget,
            "error_fraction_threshold": state.stop_config.error_fraction_threshold,
        },
        "query_log": [
            {"iteration": r.iteration, "queried": list(r.queried), "changed": list(r.changed)}
            for r in state.query_log
        ],
        "corrected": corrected_labels,
        "last_batch_error_fraction": state.last_batch_error_fraction,
        "stop_reason": state.stop_reason,
        "last_scores": None
        if scores is None
        else {
            "method": scores.method,
            "scores": scores.scores,
            "s_train": scores.s_train,
            "s_test": scores.s_test,
        },
    }


def restore_state(snapshot: dict, dataset: Dataset) -> SessionState:
    """Rebuild a session from a checkpoint against the freshly loaded dataset."""
    corrections = [
        Correction(iid, tuple(labels)) for iid, labels in snapshot["corrected"].items()
    ]
    restored = apply_corrections(dataset, corrections).dataset if corrections else dataset
    stop = snapshot["stop_config"]
    scores = snapshot["last_scores"]
    return SessionState(
        dataset=restored,
        k=snapshot["k"],
        stop_config=StopConfig(
            max_iterations=stop["max_iterations"],
            budget=stop["budget"],
            error_fraction_threshold=stop["error_fraction_threshold"],
        ),
        seed=snapshot["seed"],
        iteration=snapshot["iteration"],
        query_log=[
            QueryRecord(r["iteration"], tuple(r["queried"]), tuple(r["changed"]))
            for r in snapshot["query_log"]
        ],
        corrected_ids=set(snapshot["corrected"]),
        last_scores=None
        if scores is None
        else ScoreVector(
            method=scores["method"],
            scores={k: float(v) for k, v in scores["scores"].items()},
            s_train=None if scores["s_train"] is None else {k: float(v) for k, v in scores["s_train"].items()},
            s_test=None if scores["s_test"] is None else {k: float(v) for k, v in scores["s_test"].items()},
        ),
        last_batch_error_fraction=snapshot["last_batch_error_fraction"],
        stop_reason=snapshot["stop_reason"],
    )


def save_checkpoint(path: str | Path, snapshot: dict) -> None:
    Path(path).write_text(json.dumps(snapshot, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict:
    try:
        snapshot = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from None
    if not isinstance(snapshot, dict) or snapshot.get("v") != 1:
        raise ValueError(f"corrupt checkpoint {path}: unsupported or missing version")
    return snapshot
