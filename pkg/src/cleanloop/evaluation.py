"""Ranking evaluation: average precision, PR curves, and the experiment runner.

Average precision uses the interpolation-free definition: the mean of the
precision values at the ranks where true errors sit. Score-based rankings
break ties by ascending instance id, so every reported number is a pure
function of (dataset, method, seed).
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .data import Dataset, error_mask_by_id
from .loop import StopConfig, run_loop, simulated_annotator
from .scoring import (
    EnsembleConfig,
    ScoreVector,
    cu,
    ensemble_scores,
    single_run_scores,
)
from .trainer import TrainerConfig, cross_validate, train_full

METHODS = ("aum_prob", "aum_logit", "dm", "cu", "ensemble", "active")


def _as_ranking(ranking: Sequence[str] | ScoreVector) -> list[str]:
    if isinstance(ranking, ScoreVector):
        return ranking.ranking()
    return list(ranking)


def _positives(ranking: list[str], mask: Mapping[str, bool]) -> int:
    positives = sum(1 for iid in ranking if mask[iid])
    if positives < 1:
        raise ValueError("need at least one positive instance to evaluate a ranking")
    return positives


def average_precision(ranking: Sequence[str] | ScoreVector, mask: Mapping[str, bool]) -> float:
    """Mean precision at the ranks of the true errors."""
    ids = _as_ranking(ranking)
    positives = _positives(ids, mask)
    hits = 0
    total = 0.0
    for rank, iid in enumerate(ids, start=1):
        if mask[iid]:
            hits += 1
            total += hits / rank
    return total / positives


def pr_curve(
    ranking: Sequence[str] | ScoreVector, mask: Mapping[str, bool]
) -> list[tuple[float, float]]:
    """(recall, precision) at every rank cutoff, one point per position."""
    ids = _as_ranking(ranking)
    positives = _positives(ids, mask)
    points = []
    hits = 0
    for rank, iid in enumerate(ids, start=1):
        if mask[iid]:
            hits += 1
        points.append((hits / positives, hits / rank))
    return points


@dataclass(frozen=True)
class SeedAggregate:
    aps: tuple[float, ...]
    mean: float
    std: float  # population standard deviation


def seed_aggregate(aps: Sequence[float]) -> SeedAggregate:
    if len(aps) == 0:
        raise ValueError("need at least one AP value")
    values = [float(a) for a in aps]
    std = statistics.pstdev(values) if len(values) > 1 else 0.0
    return SeedAggregate(aps=tuple(values), mean=statistics.fmean(values), std=std)


@dataclass
class EvaluationReport:
    ap: float
    pr_curve: list[tuple[float, float]]
    per_iteration_yield: list[tuple[int, int, int]]  # (iteration, errors found, batch size)
    positives: int
    total: int


@dataclass
class SeedRun:
    seed: int
    report: EvaluationReport
    scores: ScoreVector
    ranking: list[str]


@dataclass
class ExperimentResult:
    method: str
    seeds: tuple[int, ...]
    aggregate: SeedAggregate
    runs: list[SeedRun]


def run_experiment(
    dataset: Dataset,
    method: str,
    seeds: Sequence[int],
    *,
    fold_count: int = 10,
    trainer_config: TrainerConfig | None = None,
    ensemble_config: EnsembleConfig | None = None,
    k: int = 50,
    stop_config: StopConfig | None = None,
    threads: int | None = None,
) -> ExperimentResult:
    """Run one detection method over several seeds and score it against gold.

    The error mask is taken from the dataset as given, before the active loop
    applies any correction. Single-model baselines score one full-data
    training run; ``cu`` and ``ensemble`` score one cross-validation pass;
    ``active`` scores the loop's final ranking (query order first, then the
    rest by the last scores).
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if not dataset.has_gold:
        raise ValueError("run_experiment needs gold labels (simulation mode)")
    if not seeds:
        raise ValueError("need at least one seed")
    base_config = trainer_config or TrainerConfig()
    ensemble_config = ensemble_config or EnsembleConfig()
    mask = error_mask_by_id(dataset)
    total = len(dataset.instances)

    runs = []
    for seed in seeds:
        config = replace(base_config, seed=seed)
        per_iteration: list[tuple[int, int, int]] = []
        if method in ("aum_prob", "aum_logit", "dm"):
            scores = single_run_scores(train_full(dataset, config), method)
            ranking = scores.ranking()
        elif method == "cu":
            scores = cu(cross_validate(dataset, fold_count, config, threads=threads))
            ranking = scores.ranking()
        elif method == "ensemble":
            tensor = cross_validate(dataset, fold_count, config, threads=threads)
            scores = ensemble_scores(tensor, ensemble_config)
            ranking = scores.ranking()
        else:
            result = run_loop(
                dataset,
                fold_count=fold_count,
                trainer_config=config,
                ensemble_config=ensemble_config,
                k=k,
                stop_config=stop_config,
                annotator=simulated_annotator,
                threads=threads,
            )
            assert result.state.last_scores is not None
            scores = result.state.last_scores
            ranking = result.final_ranking
            per_iteration = [
                (r.iteration, len(r.changed), len(r.queried)) for r in result.state.query_log
            ]
        report = EvaluationReport(
            ap=average_precision(ranking, mask),
            pr_curve=pr_curve(ranking, mask),
            per_iteration_yield=per_iteration,
            positives=sum(mask.values()),
            total=total,
        )
        runs.append(SeedRun(seed=seed, report=report, scores=scores, ranking=ranking))

    aggregate = seed_aggregate([run.report.ap for run in runs])
    return ExperimentResult(
        method=method, seeds=tuple(int(s) for s in seeds), aggregate=aggregate, runs=runs
    )


def format_aggregate_table(results: Sequence[ExperimentResult]) -> str:
    """Aligned text table of mean +/- std AP in percent (population std)."""
    rows = [("method", "ap (%)", "seeds")]
    for res in results:
        agg = res.aggregate
        rows.append(
            (res.method, f"{agg.mean * 100:.1f}±{agg.std * 100:.1f}", str(len(agg.aps)))
        )
    widths = [max(len(row[col]) for row in rows) for col in range(3)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"
