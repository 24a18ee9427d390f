"""Error scores over recorded training dynamics.

All scores are oriented so that HIGHER means MORE likely mislabeled:

- ``aum_prob``: mean over epochs of (highest non-assigned-label probability
  minus assigned-label probability), in [-1, 1].
- ``aum_logit``: the same margin over raw logits, unbounded.
- ``dm``: negative mean assigned-label probability over epochs, in [-1, 0].
- ``cu``: negative assigned-label probability under the fold model with the
  lowest test loss, taken on each unit's held-out fold.
- ensembling: the per-fold margin score is computed within each fold's epochs,
  the C-1 train-fold scores are averaged, and that average is averaged with
  the single held-out-fold score.

For sequence tasks every score is computed per token first; an instance's
score is the maximum over its tokens.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .trainer import DynamicsTensor, RunDynamics, best_epoch_by_test_loss

BASE_SCORES = ("aum_prob", "aum_logit", "dm")
SINGLE_RUN_METHODS = BASE_SCORES


def aum_prob(assigned_probs: Sequence[float], max_other_probs: Sequence[float]) -> float:
    """Mean probability margin of the non-assigned competitor over the epochs."""
    if len(assigned_probs) == 0:
        raise ValueError("need at least one epoch snapshot")
    return float(np.mean(np.asarray(max_other_probs) - np.asarray(assigned_probs)))


def aum_logit(assigned_logits: Sequence[float], max_other_logits: Sequence[float]) -> float:
    """Mean logit margin; shift-invariant in the logits."""
    if len(assigned_logits) == 0:
        raise ValueError("need at least one epoch snapshot")
    return float(np.mean(np.asarray(max_other_logits) - np.asarray(assigned_logits)))


def dm(assigned_probs: Sequence[float]) -> float:
    """Negative mean assigned-label probability over the epochs."""
    if len(assigned_probs) == 0:
        raise ValueError("need at least one epoch snapshot")
    return float(-np.mean(np.asarray(assigned_probs)))


def aggregate_sequence(token_scores: Sequence[float]) -> float:
    """Instance score of a sequence: the maximum over its token scores."""
    if len(token_scores) == 0:
        raise ValueError("cannot aggregate an empty token score list")
    return float(max(token_scores))


@dataclass(frozen=True)
class EnsembleConfig:
    use_train_ensembling: bool = True
    use_test_ensembling: bool = True
    base_score: str = "aum_prob"

    def __post_init__(self):
        if not (self.use_train_ensembling or self.use_test_ensembling):
            raise ValueError("at least one of train/test ensembling must be enabled")
        if self.base_score not in BASE_SCORES:
            raise ValueError(f"base_score must be one of {BASE_SCORES}, got {self.base_score!r}")


@dataclass
class ScoreVector:
    """Per-instance error scores; higher = more likely erroneous."""

    method: str
    scores: dict[str, float]
    s_train: dict[str, float] | None = None
    s_test: dict[str, float] | None = None

    def ranking(self) -> list[str]:
        """Instance ids by descending score; ties broken by ascending id."""
        return [iid for iid, _ in sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0]))]


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.isfinite(values).all():
        raise ValueError(f"{what} produced non-finite scores")


def _fold_unit_scores(tensor: DynamicsTensor, base_score: str) -> np.ndarray:
    """Per-fold margin scores s[c, u]: the base score over fold c's epochs."""
    if base_score == "aum_prob":
        per_epoch = tensor.max_other_prob - tensor.assigned_prob
    elif base_score == "aum_logit":
        per_epoch = tensor.max_other_logit - tensor.assigned_logit
    elif base_score == "dm":
        per_epoch = -tensor.assigned_prob
    else:
        raise ValueError(f"unknown base score {base_score!r}")
    return per_epoch.mean(axis=1)


def _aggregate_max(
    tensor_like, unit_scores: np.ndarray, details: dict[str, np.ndarray] | None = None
):
    """Max-over-units per instance; detail dicts follow the argmax unit."""
    starts = tensor_like.instance_starts()
    scores: dict[str, float] = {}
    picked: dict[str, dict[str, float]] = {name: {} for name in details} if details else {}
    for i, iid in enumerate(tensor_like.instance_ids):
        lo, hi = int(starts[i]), int(starts[i + 1])
        offset = int(np.argmax(unit_scores[lo:hi]))
        scores[iid] = float(unit_scores[lo + offset])
        if details:
            for name, arr in details.items():
                picked[name][iid] = float(arr[lo + offset])
    return scores, picked


def ensemble_unit_scores(
    tensor: DynamicsTensor, config: EnsembleConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-unit (final, train, test) ensemble scores before sequence aggregation."""
    fold_scores = _fold_unit_scores(tensor, config.base_score)
    unit_fold = tensor.unit_fold
    units = np.arange(tensor.n_units)
    s_test = fold_scores[unit_fold, units]
    s_train = (fold_scores.sum(axis=0) - s_test) / (tensor.fold_count - 1)
    if config.use_train_ensembling and config.use_test_ensembling:
        final = 0.5 * (s_train + s_test)
    elif config.use_train_ensembling:
        final = s_train
    else:
        final = s_test
    return final, s_train, s_test


def ensemble_scores(tensor: DynamicsTensor, config: EnsembleConfig) -> ScoreVector:
    """Fold-ensembled score vector (the engine's default scorer)."""
    if tensor.fold_count < 2:
        raise ValueError("ensembling needs at least 2 folds")
    final, s_train, s_test = ensemble_unit_scores(tensor, config)
    _check_finite(final, "ensemble")
    scores, picked = _aggregate_max(tensor, final, {"s_train": s_train, "s_test": s_test})
    return ScoreVector(
        method="ensemble",
        scores=scores,
        s_train=picked["s_train"],
        s_test=picked["s_test"],
    )


def cu(tensor: DynamicsTensor) -> ScoreVector:
    """Held-out uncertainty at each fold's best epoch by test loss."""
    best = np.array(
        [best_epoch_by_test_loss(tensor, fold) - 1 for fold in range(tensor.fold_count)]
    )
    unit_fold = tensor.unit_fold
    units = np.arange(tensor.n_units)
    unit_scores = -tensor.assigned_prob[unit_fold, best[unit_fold], units]
    _check_finite(unit_scores, "cu")
    scores, _ = _aggregate_max(tensor, unit_scores)
    return ScoreVector(method="cu", scores=scores)


def single_run_scores(run: RunDynamics, method: str) -> ScoreVector:
    """Score a single training run with one of the single-model baselines."""
    if method == "aum_prob":
        unit_scores = (run.max_other_prob - run.assigned_prob).mean(axis=0)
    elif method == "aum_logit":
        unit_scores = (run.max_other_logit - run.assigned_logit).mean(axis=0)
    elif method == "dm":
        unit_scores = -run.assigned_prob.mean(axis=0)
    else:
        raise ValueError(f"unknown single-run method {method!r}")
    _check_finite(unit_scores, method)
    scores, _ = _aggregate_max(run, unit_scores)
    return ScoreVector(method=method, scores=scores)


def write_scores_csv(vector: ScoreVector, path: str | Path) -> None:
    """CSV export sorted by descending score (ties by ascending id)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "score", "s_train", "s_test", "method"])
        for iid in vector.ranking():
            writer.writerow(
                [
                    iid,
                    repr(vector.scores[iid]),
                    repr(vector.s_train[iid]) if vector.s_train else "",
                    repr(vector.s_test[iid]) if vector.s_test else "",
                    vector.method,
                ]
            )
