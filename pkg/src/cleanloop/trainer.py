"""Cross-validation training that records per-epoch prediction dynamics.

The built-in model is multinomial logistic regression over hashed sparse
features, trained by mini-batch SGD with optional L2 decay. Sequence tasks are
handled as independent per-token classification: the "unit" of training and of
every recorded snapshot is one annotation (the instance for classification,
one token for sequences), while folds are assigned at the instance level.

Training is fully deterministic: weights start at zero, the only randomness is
the per-epoch batch order drawn from a per-fold stream seeded by
``(config.seed, fold)``, so parallel and sequential fold execution produce
bit-identical results. Any external trainer can replace the built-in one by
producing the same per-(fold, epoch, unit) records.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import json

import numpy as np
import scipy.sparse as sp

from .data import Dataset

THREADS_ENV = "CLEANLOOP_THREADS"


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 10
    learning_rate: float = 0.1
    batch_size: int = 32
    l2: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")
        if self.learning_rate * self.l2 >= 1:
            raise ValueError("learning_rate * l2 must be < 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass(frozen=True)
class FoldAssignment:
    """Instance-level fold labels; all tokens of a sequence share its fold."""

    fold_count: int
    fold_of: dict[str, int]


def assign_folds(dataset: Dataset, fold_count: int, seed: int) -> FoldAssignment:
    """Shuffled round-robin fold assignment, deterministic in (dataset.seed, seed)."""
    n = len(dataset.instances)
    if fold_count < 2 or fold_count > n:
        raise ValueError(f"fold count must be in [2, {n}], got {fold_count}")
    rng = np.random.default_rng([dataset.seed, seed])
    order = rng.permutation(n)
    fold_of = {dataset.instances[int(idx)].id: i % fold_count for i, idx in enumerate(order)}
    return FoldAssignment(fold_count=fold_count, fold_of=fold_of)


class UnitTable:
    """Flattened annotation units of a dataset: CSR design matrix plus indices."""

    def __init__(self, dataset: Dataset):
        ids = []
        unit_instance = []
        labels = []
        rows: list[dict[int, float]] = []
        counts = []
        for i, inst in enumerate(dataset.instances):
            ids.append(inst.id)
            counts.append(inst.n_units)
            for unit in range(inst.n_units):
                unit_instance.append(i)
                labels.append(inst.observed_labels[unit])
                rows.append(inst.features[unit])
        self.instance_ids: tuple[str, ...] = tuple(ids)
        self.unit_counts = np.array(counts, dtype=np.int64)
        self.unit_instance = np.array(unit_instance, dtype=np.int64)
        self.labels = np.array(labels, dtype=np.int64)
        self.n_labels = dataset.label_space.size
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        nnz = [len(r) for r in rows]
        np.cumsum(nnz, out=indptr[1:])
        indices = np.empty(indptr[-1], dtype=np.int64)
        values = np.empty(indptr[-1], dtype=np.float64)
        for r, row in enumerate(rows):
            keys = sorted(row)
            start = indptr[r]
            indices[start : start + len(keys)] = keys
            values[start : start + len(keys)] = [row[k] for k in keys]
        self.matrix = sp.csr_matrix(
            (values, indices, indptr), shape=(len(rows), dataset.feature_dim)
        )

    @property
    def n_units(self) -> int:
        return self.matrix.shape[0]

    def instance_starts(self) -> np.ndarray:
        starts = np.zeros(len(self.instance_ids) + 1, dtype=np.int64)
        np.cumsum(self.unit_counts, out=starts[1:])
        return starts


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; finite input yields rows summing to 1."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ce_loss(weights: np.ndarray, features: np.ndarray, labels: np.ndarray, l2: float = 0.0) -> float:
    """Mean cross-entropy of a dense batch under ``weights`` plus L2 penalty."""
    logp = log_softmax(features @ weights)
    data = -logp[np.arange(len(labels)), labels].mean()
    return float(data + 0.5 * l2 * (weights**2).sum())


def ce_gradient(
    weights: np.ndarray, features: np.ndarray, labels: np.ndarray, l2: float = 0.0
) -> np.ndarray:
    """Gradient of :func:`ce_loss` with respect to ``weights`` (dim x labels)."""
    probs = softmax(features @ weights)
    probs[np.arange(len(labels)), labels] -= 1.0
    return features.T @ probs / len(labels) + l2 * weights


@dataclass
class FoldDynamics:
    """Per-epoch snapshots of one fold's model over every unit of the dataset.

    Arrays are (epochs, units); a unit belongs to the fold's test partition
    when its instance is assigned to this fold, else to the train partition.
    ``test_loss`` is the mean cross-entropy over the test partition per epoch.
    """

    fold: int
    assigned_prob: np.ndarray
    max_other_prob: np.ndarray
    assigned_logit: np.ndarray
    max_other_logit: np.ndarray
    loss: np.ndarray
    test_loss: np.ndarray


@dataclass
class RunDynamics:
    """Per-epoch snapshots of a single training run on the full dataset."""

    instance_ids: tuple[str, ...]
    unit_counts: np.ndarray
    assigned_prob: np.ndarray
    max_other_prob: np.ndarray
    assigned_logit: np.ndarray
    max_other_logit: np.ndarray
    loss: np.ndarray

    @property
    def epochs(self) -> int:
        return self.assigned_prob.shape[0]

    def instance_starts(self) -> np.ndarray:
        starts = np.zeros(len(self.instance_ids) + 1, dtype=np.int64)
        np.cumsum(self.unit_counts, out=starts[1:])
        return starts


@dataclass
class DynamicsTensor:
    """Complete prediction dynamics of a C-fold cross-validation run.

    Arrays are (folds, epochs, units). Every unit is covered by every fold:
    in the test partition of exactly the fold its instance is assigned to and
    in the train partition of the other C-1.
    """

    fold_count: int
    epochs: int
    instance_ids: tuple[str, ...]
    unit_counts: np.ndarray
    instance_fold: np.ndarray
    unit_instance: np.ndarray
    assigned_prob: np.ndarray
    max_other_prob: np.ndarray
    assigned_logit: np.ndarray
    max_other_logit: np.ndarray
    loss: np.ndarray
    test_loss: np.ndarray

    @property
    def n_units(self) -> int:
        return self.assigned_prob.shape[2]

    @property
    def unit_fold(self) -> np.ndarray:
        """Test fold of each unit (the fold of its instance)."""
        return self.instance_fold[self.unit_instance]

    def instance_starts(self) -> np.ndarray:
        starts = np.zeros(len(self.instance_ids) + 1, dtype=np.int64)
        np.cumsum(self.unit_counts, out=starts[1:])
        return starts

    def fold_assignment(self) -> FoldAssignment:
        return FoldAssignment(
            fold_count=self.fold_count,
            fold_of={iid: int(f) for iid, f in zip(self.instance_ids, self.instance_fold)},
        )

    def validate(self) -> None:
        shape = (self.fold_count, self.epochs, int(self.unit_counts.sum()))
        for name in ("assigned_prob", "max_other_prob", "assigned_logit", "max_other_logit", "loss"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
        if self.test_loss.shape != (self.fold_count, self.epochs):
            raise ValueError("test_loss has wrong shape")
        probs_sum = self.assigned_prob + self.max_other_prob
        if (self.assigned_prob < -1e-12).any() or (self.assigned_prob > 1 + 1e-9).any():
            raise ValueError("assigned probabilities out of [0, 1]")
        if (probs_sum > 1 + 1e-9).any():
            raise ValueError("assigned + max-other probability exceeds 1")
        counts = np.bincount(self.instance_fold, minlength=self.fold_count)
        if counts.min() < 1:
            raise ValueError("every fold needs at least one test instance")


def _sgd_dynamics(
    table: UnitTable,
    train_units: np.ndarray,
    test_units: np.ndarray,
    config: TrainerConfig,
    rng: np.random.Generator,
    on_epoch=None,
):
    """Run the SGD schedule and record end-of-epoch snapshots over all units.

    L2 decay is folded into a scalar ``scale`` on the weight matrix so each
    batch touches only its own feature rows; logits are exact throughout.
    """
    matrix = table.matrix
    n_units, dim = matrix.shape
    n_labels = table.n_labels
    labels = table.labels
    weights = np.zeros((dim, n_labels))
    scale = 1.0
    lr = config.learning_rate
    decay = 1.0 - lr * config.l2

    epochs = config.epochs
    out = {
        name: np.empty((epochs, n_units))
        for name in ("assigned_prob", "max_other_prob", "assigned_logit", "max_other_logit", "loss")
    }
    test_loss = np.empty(epochs)
    unit_range = np.arange(n_units)

    for epoch in range(epochs):
        order = rng.permutation(train_units)
        shuffled = matrix[order]  # one CSR gather per epoch; batches below are raw views
        indptr = shuffled.indptr
        for start in range(0, len(order), config.batch_size):
            end = min(start + config.batch_size, len(order))
            batch_labels = labels[order[start:end]]
            size = end - start
            lo, hi = indptr[start], indptr[end]
            cols = shuffled.indices[lo:hi]
            vals = shuffled.data[lo:hi]
            row_of = np.repeat(np.arange(size), np.diff(indptr[start : end + 1]))
            logits = np.zeros((size, n_labels))
            np.add.at(logits, row_of, (scale * vals)[:, None] * weights[cols])
            probs = softmax(logits)
            probs[np.arange(size), batch_labels] -= 1.0
            probs /= size
            scale *= decay
            np.subtract.at(weights, cols, (lr / scale) * vals[:, None] * probs[row_of])

        logits = scale * (matrix @ weights)
        logp = log_softmax(logits)
        assigned_logit = logits[unit_range, labels]
        masked = logits.copy()
        masked[unit_range, labels] = -np.inf
        other = masked.argmax(axis=1)
        out["assigned_logit"][epoch] = assigned_logit
        out["max_other_logit"][epoch] = logits[unit_range, other]
        out["assigned_prob"][epoch] = np.exp(logp[unit_range, labels])
        out["max_other_prob"][epoch] = np.exp(logp[unit_range, other])
        out["loss"][epoch] = -logp[unit_range, labels]
        test_loss[epoch] = out["loss"][epoch][test_units].mean() if len(test_units) else np.nan
        if on_epoch is not None:
            on_epoch()

    return out, test_loss


def _fold_units(table: UnitTable, assignment: FoldAssignment, fold: int):
    instance_fold = np.array(
        [assignment.fold_of[iid] for iid in table.instance_ids], dtype=np.int64
    )
    in_fold = instance_fold[table.unit_instance] == fold
    units = np.arange(table.n_units)
    return units[~in_fold], units[in_fold]


def train_fold(
    dataset: Dataset,
    fold: int,
    assignment: FoldAssignment,
    config: TrainerConfig,
    on_epoch=None,
) -> FoldDynamics:
    """Train one fold's model and snapshot all units at the end of each epoch."""
    if fold < 0 or fold >= assignment.fold_count:
        raise ValueError(f"fold {fold} out of range [0, {assignment.fold_count})")
    table = UnitTable(dataset)
    return _train_fold(table, fold, assignment, config, on_epoch)


def _train_fold(
    table: UnitTable,
    fold: int,
    assignment: FoldAssignment,
    config: TrainerConfig,
    on_epoch=None,
) -> FoldDynamics:
    train_units, test_units = _fold_units(table, assignment, fold)
    rng = np.random.default_rng([config.seed, fold])
    out, test_loss = _sgd_dynamics(table, train_units, test_units, config, rng, on_epoch)
    return FoldDynamics(fold=fold, test_loss=test_loss, **out)


def train_full(dataset: Dataset, config: TrainerConfig, on_epoch=None) -> RunDynamics:
    """Single training run on the whole dataset (no folds); used by the
    single-model baselines."""
    table = UnitTable(dataset)
    rng = np.random.default_rng([config.seed])
    all_units = np.arange(table.n_units)
    out, _ = _sgd_dynamics(table, all_units, np.array([], dtype=np.int64), config, rng, on_epoch)
    return RunDynamics(instance_ids=table.instance_ids, unit_counts=table.unit_counts, **out)


def _thread_count(fold_count: int, threads: int | None) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else min(fold_count, os.cpu_count() or 1)
    return max(1, min(threads, fold_count))


def cross_validate(
    dataset: Dataset,
    fold_count: int,
    config: TrainerConfig,
    threads: int | None = None,
    on_epoch=None,
) -> DynamicsTensor:
    """Train every fold and assemble the full dynamics tensor.

    A pure function of (dataset, fold_count, config): folds may train in
    parallel threads (capped by ``threads`` or $CLEANLOOP_THREADS) without
    changing any output bit.
    """
    assignment = assign_folds(dataset, fold_count, config.seed)
    table = UnitTable(dataset)
    workers = _thread_count(fold_count, threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            folds = list(
                pool.map(
                    lambda c: _train_fold(table, c, assignment, config, on_epoch),
                    range(fold_count),
                )
            )
    else:
        folds = [_train_fold(table, c, assignment, config, on_epoch) for c in range(fold_count)]

    instance_fold = np.array(
        [assignment.fold_of[iid] for iid in table.instance_ids], dtype=np.int64
    )
    tensor = DynamicsTensor(
        fold_count=fold_count,
        epochs=config.epochs,
        instance_ids=table.instance_ids,
        unit_counts=table.unit_counts,
        instance_fold=instance_fold,
        unit_instance=table.unit_instance,
        assigned_prob=np.stack([f.assigned_prob for f in folds]),
        max_other_prob=np.stack([f.max_other_prob for f in folds]),
        assigned_logit=np.stack([f.assigned_logit for f in folds]),
        max_other_logit=np.stack([f.max_other_logit for f in folds]),
        loss=np.stack([f.loss for f in folds]),
        test_loss=np.stack([f.test_loss for f in folds]),
    )
    tensor.validate()
    return tensor


def best_epoch_by_test_loss(tensor: DynamicsTensor, fold: int) -> int:
    """1-based epoch with the lowest mean test loss; ties go to the earliest."""
    return int(np.argmin(tensor.test_loss[fold])) + 1


FIELDS = ("assigned_prob", "max_other_prob", "assigned_logit", "max_other_logit", "loss")
_JSON_KEYS = ("p_assigned", "p_max_other", "logit_assigned", "logit_max_other", "loss")


def export_dynamics(tensor: DynamicsTensor, path: str | Path) -> None:
    """Write the tensor as JSONL, one line per (fold, epoch, partition, unit)."""
    starts = tensor.instance_starts()
    unit_fold = tensor.unit_fold
    with open(path, "w", encoding="utf-8") as fh:
        for fold in range(tensor.fold_count):
            for epoch in range(tensor.epochs):
                for i, iid in enumerate(tensor.instance_ids):
                    for unit in range(int(starts[i]), int(starts[i + 1])):
                        rec = {
                            "fold": fold,
                            "epoch": epoch + 1,
                            "partition": "test" if unit_fold[unit] == fold else "train",
                            "id": iid,
                            "token": int(unit - starts[i]) if tensor.unit_counts[i] > 1 else None,
                        }
                        for key, field_name in zip(_JSON_KEYS, FIELDS):
                            rec[key] = float(getattr(tensor, field_name)[fold, epoch, unit])
                        fh.write(json.dumps(rec) + "\n")


def load_dynamics(path: str | Path, dataset: Dataset) -> DynamicsTensor:
    """Rebuild a tensor from its JSONL export; the dataset fixes unit order.

    Lets an external trainer feed the scoring engine: only the five snapshot
    scalars are required, per-fold test losses are recomputed from them.
    """
    table = UnitTable(dataset)
    starts = np.zeros(len(table.instance_ids) + 1, dtype=np.int64)
    np.cumsum(table.unit_counts, out=starts[1:])
    index = {iid: i for i, iid in enumerate(table.instance_ids)}

    records = []
    max_fold = -1
    max_epoch = 0
    for line_number, line in enumerate(open(path, encoding="utf-8"), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["id"] not in index:
            raise ValueError(f"line {line_number}: unknown instance id {rec['id']!r}")
        max_fold = max(max_fold, rec["fold"])
        max_epoch = max(max_epoch, rec["epoch"])
        records.append(rec)

    fold_count, epochs, n_units = max_fold + 1, max_epoch, table.n_units
    arrays = {name: np.full((fold_count, epochs, n_units), np.nan) for name in FIELDS}
    instance_fold = np.full(len(table.instance_ids), -1, dtype=np.int64)
    for rec in records:
        i = index[rec["id"]]
        unit = int(starts[i]) + (rec["token"] or 0)
        for key, field_name in zip(_JSON_KEYS, FIELDS):
            arrays[field_name][rec["fold"], rec["epoch"] - 1, unit] = rec[key]
        if rec["partition"] == "test":
            instance_fold[i] = rec["fold"]

    if (instance_fold < 0).any():
        missing = table.instance_ids[int(np.argmin(instance_fold))]
        raise ValueError(f"instance {missing!r} never appears in a test partition")
    unit_fold = instance_fold[table.unit_instance]
    test_loss = np.empty((fold_count, epochs))
    for fold in range(fold_count):
        test_units = unit_fold == fold
        test_loss[fold] = arrays["loss"][fold][:, test_units].mean(axis=1)

    tensor = DynamicsTensor(
        fold_count=fold_count,
        epochs=epochs,
        instance_ids=table.instance_ids,
        unit_counts=table.unit_counts,
        instance_fold=instance_fold,
        unit_instance=table.unit_instance,
        test_loss=test_loss,
        **arrays,
    )
    tensor.validate()
    return tensor
