"""Dataset model, JSONL ingestion, label perturbation, and correction application.

A dataset is a fixed label alphabet plus a list of instances. Classification
instances carry one label for the whole text; sequence instances carry one
label per token. Internally both are stored uniformly as a tuple of
"annotation units" (length 1 for classification), which keeps every consumer
(trainer, scoring, evaluation) free of task-kind branching.

Datasets are immutable: every operation that changes labels returns a new
``Dataset`` value and leaves its input untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .features import DEFAULT_DIM, SparseVector, hash_text, hash_tokens

CLASSIFICATION = "classification"
SEQUENCE = "sequence"
TASK_KINDS = (CLASSIFICATION, SEQUENCE)


class DatasetError(ValueError):
    """Malformed dataset file or violated dataset invariant."""


class ParseError(DatasetError):
    """Unreadable dataset line; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class LabelSpace:
    """Ordered label alphabet; a label's index is its position and never changes."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise DatasetError(f"label space needs at least 2 labels, got {len(self.labels)}")
        if len(set(self.labels)) != len(self.labels):
            raise DatasetError("label space contains duplicate labels")

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DatasetError(f"unknown label {label!r}") from None


@dataclass(frozen=True)
class Instance:
    """One dataset instance; ``observed_labels`` has one entry per annotation unit."""

    id: str
    observed_labels: tuple[int, ...]
    features: tuple[SparseVector, ...]
    gold_labels: tuple[int, ...] | None = None
    corrected: bool = False
    text: str | None = None
    tokens: tuple[str, ...] | None = None

    @property
    def n_units(self) -> int:
        return len(self.observed_labels)


@dataclass(frozen=True)
class Correction:
    """Replacement labels for one instance (full label tuple, all units)."""

    instance_id: str
    new_labels: tuple[int, ...]


@dataclass(frozen=True)
class CorrectionOutcome:
    dataset: "Dataset"
    changed_ids: tuple[str, ...]
    diagnostics: tuple[str, ...] = ()


@dataclass(frozen=True)
class Dataset:
    task_kind: str
    label_space: LabelSpace
    instances: tuple[Instance, ...]
    seed: int = 0
    feature_dim: int = DEFAULT_DIM

    def __post_init__(self):
        self._validate()

    def _validate(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise DatasetError(f"unknown task kind {self.task_kind!r}")
        size = self.label_space.size
        seen: set[str] = set()
        gold_flags = set()
        for inst in self.instances:
            if inst.id in seen:
                raise DatasetError(f"duplicate instance id {inst.id!r}")
            seen.add(inst.id)
            if inst.n_units < 1:
                raise DatasetError(f"instance {inst.id!r} has no annotation units")
            if self.task_kind == CLASSIFICATION and inst.n_units != 1:
                raise DatasetError(f"classification instance {inst.id!r} has {inst.n_units} labels")
            if len(inst.features) != inst.n_units:
                raise DatasetError(
                    f"instance {inst.id!r}: {len(inst.features)} feature vectors "
                    f"for {inst.n_units} labels"
                )
            if any(not vec for vec in inst.features):
                raise DatasetError(f"instance {inst.id!r} has an empty feature vector")
            if any(y < 0 or y >= size for y in inst.observed_labels):
                raise DatasetError(f"instance {inst.id!r} has a label index out of range")
            gold_flags.add(inst.gold_labels is not None)
            if inst.gold_labels is not None:
                if len(inst.gold_labels) != inst.n_units:
                    raise DatasetError(f"instance {inst.id!r}: gold/observed shape mismatch")
                if any(y < 0 or y >= size for y in inst.gold_labels):
                    raise DatasetError(f"instance {inst.id!r} has a gold label index out of range")
        if len(gold_flags) > 1:
            raise DatasetError("gold labels must be present on all instances or none")

    @property
    def has_gold(self) -> bool:
        return bool(self.instances) and self.instances[0].gold_labels is not None

    @property
    def annotation_count(self) -> int:
        return sum(inst.n_units for inst in self.instances)

    def instance_index(self) -> dict[str, int]:
        return {inst.id: i for i, inst in enumerate(self.instances)}


def _labels_to_indices(space: LabelSpace, raw, line_number: int) -> tuple[int, ...]:
    values = raw if isinstance(raw, list) else [raw]
    out = []
    for value in values:
        if not isinstance(value, str):
            raise ParseError(line_number, f"label entries must be strings, got {value!r}")
        try:
            out.append(space.index(value))
        except DatasetError as exc:
            raise ParseError(line_number, str(exc)) from None
    return tuple(out)


def load_dataset(path: str | Path, dim: int | None = None) -> Dataset:
    """Load and validate a JSONL dataset file, featurizing every instance.

    The first line is a header object with ``task_kind`` and ``labels`` (plus
    optional ``seed`` and ``feature_dim`` written by :func:`write_dataset`).
    Each further line holds one instance. ``dim`` overrides the feature
    dimension recorded in the header.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(1, "empty dataset file, expected a header line")

    def parse(line_number: int, text: str) -> dict:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(line_number, f"invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ParseError(line_number, "expected a JSON object")
        return obj

    header = parse(1, lines[0])
    task_kind = header.get("task_kind")
    if task_kind not in TASK_KINDS:
        raise ParseError(1, f"header task_kind must be one of {TASK_KINDS}, got {task_kind!r}")
    labels = header.get("labels")
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise ParseError(1, "header labels must be a list of strings")
    space = LabelSpace(tuple(labels))
    if dim is None:
        dim = int(header.get("feature_dim", DEFAULT_DIM))
    seed = int(header.get("seed", 0))

    instances = []
    for line_number, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        obj = parse(line_number, text)
        if "id" not in obj or not isinstance(obj["id"], str):
            raise ParseError(line_number, "missing string field 'id'")
        inst_id = obj["id"]
        if task_kind == CLASSIFICATION:
            if "text" not in obj or not isinstance(obj["text"], str):
                raise ParseError(line_number, "classification instance needs a 'text' string")
            if "label" not in obj:
                raise ParseError(line_number, "classification instance needs a 'label'")
            observed = _labels_to_indices(space, obj["label"], line_number)
            gold = (
                _labels_to_indices(space, obj["gold_label"], line_number)
                if "gold_label" in obj
                else None
            )
            try:
                feats = (hash_text(obj["text"], dim),)
            except ValueError as exc:
                raise ParseError(line_number, str(exc)) from None
            inst = Instance(
                id=inst_id,
                observed_labels=observed,
                features=feats,
                gold_labels=gold,
                corrected=bool(obj.get("corrected", False)),
                text=obj["text"],
            )
        else:
            tokens = obj.get("tokens")
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise ParseError(line_number, "sequence instance needs a 'tokens' list of strings")
            if "labels" not in obj or not isinstance(obj["labels"], list):
                raise ParseError(line_number, "sequence instance needs a 'labels' list")
            observed = _labels_to_indices(space, obj["labels"], line_number)
            if len(observed) != len(tokens):
                raise ParseError(
                    line_number,
                    f"{len(tokens)} tokens but {len(observed)} labels",
                )
            gold = None
            if "gold_labels" in obj:
                gold = _labels_to_indices(space, obj["gold_labels"], line_number)
                if len(gold) != len(tokens):
                    raise ParseError(
                        line_number,
                        f"{len(tokens)} tokens but {len(gold)} gold labels",
                    )
            try:
                feats = tuple(hash_tokens(tokens, dim))
            except ValueError as exc:
                raise ParseError(line_number, str(exc)) from None
            inst = Instance(
                id=inst_id,
                observed_labels=observed,
                features=feats,
                gold_labels=gold,
                corrected=bool(obj.get("corrected", False)),
                tokens=tuple(tokens),
            )
        instances.append(inst)

    return Dataset(
        task_kind=task_kind,
        label_space=space,
        instances=tuple(instances),
        seed=seed,
        feature_dim=dim,
    )


def dataset_to_jsonl(dataset: Dataset) -> str:
    """Serialize a dataset to its JSONL text form (byte-stable)."""
    names = dataset.label_space.labels
    lines = [
        json.dumps(
            {
                "task_kind": dataset.task_kind,
                "labels": list(names),
                "seed": dataset.seed,
                "feature_dim": dataset.feature_dim,
            },
            ensure_ascii=False,
        )
    ]
    for inst in dataset.instances:
        obj: dict = {"id": inst.id}
        if dataset.task_kind == CLASSIFICATION:
            obj["text"] = inst.text
            obj["label"] = names[inst.observed_labels[0]]
            if inst.gold_labels is not None:
                obj["gold_label"] = names[inst.gold_labels[0]]
        else:
            obj["tokens"] = list(inst.tokens or ())
            obj["labels"] = [names[y] for y in inst.observed_labels]
            if inst.gold_labels is not None:
                obj["gold_labels"] = [names[y] for y in inst.gold_labels]
        if inst.corrected:
            obj["corrected"] = True
        lines.append(json.dumps(obj, ensure_ascii=False))
    return "\n".join(lines) + "\n"


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset as JSONL; ``load_dataset`` round-trips the result exactly."""
    Path(path).write_text(dataset_to_jsonl(dataset), encoding="utf-8")


def perturb_labels(dataset: Dataset, rate: float, seed: int) -> Dataset:
    """Resample a fixed fraction of annotations to a *different* uniform label.

    Takes a gold-free dataset, snapshots its labels as gold, then flips exactly
    ``round(rate * annotation_count)`` annotation positions chosen uniformly
    without replacement. Because resampling excludes the current label, the
    realized error rate equals the nominal rate exactly.
    """
    if not 0 < rate < 1:
        raise DatasetError(f"perturbation rate must be in (0, 1), got {rate}")
    if dataset.has_gold:
        raise DatasetError("dataset already has gold labels; refusing to perturb again")
    if seed < 0:
        raise DatasetError("seed must be nonnegative")

    total = dataset.annotation_count
    n_flips = round(rate * total)
    rng = np.random.default_rng(seed)
    flip_positions = set(rng.choice(total, size=n_flips, replace=False).tolist())

    size = dataset.label_space.size
    new_instances = []
    position = 0
    for inst in dataset.instances:
        observed = list(inst.observed_labels)
        for unit in range(inst.n_units):
            if position in flip_positions:
                draw = int(rng.integers(size - 1))
                observed[unit] = draw if draw < observed[unit] else draw + 1
            position += 1
        new_instances.append(
            replace(inst, observed_labels=tuple(observed), gold_labels=inst.observed_labels)
        )
    return replace(dataset, instances=tuple(new_instances), seed=seed)


def apply_corrections(dataset: Dataset, corrections: list[Correction]) -> CorrectionOutcome:
    """Apply label corrections, marking targets corrected.

    Re-correcting an already-corrected instance and duplicate targets within
    one call are accepted (last write wins) but reported in the diagnostics.
    """
    index = dataset.instance_index()
    diagnostics: list[str] = []
    pending: dict[str, tuple[int, ...]] = {}
    size = dataset.label_space.size
    for corr in corrections:
        if corr.instance_id not in index:
            raise DatasetError(f"correction targets unknown instance {corr.instance_id!r}")
        inst = dataset.instances[index[corr.instance_id]]
        if len(corr.new_labels) != inst.n_units:
            raise DatasetError(
                f"correction for {corr.instance_id!r} has {len(corr.new_labels)} labels, "
                f"instance has {inst.n_units}"
            )
        if any(y < 0 or y >= size for y in corr.new_labels):
            raise DatasetError(f"correction for {corr.instance_id!r} has a label out of range")
        if inst.corrected:
            diagnostics.append(f"{corr.instance_id}: already corrected, overwriting")
        if corr.instance_id in pending:
            diagnostics.append(f"{corr.instance_id}: multiple corrections in one batch, last wins")
        pending[corr.instance_id] = tuple(corr.new_labels)

    changed = []
    new_instances = list(dataset.instances)
    for inst_id, labels in pending.items():
        i = index[inst_id]
        inst = new_instances[i]
        if inst.observed_labels != labels:
            changed.append(inst_id)
        new_instances[i] = replace(inst, observed_labels=labels, corrected=True)
    return CorrectionOutcome(
        dataset=replace(dataset, instances=tuple(new_instances)),
        changed_ids=tuple(changed),
        diagnostics=tuple(diagnostics),
    )


def error_mask(dataset: Dataset) -> np.ndarray:
    """Boolean mask over instances: True where any annotation differs from gold."""
    if not dataset.has_gold:
        raise DatasetError("error mask requires gold labels")
    return np.array(
        [inst.observed_labels != inst.gold_labels for inst in dataset.instances],
        dtype=bool,
    )


def error_mask_by_id(dataset: Dataset) -> dict[str, bool]:
    mask = error_mask(dataset)
    return {inst.id: bool(mask[i]) for i, inst in enumerate(dataset.instances)}
