"""Synthetic dataset generators for experiments and tests.

Both generators produce clean datasets (no gold labels yet); pair them with
``perturb_labels`` to inject a known error rate. Texts are built from
label-specific vocabularies, so the hashed features form separable clusters.
"""

from __future__ import annotations

import numpy as np

from .data import CLASSIFICATION, SEQUENCE, Dataset, Instance, LabelSpace
from .features import DEFAULT_DIM, hash_text, hash_tokens


def two_cluster_classification(
    n_instances: int,
    seed: int,
    *,
    dim: int = DEFAULT_DIM,
    words_per_text: int = 8,
    vocabulary_size: int = 20,
    overlap: float = 0.0,
) -> Dataset:
    """Binary classification texts drawn from two label-specific vocabularies.

    With ``overlap`` = 0 the vocabularies are disjoint and the clusters fully
    separable; raising it mixes in words from a shared pool at that rate,
    which makes the task genuinely hard and detector rankings imperfect.
    """
    if n_instances < 2:
        raise ValueError("need at least 2 instances")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    rng = np.random.default_rng(seed)
    vocabularies = (
        [f"neg{v:02d}" for v in range(vocabulary_size)],
        [f"pos{v:02d}" for v in range(vocabulary_size)],
    )
    shared = [f"sh{v:02d}" for v in range(vocabulary_size)]
    labels = LabelSpace(("neg", "pos"))
    instances = []
    for i in range(n_instances):
        y = i % 2
        words = [
            str(rng.choice(shared)) if rng.random() < overlap else str(rng.choice(vocabularies[y]))
            for _ in range(words_per_text)
        ]
        text = " ".join(words)
        instances.append(
            Instance(
                id=f"c{i:05d}",
                observed_labels=(y,),
                features=(hash_text(text, dim),),
                text=text,
            )
        )
    return Dataset(
        task_kind=CLASSIFICATION,
        label_space=labels,
        instances=tuple(instances),
        seed=seed,
        feature_dim=dim,
    )


def token_tag_sequences(
    n_instances: int,
    seed: int,
    *,
    dim: int = DEFAULT_DIM,
    min_length: int = 5,
    max_length: int = 12,
    entity_rate: float = 0.3,
) -> Dataset:
    """Token tagging sequences where the token surface determines the tag."""
    if n_instances < 2:
        raise ValueError("need at least 2 instances")
    rng = np.random.default_rng(seed)
    labels = LabelSpace(("O", "ENT"))
    plain = [f"w{v:02d}" for v in range(30)]
    entities = [f"ent{v:02d}" for v in range(10)]
    instances = []
    for i in range(n_instances):
        length = int(rng.integers(min_length, max_length + 1))
        tokens = []
        tags = []
        for _ in range(length):
            if rng.random() < entity_rate:
                tokens.append(str(rng.choice(entities)))
                tags.append(1)
            else:
                tokens.append(str(rng.choice(plain)))
                tags.append(0)
        instances.append(
            Instance(
                id=f"s{i:05d}",
                observed_labels=tuple(tags),
                features=tuple(hash_tokens(tokens, dim)),
                tokens=tuple(tokens),
            )
        )
    return Dataset(
        task_kind=SEQUENCE,
        label_space=labels,
        instances=tuple(instances),
        seed=seed,
        feature_dim=dim,
    )
