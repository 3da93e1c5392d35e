"""K-shot sampling protocol and random hyperparameter search.

A sentence is eligible for entity type T when it has at least one span and
every span it contains has type T. The K-shot training set draws K such
sentences per type; with the pool-shuffle-and-take-prefix implementation the
K-shot sample is a prefix of the (K+1)-shot sample for the same seed, so
learning-curve points are nested.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import LabeledSentence
from .evaluation import bio_to_spans

DEFAULT_ENTITY_TYPES = ("PER", "LOC", "ORG", "MISC")

# lr grid from 1e-4 up to 9e-3 in 1e-4 steps (90 values)
LR_GRID = tuple(round(k * 1e-4, 10) for k in range(1, 91))
SEED_GRID = tuple(range(10, 20))
DROPOUT_GRID = (0.0, 0.1, 0.2, 0.3)
FEWSHOT_BATCH_SIZE = 4


@dataclass(frozen=True)
class FewShotSpec:
    k: int
    entity_types: tuple[str, ...] = DEFAULT_ENTITY_TYPES
    seed: int = 0
    lr_grid: tuple[float, ...] = LR_GRID
    seed_grid: tuple[int, ...] = SEED_GRID
    dropout_grid: tuple[float, ...] = DROPOUT_GRID
    n_trials: int = 20

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (self.lr_grid and self.seed_grid and self.dropout_grid):
            raise ValueError("hyperparameter grids must be non-empty")


@dataclass(frozen=True)
class TrialConfig:
    trial_id: int
    lr: float
    seed: int
    dropout: float
    batch_size: int = FEWSHOT_BATCH_SIZE


def sentence_span_types(sent: LabeledSentence) -> set[str]:
    return {s.label for s in bio_to_spans(sent.tags)}


def eligible_for(sent: LabeledSentence, entity_type: str) -> bool:
    types = sentence_span_types(sent)
    return types == {entity_type}


def _type_rng(spec: FewShotSpec, entity_type: str) -> random.Random:
    digest = hashlib.sha256(f"kshot:{spec.seed}:{entity_type}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def sample_kshot_indices(
    train: Sequence[LabeledSentence], spec: FewShotSpec
) -> list[int]:
    """Indices into train of exactly K single-type sentences per entity type.

    Per type, the eligible pool is shuffled with a seed derived from
    (spec.seed, type) and the first K are taken, so samples are nested in K.
    """
    out: list[int] = []
    for entity_type in spec.entity_types:
        pool = [i for i, s in enumerate(train) if eligible_for(s, entity_type)]
        if len(pool) < spec.k:
            raise ValueError(
                f"not enough single-type sentences for {entity_type}: "
                f"have {len(pool)}, need {spec.k}"
            )
        rng = _type_rng(spec, entity_type)
        for i in range(len(pool) - 1, 0, -1):
            j = rng.randrange(i + 1)
            pool[i], pool[j] = pool[j], pool[i]
        out.extend(pool[: spec.k])
    return out


def sample_kshot(
    train: Sequence[LabeledSentence], spec: FewShotSpec
) -> list[LabeledSentence]:
    """Exactly K single-type sentences per entity type, |entity_types|*K total."""
    return [train[i] for i in sample_kshot_indices(train, spec)]


def random_hp_trials(spec: FewShotSpec) -> list[TrialConfig]:
    """n_trials configs sampled uniformly with replacement from the grid
    cross-product; batch size is fixed at 4."""
    if spec.n_trials < 3:
        raise ValueError("need at least 3 trials")
    digest = hashlib.sha256(f"hptrials:{spec.seed}".encode()).digest()
    rng = random.Random(int.from_bytes(digest[:8], "little"))
    trials = []
    for t in range(spec.n_trials):
        trials.append(
            TrialConfig(
                trial_id=t,
                lr=rng.choice(spec.lr_grid),
                seed=rng.choice(spec.seed_grid),
                dropout=rng.choice(spec.dropout_grid),
            )
        )
    return trials


def top3_mean(trial_results: Sequence[dict]) -> float:
    """Mean test F1 of the three configs with highest dev F1.

    trial_results entries need dev_f1 and test_f1 keys; ties on dev_f1 go to
    the earlier trial.
    """
    if len(trial_results) < 3:
        raise ValueError(f"need at least 3 trials, got {len(trial_results)}")
    ranked = sorted(
        enumerate(trial_results), key=lambda it: (-it[1]["dev_f1"], it[0])
    )
    top = [r for _, r in ranked[:3]]
    return sum(r["test_f1"] for r in top) / 3.0
