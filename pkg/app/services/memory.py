"""Replay memories.

``QuestionMemory`` keeps only the question side of past triplets (tokens,
skill, answer space, referenced categories, source task). ``TripletBuffer``
keeps complete triplets and exists for the experience-replay baseline.
Both share equal per-task quota accounting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Generic, Iterable, List, Optional, Sequence, TypeVar

import numpy as np

from app.exceptions import MemoryUsageError
from app.models.schemas import MemoryEntry
from app.services.benchmark import Triplet, TripletBatch, stack_triplets
from app.utils.serialization import encode_jsonl, write_jsonl

logger = logging.getLogger(__name__)

T = TypeVar("T")


def equal_quotas(available: Sequence[int], capacity: int) -> List[int]:
    """Split ``capacity`` as evenly as possible over buckets holding ``available`` items.

    Buckets that cannot fill their share keep everything they have and the
    surplus is re-divided among the rest; remainders go to the earliest buckets.
    """
    quotas = [0] * len(available)
    remaining = capacity
    open_buckets = sorted(range(len(available)), key=lambda i: (available[i], i))
    while open_buckets:
        share = remaining // len(open_buckets)
        limited = [i for i in open_buckets if available[i] <= share]
        if not limited:
            extra = remaining - share * len(open_buckets)
            for rank, i in enumerate(sorted(open_buckets)):
                quotas[i] = share + (1 if rank < extra else 0)
            break
        for i in limited:
            quotas[i] = available[i]
            remaining -= available[i]
        open_buckets = [i for i in open_buckets if i not in limited]
    return quotas


class _QuotaStore(Generic[T]):
    """Per-task buckets whose sizes follow :func:`equal_quotas`."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError(f"Memory capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self._buckets: Dict[int, List[T]] = {}
        self.mutations = 0
        self.reads = 0

    def __len__(self) -> int:
        return sum(len(b) for b in self._buckets.values())

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    @property
    def entries(self) -> List[T]:
        return [item for bucket in self._buckets.values() for item in bucket]

    @property
    def task_distribution(self) -> Dict[int, int]:
        return {task: len(bucket) for task, bucket in self._buckets.items()}

    @property
    def tasks_seen(self) -> int:
        return len(self._buckets)

    def _insert(self, task_index: int, candidates: Sequence[T], rng: np.random.Generator) -> None:
        if task_index in self._buckets:
            raise MemoryUsageError(f"Task {task_index} was already inserted")
        tasks = [*self._buckets, task_index]
        available = [len(self._buckets[t]) for t in self._buckets] + [len(candidates)]
        quotas = equal_quotas(available, self.capacity)

        for task, quota in zip(tasks[:-1], quotas[:-1]):
            bucket = self._buckets[task]
            if quota < len(bucket):
                keep = np.sort(rng.choice(len(bucket), size=quota, replace=False))
                self._buckets[task] = [bucket[i] for i in keep]
        chosen = np.sort(rng.choice(len(candidates), size=quotas[-1], replace=False))
        self._buckets[task_index] = [candidates[i] for i in chosen]
        self.mutations += 1
        logger.info("Memory after task %d: %d/%d entries %s",
                    task_index, len(self), self.capacity, self.task_distribution)

    def _draw(self, pool: Sequence[T], n: int, rng: np.random.Generator) -> List[T]:
        """Uniform sample with replacement."""
        if n <= 0 or not pool:
            return []
        return [pool[i] for i in rng.integers(0, len(pool), size=n)]


# ──────────────── Question-only memory ────────────────

def memory_entry(triplet: Triplet, task_index: int) -> MemoryEntry:
    """Copy only the question-side fields of a triplet."""
    return MemoryEntry(
        question=tuple(int(t) for t in triplet.question),
        skill_id=triplet.skill_id,
        answer_space_id=triplet.answer_space_id,
        categories=tuple(triplet.categories),
        task_index=task_index,
    )


class QuestionMemory(_QuotaStore[MemoryEntry]):
    """Bounded store of past questions; never holds visual data."""

    def __init__(self, capacity: int = 200):
        super().__init__(capacity)
        self._warned_pools: set = set()

    def insert_task_questions(self, triplets: Iterable[Triplet], task_index: int,
                              rng: np.random.Generator) -> "QuestionMemory":
        self._insert(task_index, [memory_entry(t, task_index) for t in triplets], rng)
        self._warned_pools.clear()
        return self

    def select_random(self, batch_size: int, rng: np.random.Generator) -> List[MemoryEntry]:
        """Uniform sample with replacement; empty memory gives an empty list."""
        self.reads += 1
        return self._draw(self.entries, batch_size, rng)

    def select_object_matched(self, categories: Iterable[int], batch_size: int,
                              rng: np.random.Generator) -> List[MemoryEntry]:
        """Prefer entries whose referenced categories intersect ``categories``.

        An empty match pool falls through to :meth:`select_random` unchanged. A
        pool smaller than the batch is used whole, the rest drawn at random, and
        the combined selection is returned in shuffled order.
        """
        wanted = frozenset(int(c) for c in categories)
        pool = [e for e in self.entries if wanted.intersection(e.categories)]
        if not pool:
            if wanted not in self._warned_pools and not self.is_empty:
                logger.warning("No memory question references categories %s; selecting at random",
                               sorted(wanted))
                self._warned_pools.add(wanted)
            return self.select_random(batch_size, rng)
        self.reads += 1
        if len(pool) >= batch_size:
            return self._draw(pool, batch_size, rng)
        combined = pool + self._draw(self.entries, batch_size - len(pool), rng)
        return [combined[i] for i in rng.permutation(len(combined))]

    def records(self) -> List[dict]:
        return [entry.model_dump(mode="json") for entry in self.entries]

    def serialized_size(self) -> int:
        """Bytes of the JSON-lines snapshot."""
        return len(encode_jsonl(self.records()))

    def to_jsonl(self, path: str | Path) -> Path:
        return write_jsonl(path, self.records())


@dataclass
class ReplayBatch:
    """Current-task images paired with memory questions."""
    features: np.ndarray          # (B, n_regions, d_visual), from the current batch
    questions: np.ndarray         # (B, max_question_len), from memory
    answer_space_ids: np.ndarray  # diagnostics only
    source_tasks: np.ndarray

    def __len__(self) -> int:
        return len(self.questions)


def pair_with_images(selected: Sequence[MemoryEntry], features: np.ndarray) -> ReplayBatch:
    """Pair the i-th current image with the i-th selected question."""
    features = np.asarray(features)
    if len(selected) != len(features):
        raise MemoryUsageError(f"{len(selected)} questions for {len(features)} images")
    return ReplayBatch(
        features=features,
        questions=np.asarray([e.question for e in selected], dtype=np.int64),
        answer_space_ids=np.asarray([e.answer_space_id for e in selected], dtype=np.int64),
        source_tasks=np.asarray([e.task_index for e in selected], dtype=np.int64),
    )


# ──────────────── Full-triplet buffer (ER) ────────────────

class TripletBuffer(_QuotaStore[Triplet]):
    """Stores complete (features, question, answer) triplets."""

    def insert_task_triplets(self, triplets: Sequence[Triplet], task_index: int,
                             rng: np.random.Generator) -> "TripletBuffer":
        self._insert(task_index, list(triplets), rng)
        return self

    def sample(self, batch_size: int, rng: np.random.Generator) -> Optional[TripletBatch]:
        self.reads += 1
        drawn = self._draw(self.entries, batch_size, rng)
        return stack_triplets(drawn) if drawn else None

    def records(self) -> List[dict]:
        return [
            {
                "features": t.features.tolist(),
                "question": t.question.tolist(),
                "answer": t.answer,
                "skill_id": t.skill_id,
                "answer_space_id": t.answer_space_id,
            }
            for t in self.entries
        ]

    def serialized_size(self) -> int:
        return len(encode_jsonl(self.records()))

    def to_jsonl(self, path: str | Path) -> Path:
        return write_jsonl(path, self.records())
