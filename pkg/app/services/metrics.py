"""Continual-learning metrics over the accuracy matrix.

``a[i][j]`` is the accuracy on macro-task ``i`` after finishing macro-task
``j``; only ``i <= j`` is ever filled. Values are fractions in [0, 1];
percentages appear only in rendered reports.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from app.exceptions import IncompleteMatrixError, MissingFoldsError
from app.models.schemas import Matrix, Method, NovelCompositionSummary, RunMetrics
from app.utils.serialization import write_csv

logger = logging.getLogger(__name__)


def empty_matrix(n: int) -> Matrix:
    return [[None] * n for _ in range(n)]


def _final_column(a: Matrix) -> List[float]:
    n = len(a)
    if n == 0:
        raise IncompleteMatrixError("Accuracy matrix is empty")
    column = [row[n - 1] for row in a]
    missing = [i for i, v in enumerate(column) if v is None]
    if missing:
        raise IncompleteMatrixError(f"Final column missing entries for tasks {missing}")
    return column


def average_performance(a: Matrix) -> float:
    """AP: mean of the final column."""
    return float(np.mean(_final_column(a)))


def average_forgetting(a: Matrix) -> float:
    """Forget: mean over non-final tasks of (best interim accuracy - final accuracy).

    The best interim value is taken over columns t..T-2; the per-task term is
    not clamped at zero.
    """
    n = len(a)
    if n < 2:
        raise IncompleteMatrixError(f"Forgetting needs at least 2 tasks, got {n}")
    final = _final_column(a)
    drops = []
    for t in range(n - 1):
        interim = a[t][t:n - 1]
        if any(v is None for v in interim):
            raise IncompleteMatrixError(f"Task {t} lacks interim accuracies")
        drops.append(max(interim) - final[t])
    return float(np.mean(drops))


def off_diagonal_mean(a: Matrix) -> Optional[float]:
    """Mean of the filled entries strictly above the diagonal."""
    values = [a[i][j] for i in range(len(a)) for j in range(i + 1, len(a)) if a[i][j] is not None]
    return float(np.mean(values)) if values else None


def diagonal_mean(a: Matrix) -> Optional[float]:
    values = [a[i][i] for i in range(len(a)) if a[i][i] is not None]
    return float(np.mean(values)) if values else None


def build_run_metrics(
    method: Method,
    task_names: Sequence[str],
    accuracy: Matrix,
    out_of_answer_set: Matrix,
    novel_accuracy: Matrix,
    seed: int = 0,
    memory_bytes: Optional[int] = None,
) -> RunMetrics:
    """Derive AP, Forget and answer-set rates; Forget is None when only the final column exists."""
    n = len(accuracy)
    complete = all(accuracy[i][j] is not None for j in range(n) for i in range(j + 1))
    ooas_rates = _final_column(out_of_answer_set)
    return RunMetrics(
        method=method,
        task_names=list(task_names),
        accuracy=accuracy,
        out_of_answer_set=out_of_answer_set,
        novel_accuracy=novel_accuracy,
        ap=average_performance(accuracy),
        forget=average_forgetting(accuracy) if complete and n >= 2 else None,
        ooas_rates=ooas_rates,
        mean_ooas=float(np.mean(ooas_rates)),
        mean_ooas_previous=float(np.mean(ooas_rates[:-1])) if n >= 2 else None,
        novel_ap=average_performance(novel_accuracy),
        novel_forget=average_forgetting(novel_accuracy) if complete and n >= 2 else None,
        seed=seed,
        memory_bytes=memory_bytes,
    )


def mean_summary(runs: Sequence[RunMetrics]) -> Dict[str, Optional[float]]:
    """Mean of each summary key over repeated runs (None if any run lacks it)."""
    keys = ("AP", "Forget", "OOAS", "novelAP")
    summaries = [r.summary() for r in runs]
    out: Dict[str, Optional[float]] = {}
    for key in keys:
        values = [s[key] for s in summaries]
        out[key] = None if any(v is None for v in values) else float(np.mean(values))
    return out


def aggregate_novel_composition(
    per_fold: Mapping[int, Mapping[str, float]],
    n_folds: int,
    seen: Optional[Mapping[int, Mapping[str, float]]] = None,
) -> NovelCompositionSummary:
    """Unweighted mean over folds of per-skill novel accuracy.

    ``per_fold`` maps fold -> skill -> novel accuracy; ``seen`` optionally
    holds the matching standard-test accuracies for the seen-vs-novel gap.

    Raises:
        MissingFoldsError: some of folds 0..n_folds-1 are absent.
    """
    missing = set(range(n_folds)) - set(per_fold)
    if missing:
        raise MissingFoldsError(missing)
    folds = list(range(n_folds))
    skills = list(per_fold[0])
    table = {skill: [float(per_fold[k][skill]) for k in folds] for skill in skills}
    per_skill = {skill: float(np.mean(values)) for skill, values in table.items()}

    gap: Dict[str, float] = {}
    if seen is not None:
        missing_seen = set(folds) - set(seen)
        if missing_seen:
            raise MissingFoldsError(missing_seen)
        for skill in skills:
            gap[skill] = float(np.mean([seen[k][skill] for k in folds])) - per_skill[skill]

    return NovelCompositionSummary(
        skills=skills,
        folds=folds,
        table=table,
        per_skill_mean=per_skill,
        overall=float(np.mean(list(per_skill.values()))),
        seen_gap=gap,
    )


# ──────────────── CSV ────────────────

def matrix_rows(a: Matrix, task_names: Sequence[str]) -> List[List[object]]:
    return [[task_names[i], *row] for i, row in enumerate(a)]


def write_matrix_csv(path: str | Path, a: Matrix, task_names: Sequence[str]) -> Path:
    """Header = task names; one row per evaluated task; unfilled cells empty."""
    path = write_csv(path, ["task", *task_names], matrix_rows(a, task_names))
    logger.info("Wrote matrix %s", path)
    return path
