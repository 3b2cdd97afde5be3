"""Command implementations: benchmark generation, runs, sweeps, ablations.

Every command expands into independent cells (one method/fold/seed/override
combination each). Cells run serially, in a process pool capped by
``QUADLAB_THREADS``, or as Celery tasks when ``SWEEP_EXECUTOR=celery``.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from app.config import get_settings
from app.exceptions import BenchmarkNotFoundError, ConfigError
from app.models.schemas import (
    BenchmarkManifest,
    ExperimentCell,
    ExperimentConfig,
    Matrix,
    Method,
    RunManifest,
    RunMetrics,
    SelectionStrategy,
)
from app.services.benchmark import SyntheticBenchmark
from app.services.metrics import (
    aggregate_novel_composition,
    diagonal_mean,
    mean_summary,
    off_diagonal_mean,
    write_matrix_csv,
)
from app.services.trainer import ContinualTrainer, RunResult
from app.services.transformer import save_model
from app.utils.serialization import sha256_file, write_csv, write_json

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = (
    Method.QUAD_PL_ONLY,
    Method.QUAD_ATT_ONLY,
    Method.QUAD,
    Method.QUAD_L1,
    Method.QUAD_ASYM,
)
MATRIX_METHODS = (Method.VANILLA, Method.QUAD_PL_ONLY, Method.QUAD)
SUMMARY_KEYS = ("AP", "Forget", "OOAS", "novelAP")


# ──────────────── Configuration ────────────────

def load_config(path: Optional[str | Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Read a JSON config and apply flag overrides (flags win).

    ``overrides`` uses dotted keys for nested fields, e.g. ``train.selection``.
    """
    settings = get_settings()
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Config {path} is not valid JSON: {exc}") from exc
    data.setdefault("output_dir", settings.OUTPUT_DIR)
    data.setdefault("benchmark_dir", settings.BENCHMARK_DIR)
    data.setdefault("train", {}).setdefault("eval_chunk_size", settings.EVAL_CHUNK_SIZE)

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid experiment config: {exc}") from exc


def benchmark_path(config: ExperimentConfig, fold: Optional[int] = None) -> Path:
    return Path(config.benchmark_dir) / f"fold{config.fold if fold is None else fold}"


def load_benchmark(config: ExperimentConfig, fold: Optional[int] = None) -> SyntheticBenchmark:
    return SyntheticBenchmark.load(benchmark_path(config, fold), expected=config.benchmark)


def _ensure_fold(config: ExperimentConfig, fold: int) -> None:
    if not 0 <= fold < config.benchmark.n_groups:
        raise ConfigError(f"fold must be in 0..{config.benchmark.n_groups - 1}, got {fold}")


# ──────────────── Commands: generate ────────────────

def cmd_generate(config: ExperimentConfig, fold: Optional[int] = None) -> BenchmarkManifest:
    """Generate and export every split of one fold."""
    fold = config.fold if fold is None else fold
    _ensure_fold(config, fold)
    bench = SyntheticBenchmark(config.benchmark, fold)
    bench.generate_all()
    return bench.export(benchmark_path(config, fold))


# ──────────────── Cells ────────────────

def run_cell(config: ExperimentConfig, cell: ExperimentCell) -> RunMetrics:
    """Train and evaluate one cell, writing its artifacts when ``cell.out_dir`` is set."""
    seeds = config.seeds_for(cell.repeat)
    train = config.train.model_copy(update={"method": cell.method, **seeds, **cell.train_overrides()})
    benchmark = load_benchmark(config, cell.fold)
    trainer = ContinualTrainer(benchmark, train, config.architecture, seed=seeds["model_seed"])
    result = trainer.run_sequence()

    if cell.out_dir:
        manifest = RunManifest(
            method=cell.method,
            config=config.model_copy(update={"train": train, "fold": cell.fold}),
            seeds=seeds,
            benchmark_manifest_sha256=sha256_file(benchmark_path(config, cell.fold) / SyntheticBenchmark.MANIFEST),
        )
        write_run_artifacts(Path(cell.out_dir), result, manifest)
    return result.metrics


def _run_cell_payload(config_json: Dict[str, Any], cell_json: Dict[str, Any]) -> Dict[str, Any]:
    config = ExperimentConfig.model_validate(config_json)
    cell = ExperimentCell.model_validate(cell_json)
    return run_cell(config, cell).model_dump(mode="json")


def execute_cells(config: ExperimentConfig, cells: Sequence[ExperimentCell]) -> List[RunMetrics]:
    """Run cells with the configured executor; results keep the order of ``cells``."""
    settings = get_settings()
    config_json = config.model_dump(mode="json")
    payloads = [c.model_dump(mode="json") for c in cells]

    if settings.use_celery:
        from app.tasks.experiment_tasks import run_cell_task

        logger.info("Dispatching %d cells to Celery", len(cells))
        handles = [run_cell_task.delay(config_json, p) for p in payloads]
        results = [h.get() for h in handles]
    elif settings.QUADLAB_THREADS > 1 and len(cells) > 1:
        workers = min(settings.QUADLAB_THREADS, len(cells))
        logger.info("Running %d cells in %d processes", len(cells), workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_payload, [config_json] * len(cells), payloads))
    else:
        results = [_run_cell_payload(config_json, p) for p in payloads]
    return [RunMetrics.model_validate(r) for r in results]


# ──────────────── Artifacts ────────────────

def write_run_artifacts(directory: Path, result: RunResult, manifest: RunManifest) -> None:
    """metrics.json, matrix CSVs, loss CSV, manifest, checkpoint and memory snapshot."""
    metrics = result.metrics
    names = metrics.task_names
    directory.mkdir(parents=True, exist_ok=True)

    write_json(directory / "metrics.json", {**metrics.summary(), "metrics": metrics.model_dump(mode="json")})
    write_matrix_csv(directory / "accuracy.csv", metrics.accuracy, names)
    write_matrix_csv(directory / "out_of_answer_set.csv", metrics.out_of_answer_set, names)
    write_matrix_csv(directory / "novel_accuracy.csv", metrics.novel_accuracy, names)
    write_csv(
        directory / "loss.csv",
        ["step", "task", "plasticity", "pseudo_label", "attention", "total"],
        ([r.step, r.task, r.plasticity, r.pseudo_label, r.attention, r.total] for r in result.loss_log),
    )
    write_json(directory / "manifest.json", manifest.model_dump(mode="json"))
    save_model(result.params, directory / "model.bin")
    if result.memory is not None:
        result.memory.to_jsonl(directory / "memory.jsonl")
    logger.info("Artifacts for %s written to %s", metrics.method.value, directory)


def _group_means(cells: Sequence[ExperimentCell], results: Sequence[RunMetrics], key) -> Dict[Any, Dict[str, Optional[float]]]:
    grouped: Dict[Any, List[RunMetrics]] = defaultdict(list)
    for cell, metrics in zip(cells, results):
        grouped[key(cell)].append(metrics)
    return {k: mean_summary(v) for k, v in grouped.items()}


def _fmt(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(value, 6)


# ──────────────── Commands: run ────────────────

def cmd_run(config: ExperimentConfig) -> Dict[str, Dict[str, Optional[float]]]:
    """One directory per method, one sub-directory per seed; EWC reports its best weight."""
    load_benchmark(config)
    out = Path(config.output_dir)
    cells: List[ExperimentCell] = []
    for method in config.methods:
        lambdas = config.ewc_lambdas if method is Method.EWC else [None]
        for lam in lambdas:
            for repeat in range(config.repeats):
                sub = out / method.value
                if lam is not None:
                    sub = sub / f"lambda{lam:g}"
                cells.append(ExperimentCell(
                    method=method, fold=config.fold, repeat=repeat, ewc_lambda=lam,
                    out_dir=str(sub / f"seed{config.seed + repeat}"),
                ))
    results = execute_cells(config, cells)
    by_key = _group_means(cells, results, key=lambda c: (c.method, c.ewc_lambda))

    summary: Dict[str, Dict[str, Optional[float]]] = {}
    for method in config.methods:
        if method is Method.EWC:
            sweep = {lam: by_key[(method, lam)] for lam in config.ewc_lambdas}
            best = max(sweep, key=lambda lam: sweep[lam]["AP"])
            write_csv(out / "ewc" / "lambda_sweep.csv", ["ewc_lambda", *SUMMARY_KEYS],
                      ([lam, *(_fmt(s[k]) for k in SUMMARY_KEYS)] for lam, s in sweep.items()))
            chosen = {**sweep[best], "ewc_lambda": best}
        else:
            chosen = by_key[(method, None)]
        write_json(out / method.value / "metrics.json", {**chosen, "repeats": config.repeats})
        summary[method.value] = chosen

    write_csv(out / "summary.csv", ["method", *SUMMARY_KEYS],
              ([m, *(_fmt(s[k]) for k in SUMMARY_KEYS)] for m, s in summary.items()))
    return summary


# ──────────────── Commands: sweeps ────────────────

def _sweep_methods(config: ExperimentConfig) -> List[Method]:
    methods = [m for m in config.methods if m.is_quad or m is Method.ER]
    return methods or [Method.QUAD]


def cmd_sweep_memory(config: ExperimentConfig) -> List[List[Any]]:
    """Rows (method, memory, AP, Forget), sorted by (method, memory)."""
    if not config.memory_sizes:
        raise ConfigError("memory_sizes must be nonempty for the memory sweep")
    load_benchmark(config)
    cells = [
        ExperimentCell(method=m, fold=config.fold, repeat=r, memory_capacity=size)
        for m in _sweep_methods(config)
        for size in config.memory_sizes
        for r in range(config.repeats)
    ]
    means = _group_means(cells, execute_cells(config, cells), key=lambda c: (c.method.value, c.memory_capacity))
    rows = [[m, size, _fmt(s["AP"]), _fmt(s["Forget"])] for (m, size), s in sorted(means.items())]
    write_csv(Path(config.output_dir) / "sweep_memory.csv", ["method", "memory", "AP", "Forget"], rows)
    return rows


def cmd_sweep_selection(config: ExperimentConfig) -> List[List[Any]]:
    """Rows (selection, memory, AP, Forget) for quad over every strategy x memory size."""
    if not config.memory_sizes or not config.selection_strategies:
        raise ConfigError("memory_sizes and selection_strategies must be nonempty for the selection sweep")
    load_benchmark(config)
    cells = [
        ExperimentCell(method=Method.QUAD, fold=config.fold, repeat=r, memory_capacity=size, selection=strategy)
        for strategy in config.selection_strategies
        for size in config.memory_sizes
        for r in range(config.repeats)
    ]
    means = _group_means(cells, execute_cells(config, cells), key=lambda c: (c.selection.value, c.memory_capacity))
    rows = [[sel, size, _fmt(s["AP"]), _fmt(s["Forget"])] for (sel, size), s in sorted(means.items())]
    write_csv(Path(config.output_dir) / "sweep_selection.csv", ["selection", "memory", "AP", "Forget"], rows)
    return rows


def cmd_ablate(config: ExperimentConfig) -> List[List[Any]]:
    """Rows (variant, AP, Forget, reference) over the stability-loss variants, shared seeds."""
    load_benchmark(config)
    cells = [
        ExperimentCell(method=v, fold=config.fold, repeat=r)
        for v in ABLATION_VARIANTS
        for r in range(config.repeats)
    ]
    means = _group_means(cells, execute_cells(config, cells), key=lambda c: c.method)
    rows = [[v.value, _fmt(means[v]["AP"]), _fmt(means[v]["Forget"]), v is Method.QUAD] for v in ABLATION_VARIANTS]
    out = Path(config.output_dir)
    write_csv(out / "ablation.csv", ["variant", "AP", "Forget", "reference"], rows)
    write_json(out / "ablation_manifest.json", {
        "variants": [v.value for v in ABLATION_VARIANTS],
        "seeds": [config.seeds_for(r) for r in range(config.repeats)],
        "config": config.model_dump(mode="json"),
    })
    return rows


def mean_matrix(matrices: Sequence[Matrix]) -> Matrix:
    n = len(matrices[0])
    return [
        [None if matrices[0][i][j] is None else float(np.mean([m[i][j] for m in matrices])) for j in range(n)]
        for i in range(n)
    ]


def cmd_matrix(config: ExperimentConfig) -> Dict[str, Matrix]:
    """Seed-averaged L x L accuracy matrices of vanilla, quad_pl_only and quad."""
    load_benchmark(config)
    cells = [ExperimentCell(method=m, fold=config.fold, repeat=r)
             for m in MATRIX_METHODS for r in range(config.repeats)]
    results = execute_cells(config, cells)
    out = Path(config.output_dir)

    matrices: Dict[str, Matrix] = {}
    rows = []
    for method in MATRIX_METHODS:
        runs = [m for c, m in zip(cells, results) if c.method is method]
        matrix = mean_matrix([r.accuracy for r in runs])
        matrices[method.value] = matrix
        write_matrix_csv(out / f"matrix_{method.value}.csv", matrix, runs[0].task_names)
        rows.append([method.value, _fmt(diagonal_mean(matrix)), _fmt(off_diagonal_mean(matrix))])
    write_csv(out / "matrix_summary.csv", ["method", "diagonal_mean", "off_diagonal_mean"], rows)
    return matrices


def cmd_kfold(config: ExperimentConfig) -> Dict[str, Dict[str, Any]]:
    """Novel-composition accuracy per skill across all folds, for every configured method."""
    n_folds = config.benchmark.n_groups
    for fold in range(n_folds):
        try:
            load_benchmark(config, fold)
        except BenchmarkNotFoundError:
            logger.info("Generating missing benchmark for fold %d", fold)
            cmd_generate(config, fold)

    cells = [ExperimentCell(method=m, fold=k, repeat=r)
             for m in config.methods for k in range(n_folds) for r in range(config.repeats)]
    results = execute_cells(config, cells)
    out = Path(config.output_dir)

    report: Dict[str, Dict[str, Any]] = {}
    for method in config.methods:
        novel: Dict[int, Dict[str, float]] = {}
        seen: Dict[int, Dict[str, float]] = {}
        for fold in range(n_folds):
            runs = [m for c, m in zip(cells, results) if c.method is method and c.fold == fold]
            last = len(runs[0].task_names) - 1
            novel[fold] = {
                skill: float(np.mean([r.novel_accuracy[i][last] for r in runs]))
                for i, skill in enumerate(runs[0].task_names)
            }
            seen[fold] = {
                skill: float(np.mean([r.accuracy[i][last] for r in runs]))
                for i, skill in enumerate(runs[0].task_names)
            }
        summary = aggregate_novel_composition(novel, n_folds, seen=seen)
        write_json(out / f"kfold_{method.value}.json", summary.model_dump(mode="json"))
        write_csv(
            out / f"kfold_{method.value}.csv",
            ["skill", *(f"fold{k}" for k in summary.folds), "mean", "seen_gap"],
            ([s, *(_fmt(v) for v in summary.table[s]), _fmt(summary.per_skill_mean[s]),
              _fmt(summary.seen_gap.get(s))] for s in summary.skills),
        )
        report[method.value] = summary.model_dump(mode="json")
    return report


COMMANDS = {
    "run": cmd_run,
    "sweep-memory": cmd_sweep_memory,
    "sweep-selection": cmd_sweep_selection,
    "ablate": cmd_ablate,
    "matrix": cmd_matrix,
    "kfold": cmd_kfold,
}


def selection_choices() -> Iterable[str]:
    return [s.value for s in SelectionStrategy]
