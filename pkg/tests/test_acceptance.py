"""Directional experiments on the desk-scale benchmark.

Slow: enable with ``QUADLAB_ACCEPTANCE=1``. Every comparison is a mean over
the configured repeats (3 consecutive seeds) with shared seeds per method.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pytest

from app.models.schemas import ExperimentCell, Method, SelectionStrategy
from app.services import experiments
from app.services.memory import QuestionMemory, TripletBuffer
from app.services.benchmark import SyntheticBenchmark
from app.services.trainer import ContinualTrainer
from tests.conftest import tiny_benchmark_config

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.environ.get("QUADLAB_ACCEPTANCE") != "1", reason="set QUADLAB_ACCEPTANCE=1"),
]

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.json"


# ── Helpers ──

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    config = experiments.load_config(DESK_CONFIG, {
        "benchmark_dir": str(root / "bench"),
        "output_dir": str(root / "out"),
    })
    experiments.cmd_generate(config)
    return config


_cache: Dict[tuple, Dict[str, Optional[float]]] = {}


def _mean(config, method: Method, **overrides) -> Dict[str, Optional[float]]:
    key = (method, tuple(sorted(overrides.items())))
    if key not in _cache:
        cells = [ExperimentCell(method=method, fold=config.fold, repeat=r, **overrides)
                 for r in range(config.repeats)]
        runs = experiments.execute_cells(config, cells)
        summary = experiments.mean_summary(runs)
        summary["mean_ooas_previous"] = float(np.mean([r.mean_ooas_previous for r in runs]))
        _cache[key] = summary
    return _cache[key]


# ── Calibration ──

class TestCalibration:
    def test_joint_training_learns_the_benchmark(self, desk):
        assert _mean(desk, Method.JOINT)["AP"] >= 0.9

    def test_joint_training_learns_every_skill(self, desk):
        cells = [ExperimentCell(method=Method.JOINT, fold=desk.fold, repeat=r) for r in range(desk.repeats)]
        runs = experiments.execute_cells(desk, cells)
        finals = np.mean([[row[-1] for row in run.accuracy] for run in runs], axis=0)
        assert finals.min() >= 0.9, dict(zip(runs[0].task_names, finals.round(3)))


# ── Baselines ──

class TestBaselineOrdering:
    def test_vanilla_answers_outside_old_answer_spaces(self, desk):
        assert _mean(desk, Method.VANILLA)["mean_ooas_previous"] >= 0.5

    def test_method_ordering(self, desk):
        joint, quad = _mean(desk, Method.JOINT)["AP"], _mean(desk, Method.QUAD)["AP"]
        vanilla = _mean(desk, Method.VANILLA)["AP"]
        er = _mean(desk, Method.ER)["AP"]
        ewc = _mean(desk, Method.EWC, ewc_lambda=100.0)["AP"]
        print(f"AP joint={joint:.4f} quad={quad:.4f} er={er:.4f} ewc={ewc:.4f} vanilla={vanilla:.4f}")
        assert joint > quad > vanilla


# ── Ablations ──

class TestAblations:
    def test_component_ordering(self, desk):
        full = _mean(desk, Method.QUAD)
        pl_only = _mean(desk, Method.QUAD_PL_ONLY)
        att_only = _mean(desk, Method.QUAD_ATT_ONLY)
        assert full["AP"] - pl_only["AP"] > 0.02
        assert pl_only["AP"] - att_only["AP"] > 0.02
        assert full["Forget"] < pl_only["Forget"]

    def test_attention_loss_variants(self, desk):
        ce = _mean(desk, Method.QUAD)["AP"]
        assert ce >= _mean(desk, Method.QUAD_L1)["AP"]
        assert ce >= _mean(desk, Method.QUAD_ASYM)["AP"]

    def test_object_matched_selection(self, desk):
        for size in desk.memory_sizes:
            matched = _mean(desk, Method.QUAD, memory_capacity=size, selection=SelectionStrategy.OBJECT_MATCHED)
            random = _mean(desk, Method.QUAD, memory_capacity=size, selection=SelectionStrategy.RANDOM)
            assert matched["AP"] >= random["AP"], size

    def test_memory_sensitivity(self, desk):
        aps = [_mean(desk, Method.QUAD, memory_capacity=size)["AP"] for size in sorted(desk.memory_sizes)]
        for smaller, larger in zip(aps, aps[1:]):
            assert larger >= smaller - 0.01


# ── Equivalences ──

class TestEquivalences:
    def test_zero_weight_is_vanilla(self, desk):
        benchmark = experiments.load_benchmark(desk)
        digests = []
        for method, weight in ((Method.VANILLA, 0.5), (Method.QUAD, 0.0)):
            train = desk.train.model_copy(update={"method": method, "stability_weight": weight,
                                                  **desk.seeds_for(0)})
            digests.append(ContinualTrainer(benchmark, train, desk.architecture).run_sequence().params.digest())
        assert digests[0] == digests[1]

    def test_memory_size_ignores_visual_width(self):
        question_sizes, buffer_sizes = [], []
        for d_visual in (8, 32, 128):
            bench = SyntheticBenchmark(tiny_benchmark_config(d_visual=d_visual), fold=0)
            memory, buffer = QuestionMemory(20), TripletBuffer(20)
            for t in range(4):
                train = bench.task_split(t).train
                memory.insert_task_questions(train, t, np.random.default_rng(t))
                buffer.insert_task_triplets(train, t, np.random.default_rng(t))
            question_sizes.append(memory.serialized_size())
            buffer_sizes.append(buffer.serialized_size())
        assert len(set(question_sizes)) == 1
        assert buffer_sizes == sorted(buffer_sizes) and len(set(buffer_sizes)) == 3
