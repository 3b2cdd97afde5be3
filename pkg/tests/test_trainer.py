"""Tests for the continual task loop and evaluation."""

from __future__ import annotations

import numpy as np
import pytest

from app.exceptions import ConfigError, EvaluationError
from app.models.schemas import ArchitectureConfig, Method, SelectionStrategy, SplitSizes, TrainConfig
from app.services.benchmark import SyntheticBenchmark
from app.services.trainer import ContinualTrainer, evaluate
from app.services.transformer import init_params
from tests.conftest import tiny_architecture, tiny_benchmark_config


# ── Helpers ──

@pytest.fixture(scope="module")
def bench() -> SyntheticBenchmark:
    return SyntheticBenchmark(tiny_benchmark_config(), fold=0)


def _config(method: Method, **overrides) -> TrainConfig:
    values = dict(method=method, epochs=1, batch_size=4, memory_capacity=10,
                  learning_rate=1e-3, fisher_samples=4, model_seed=0, data_seed=1, replay_seed=2)
    values.update(overrides)
    return TrainConfig(**values)


def _trainer(bench, method: Method, **overrides) -> ContinualTrainer:
    return ContinualTrainer(bench, _config(method, **overrides), tiny_architecture())


def _filled(matrix):
    return [[v is not None for v in row] for row in matrix]


# ── Evaluation ──

class TestEvaluate:
    def test_constant_color_prediction_is_out_of_answer_set(self, bench):
        trainer = _trainer(bench, Method.VANILLA)
        params = init_params(trainer.model_config, seed=0)
        params["head.bias"].data[bench.vocab.answer_id("red")] = 100.0

        count_result = evaluate(params, bench.macro_test(0), bench.vocab)
        assert count_result.out_of_answer_set == 1.0
        assert count_result.accuracy == 0.0

        color_result = evaluate(params, bench.macro_test(1), bench.vocab)
        assert color_result.out_of_answer_set == 0.0

    def test_side_effect_free_and_chunking_invariant(self, bench):
        params = init_params(_trainer(bench, Method.VANILLA).model_config, seed=3)
        digest = params.digest()
        triplets = bench.macro_test(2)
        serial = evaluate(params, triplets, bench.vocab, chunk_size=256, threads=1)
        threaded = evaluate(params, triplets, bench.vocab, chunk_size=3, threads=2)
        assert serial == threaded
        assert params.digest() == digest
        assert all(not np.any(params[name].grad) for name in params)

    def test_empty_split(self, bench):
        params = init_params(_trainer(bench, Method.VANILLA).model_config, seed=0)
        with pytest.raises(EvaluationError):
            evaluate(params, [], bench.vocab)


# ── QUAD task loop ──

class TestQuadLoop:
    def test_requires_memory(self, bench):
        with pytest.raises(ConfigError):
            _trainer(bench, Method.QUAD, memory_capacity=0)

    def test_no_stability_terms_before_first_snapshot(self, bench):
        trainer = _trainer(bench, Method.QUAD)
        state = trainer.init_state()
        for task_index in range(4):
            trainer.train_task(state, task_index)
            if task_index < 3:
                assert state.teacher is None
        assert state.counters.stability_evaluations == 0
        assert state.counters.teacher_snapshots == 1
        assert len(state.memory) == 10
        assert sorted(state.memory.task_distribution) == [0, 1, 2, 3]

    def test_teacher_stays_fixed_within_a_task(self, bench):
        trainer = _trainer(bench, Method.QUAD)
        state = trainer.init_state()
        for task_index in range(5):
            trainer.train_task(state, task_index)
        assert state.counters.stability_evaluations == 2
        assert state.teacher.digest() == state.teacher_digest
        assert state.student.digest() != state.teacher_digest

    def test_snapshot_per_subtask(self, bench):
        trainer = _trainer(bench, Method.QUAD, snapshot_per_subtask=True)
        state = trainer.init_state()
        for task_index in range(2):
            trainer.train_task(state, task_index)
        assert state.counters.teacher_snapshots == 2
        assert state.counters.stability_evaluations == 2

    def test_zero_weight_matches_vanilla_bitwise(self, bench):
        vanilla = _trainer(bench, Method.VANILLA).run_sequence()
        quad = _trainer(bench, Method.QUAD, stability_weight=0.0).run_sequence()
        assert quad.params.digest() == vanilla.params.digest()
        assert quad.metrics.accuracy == vanilla.metrics.accuracy
        assert quad.counters.stability_evaluations == 0

    @pytest.mark.parametrize("selection", list(SelectionStrategy))
    def test_full_run_fills_lower_triangle(self, bench, selection):
        result = _trainer(bench, Method.QUAD, selection=selection).run_sequence()
        n = len(bench.schedule.skills)
        assert _filled(result.metrics.accuracy) == [[j >= i for j in range(n)] for i in range(n)]
        assert result.metrics.forget is not None
        assert result.metrics.memory_bytes == result.memory.serialized_size()
        assert len(result.loss_log) == result.counters.steps == 20 * 2


# ── Baselines through the loop ──

class TestBaselineRuns:
    def test_joint_fills_final_column_only(self, bench):
        result = _trainer(bench, Method.JOINT).run_sequence()
        n = len(bench.schedule.skills)
        assert _filled(result.metrics.accuracy) == [[j == n - 1 for j in range(n)] for _ in range(n)]
        assert result.metrics.forget is None
        assert {r.task for r in result.loss_log} == {-1}

    def test_ewc_estimates_one_fisher_per_macro_task(self, bench):
        result = _trainer(bench, Method.EWC).run_sequence()
        assert result.counters.fisher_estimates == len(bench.schedule.skills)

    def test_er_keeps_full_triplets(self, bench):
        result = _trainer(bench, Method.ER).run_sequence()
        assert len(result.buffer) == 10
        assert result.memory is None
        assert result.metrics.memory_bytes == result.buffer.serialized_size()

    def test_er_halves_current_batches_once_replay_starts(self, bench):
        result = _trainer(bench, Method.ER).run_sequence()
        # first macro-task: 4 sub-tasks x ceil(8/4); afterwards 16 x ceil(8/2)
        assert result.counters.steps == 4 * 2 + 16 * 4
        assert result.buffer.reads == 16 * 4

    def test_er_without_capacity_is_vanilla(self, bench):
        vanilla = _trainer(bench, Method.VANILLA).run_sequence()
        er = _trainer(bench, Method.ER, memory_capacity=0).run_sequence()
        assert er.params.digest() == vanilla.params.digest()
        assert er.counters.steps == vanilla.counters.steps

    def test_runs_are_reproducible(self, bench):
        first = _trainer(bench, Method.VANILLA).run_sequence()
        second = _trainer(bench, Method.VANILLA).run_sequence()
        assert first.params.digest() == second.params.digest()
        different = _trainer(bench, Method.VANILLA, data_seed=5).run_sequence()
        assert different.params.digest() != first.params.digest()


# ── Joint calibration ──

class TestJointCalibration:
    """Joint training on a reduced benchmark must clear 90% on every skill."""

    def test_joint_learns_every_skill(self):
        config = tiny_benchmark_config(
            n_categories=4, n_groups=2, grid_size=2, d_visual=16, min_objects=2, max_objects=3,
            sizes=SplitSizes(train=400, val=10, test=100, novel_test=10),
        )
        reduced = SyntheticBenchmark(config, fold=0)
        train = TrainConfig(method=Method.JOINT, epochs=50, batch_size=32, learning_rate=1e-3,
                            model_seed=0, data_seed=1, replay_seed=2)
        result = ContinualTrainer(reduced, train, ArchitectureConfig()).run_sequence()
        finals = {name: row[-1] for name, row in zip(result.metrics.task_names, result.metrics.accuracy)}
        assert min(finals.values()) >= 0.9, finals
