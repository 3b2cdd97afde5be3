"""Sequential task loop shared by every method.

All methods see the same task stream, mini-batch order and model init; only
the per-step update rule differs. At each snapshot boundary (end of a
macro-task by default) the finished sub-tasks are written to replay
storage, a Fisher estimate is taken for EWC, and the teacher is re-cloned
for the QUAD family. After every macro-task the student is evaluated on all
macro-tasks seen so far, filling one column of the accuracy matrices.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from app.config import get_settings
from app.exceptions import AutodiffUsageError, ConfigError, EvaluationError
from app.models.schemas import (
    ArchitectureConfig,
    LossBreakdown,
    LossRecord,
    LossWeights,
    Matrix,
    Method,
    ModelConfig,
    RunMetrics,
    SelectionStrategy,
    SubTask,
    TrainConfig,
)
from app.services.autodiff import AdamState
from app.services.baselines import (
    FisherDiag,
    apply_gradients,
    er_current_size,
    er_step,
    estimate_fisher,
    ewc_step,
    joint_train,
    vanilla_step,
)
from app.services.benchmark import (
    SyntheticBenchmark,
    Triplet,
    TripletBatch,
    Vocabulary,
    iter_minibatches,
    stack_triplets,
)
from app.services.losses import (
    attention_loss,
    plasticity_from_logits,
    pseudo_label_from_logits,
    stability_components,
    teacher_forward,
    total_loss,
)
from app.services.memory import QuestionMemory, TripletBuffer, pair_with_images
from app.services.metrics import build_run_metrics, empty_matrix
from app.services.transformer import ModelParams, clone_frozen, forward_batch, init_params, predict
from app.utils.seeding import derive_rng

logger = logging.getLogger(__name__)


# ──────────────── Evaluation ────────────────

@dataclass
class EvalResult:
    accuracy: float
    out_of_answer_set: float
    n: int


def evaluate(params: ModelParams, triplets: Sequence[Triplet], vocab: Vocabulary,
             chunk_size: int = 256, threads: int = 1) -> EvalResult:
    """Exact-match accuracy and out-of-answer-set rate of argmax predictions.

    Chunks may run in parallel threads; counts are integer sums so the result
    does not depend on completion order.
    """
    if not triplets:
        raise EvaluationError("Cannot evaluate an empty split")
    batch = stack_triplets(triplets)
    bounds = [(s, min(s + chunk_size, len(batch))) for s in range(0, len(batch), chunk_size)]

    def score(bound) -> tuple:
        lo, hi = bound
        predicted = predict(batch.features[lo:hi], batch.questions[lo:hi], params)
        correct = int(np.sum(predicted == batch.answers[lo:hi]))
        outside = int(np.sum(vocab.space_of(predicted) != batch.answer_space_ids[lo:hi]))
        return correct, outside

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            counts = list(pool.map(score, bounds))
    else:
        counts = [score(b) for b in bounds]
    correct = sum(c for c, _ in counts)
    outside = sum(o for _, o in counts)
    return EvalResult(accuracy=correct / len(batch), out_of_answer_set=outside / len(batch), n=len(batch))


# ──────────────── Run state ────────────────

@dataclass
class RunCounters:
    steps: int = 0
    stability_evaluations: int = 0
    teacher_snapshots: int = 0
    fisher_estimates: int = 0


@dataclass
class RunState:
    """Everything that evolves while walking the schedule."""
    student: ModelParams
    adam: AdamState
    accuracy: Matrix
    out_of_answer_set: Matrix
    novel_accuracy: Matrix
    task_index: int = -1
    teacher: Optional[ModelParams] = None
    teacher_digest: Optional[str] = None
    memory: Optional[QuestionMemory] = None
    buffer: Optional[TripletBuffer] = None
    fishers: List[FisherDiag] = field(default_factory=list)
    pending: List[int] = field(default_factory=list)
    loss_log: List[LossRecord] = field(default_factory=list)
    counters: RunCounters = field(default_factory=RunCounters)


@dataclass
class RunResult:
    metrics: RunMetrics
    loss_log: List[LossRecord]
    params: ModelParams
    counters: RunCounters
    memory: Optional[QuestionMemory] = None
    buffer: Optional[TripletBuffer] = None


class ContinualTrainer:
    """Runs one method over a benchmark's schedule."""

    def __init__(self, benchmark: SyntheticBenchmark, config: TrainConfig,
                 architecture: Optional[ArchitectureConfig] = None, seed: int = 0):
        if config.method.is_quad and config.memory_capacity == 0:
            raise ConfigError(f"{config.method.value} needs a question memory; memory_capacity is 0")
        self.benchmark = benchmark
        self.schedule = benchmark.schedule
        self.config = config
        self.seed = seed
        self.model_config = ModelConfig.from_parts(
            architecture or ArchitectureConfig(),
            benchmark.config,
            benchmark.vocab.question_size,
            benchmark.vocab.answer_size,
        )
        self.components = stability_components(config.method)
        self.weights = LossWeights(stability_weight=config.stability_weight)

        settings = get_settings()
        self.threads = settings.QUADLAB_THREADS
        self.chunk_size = config.eval_chunk_size

        self.data_rng = derive_rng(config.data_seed, "data")
        self.replay_rng = derive_rng(config.replay_seed, "replay")
        self.fisher_rng = derive_rng(config.data_seed, "fisher")

    @property
    def task_names(self) -> List[str]:
        return [s.value for s in self.schedule.skills]

    def init_state(self) -> RunState:
        student = init_params(self.model_config, self.config.model_seed)
        n = self.schedule.n_macro
        method = self.config.method
        return RunState(
            student=student,
            adam=AdamState.for_params(student.tensors),
            accuracy=empty_matrix(n),
            out_of_answer_set=empty_matrix(n),
            novel_accuracy=empty_matrix(n),
            memory=QuestionMemory(self.config.memory_capacity) if method.is_quad else None,
            buffer=TripletBuffer(self.config.memory_capacity) if method is Method.ER else None,
        )

    # ── Per-step update rules ──

    def _quad_step(self, state: RunState, batch: TripletBatch, task: SubTask) -> LossBreakdown:
        logits, _ = forward_batch(batch.features, batch.questions, state.student)
        plasticity = plasticity_from_logits(logits, batch.answers)
        pseudo_label = attention = None

        if (state.teacher is not None and self.weights.stability_weight != 0.0
                and self.components.any and not state.memory.is_empty):
            state.counters.stability_evaluations += 1
            if self.config.selection is SelectionStrategy.OBJECT_MATCHED:
                group = self.schedule.groups[task.group_id]
                selected = state.memory.select_object_matched(group, len(batch), self.replay_rng)
            else:
                selected = state.memory.select_random(len(batch), self.replay_rng)
            pairs = pair_with_images(selected, batch.features)
            teacher_logits, teacher_capture = teacher_forward(state.teacher, pairs)
            student_logits, student_capture = forward_batch(pairs.features, pairs.questions, state.student)
            if self.components.pseudo_label:
                pseudo_label = pseudo_label_from_logits(student_logits, teacher_logits)
            if self.components.attention is not None:
                attention = attention_loss(self.components.attention, student_capture, teacher_capture)

        loss, breakdown = total_loss(self.weights, plasticity, pseudo_label, attention)
        apply_gradients(state.student, state.adam, loss, self.config.learning_rate)
        return breakdown

    def _step(self, state: RunState, batch: TripletBatch, task: SubTask) -> LossBreakdown:
        method, lr = self.config.method, self.config.learning_rate
        if method is Method.VANILLA:
            return vanilla_step(state.student, state.adam, batch, lr)
        if method is Method.ER:
            return er_step(state.student, state.adam, batch, state.buffer, self.replay_rng, lr)
        if method is Method.EWC:
            return ewc_step(state.student, state.adam, batch, state.fishers, self.config.ewc_lambda, lr)
        if method.is_quad:
            return self._quad_step(state, batch, task)
        raise ConfigError(f"Method {method.value} has no sequential update rule")

    def _batch_size(self, state: RunState) -> int:
        """ER splits each batch between current data and replay once the buffer holds entries."""
        if self.config.method is Method.ER and state.buffer is not None and not state.buffer.is_empty:
            return er_current_size(self.config.batch_size)
        return self.config.batch_size

    # ── Task loop ──

    def train_task(self, state: RunState, task_index: int) -> RunState:
        task = self.schedule.tasks[task_index]
        data = stack_triplets(self.benchmark.task_split(task_index).train)
        logger.info("Task %d/%d: %s (%d triplets)", task_index + 1, len(self.schedule.tasks),
                    task.name, len(data))

        digest_before = state.teacher.digest() if state.teacher is not None else None
        batch_size = self._batch_size(state)
        for _ in range(self.config.epochs):
            for batch in iter_minibatches(data, batch_size, self.data_rng):
                breakdown = self._step(state, batch, task)
                state.loss_log.append(
                    LossRecord(step=state.counters.steps, task=task_index, **breakdown.model_dump())
                )
                logger.debug("step=%d task=%d %s", state.counters.steps, task_index, breakdown)
                state.counters.steps += 1
        if digest_before is not None and state.teacher.digest() != digest_before:
            raise AutodiffUsageError(f"Teacher parameters changed while training task {task_index}")

        state.task_index = task_index
        state.pending.append(task_index)
        if self.config.snapshot_per_subtask or self.schedule.is_macro_end(task_index):
            self._consolidate(state)
        return state

    def _consolidate(self, state: RunState) -> None:
        """Snapshot boundary: replay storage, Fisher, teacher."""
        for t in state.pending:
            train = self.benchmark.task_split(t).train
            if state.memory is not None:
                state.memory.insert_task_questions(train, t, self.replay_rng)
            if state.buffer is not None:
                state.buffer.insert_task_triplets(train, t, self.replay_rng)

        if self.config.method is Method.EWC:
            pooled = [tr for t in state.pending for tr in self.benchmark.task_split(t).train]
            state.fishers.append(estimate_fisher(
                state.student, pooled, self.config.fisher_samples, self.fisher_rng, task_index=state.pending[-1],
            ))
            state.counters.fisher_estimates += 1

        if self.config.method.is_quad:
            state.teacher = clone_frozen(state.student)
            state.teacher_digest = state.teacher.digest()
            state.counters.teacher_snapshots += 1
            logger.debug("Teacher snapshot after task %d: %s", state.pending[-1], state.teacher_digest[:12])
        state.pending = []

    def evaluate_column(self, state: RunState, column: int, upto: Optional[int] = None) -> None:
        """Fill column ``column`` for macro-tasks 0..upto (default: column)."""
        upto = column if upto is None else upto
        vocab = self.benchmark.vocab
        for i in range(upto + 1):
            standard = evaluate(state.student, self.benchmark.macro_test(i), vocab,
                                self.chunk_size, self.threads)
            novel = evaluate(state.student, self.benchmark.macro_novel_test(i), vocab,
                             self.chunk_size, self.threads)
            state.accuracy[i][column] = standard.accuracy
            state.out_of_answer_set[i][column] = standard.out_of_answer_set
            state.novel_accuracy[i][column] = novel.accuracy
        logger.info("Column %d: accuracy %s", column,
                    ["%.3f" % state.accuracy[i][column] for i in range(upto + 1)])

    def _memory_bytes(self, state: RunState) -> Optional[int]:
        if state.memory is not None:
            return state.memory.serialized_size()
        if state.buffer is not None:
            return state.buffer.serialized_size()
        return None

    def run_sequence(self) -> RunResult:
        """Walk every training sub-task in order and return the filled metrics."""
        state = self.init_state()
        method = self.config.method
        logger.info("Run start: method=%s fold=%d tasks=%d", method.value,
                    self.schedule.fold, len(self.schedule.tasks))

        if method is Method.JOINT:
            pooled = [tr for t in range(len(self.schedule.tasks)) for tr in self.benchmark.task_split(t).train]
            state.loss_log = joint_train(state.student, pooled, self.config, self.data_rng, state.adam)
            state.counters.steps = len(state.loss_log)
            last = self.schedule.n_macro - 1
            self.evaluate_column(state, last, upto=last)
        else:
            for task_index, task in enumerate(self.schedule.tasks):
                self.train_task(state, task_index)
                if self.schedule.is_macro_end(task_index):
                    self.evaluate_column(state, task.macro_index)

        metrics = build_run_metrics(
            method,
            self.task_names,
            state.accuracy,
            state.out_of_answer_set,
            state.novel_accuracy,
            seed=self.seed,
            memory_bytes=self._memory_bytes(state),
        )
        logger.info("Run end: method=%s AP=%.4f Forget=%s OOAS=%.4f", method.value, metrics.ap,
                    "n/a" if metrics.forget is None else "%.4f" % metrics.forget, metrics.mean_ooas)
        return RunResult(
            metrics=metrics,
            loss_log=state.loss_log,
            params=state.student,
            counters=state.counters,
            memory=state.memory,
            buffer=state.buffer,
        )
