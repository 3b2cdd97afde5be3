"""Reference continual-learning update rules.

* vanilla: plain sequential fine-tuning
* er: experience replay over stored full triplets
* ewc: elastic weight consolidation with a per-task diagonal Fisher
* joint: training on the union of all tasks (upper bound)

Every rule performs exactly one Adam step per mini-batch on the shared
model so that methods differ only in their loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.models.schemas import LossBreakdown, LossRecord, TrainConfig
from app.services import autodiff as ad
from app.services.autodiff import AdamState, Tensor
from app.services.benchmark import Triplet, TripletBatch, iter_minibatches, stack_triplets
from app.services.losses import one_hot, plasticity_from_logits, teacher_targets
from app.services.memory import TripletBuffer
from app.services.transformer import ModelParams, forward, forward_batch

logger = logging.getLogger(__name__)


def apply_gradients(params: ModelParams, adam: AdamState, loss: Tensor, lr: float) -> None:
    """Fresh gradients of ``loss`` followed by one Adam update."""
    ad.zero_grad(params.tensors)
    ad.backward(loss)
    ad.adam_step(params.tensors, adam, lr)


# ──────────────── Vanilla ────────────────

def vanilla_step(params: ModelParams, adam: AdamState, batch: TripletBatch, lr: float) -> LossBreakdown:
    """One Adam step on the plasticity loss only."""
    logits, _ = forward_batch(batch.features, batch.questions, params)
    loss = plasticity_from_logits(logits, batch.answers)
    apply_gradients(params, adam, loss, lr)
    return LossBreakdown(plasticity=loss.item(), total=loss.item())


# ──────────────── Experience replay ────────────────

def er_current_size(batch_size: int) -> int:
    """Current-task share of an ER batch once replay is available."""
    return max(1, batch_size // 2)


def er_step(params: ModelParams, adam: AdamState, batch: TripletBatch, buffer: TripletBuffer,
            rng: np.random.Generator, lr: float) -> LossBreakdown:
    """Mean plasticity over the current half and an equal-sized replayed half.

    The caller passes the current half (see :func:`er_current_size`). An empty
    buffer gives exactly :func:`vanilla_step`.
    """
    replay = buffer.sample(len(batch), rng) if not buffer.is_empty else None
    if replay is None:
        return vanilla_step(params, adam, batch, lr)

    current_logits, _ = forward_batch(batch.features, batch.questions, params)
    current = plasticity_from_logits(current_logits, batch.answers)
    replay_logits, _ = forward_batch(replay.features, replay.questions, params)
    replayed = plasticity_from_logits(replay_logits, replay.answers)
    loss = ad.mul(current + replayed, Tensor(0.5))
    apply_gradients(params, adam, loss, lr)
    return LossBreakdown(plasticity=loss.item(), total=loss.item())


# ──────────────── EWC ────────────────

@dataclass
class FisherDiag:
    """Diagonal Fisher importances and the parameter anchor they were measured at."""
    importance: Dict[str, np.ndarray]
    anchor: Dict[str, np.ndarray]
    task_index: int = -1

    def total_importance(self) -> float:
        return float(sum(f.sum() for f in self.importance.values()))


def estimate_fisher(params: ModelParams, triplets: Sequence[Triplet], n_samples: int,
                    rng: np.random.Generator, task_index: int = -1) -> FisherDiag:
    """Mean squared gradient of log p(y | x), y sampled from the model's predictive distribution."""
    if not triplets:
        raise ValueError("Fisher estimation needs at least one triplet")
    count = min(n_samples, len(triplets))
    chosen = np.sort(rng.choice(len(triplets), size=count, replace=False))

    importance = {name: np.zeros_like(t.data) for name, t in params.tensors.items()}
    for i in chosen:
        t = triplets[i]
        logits, _ = forward(t.features, t.question, params)
        sampled = int(rng.choice(logits.shape[-1], p=teacher_targets(logits)))
        nll = ad.cross_entropy_soft(logits, one_hot([sampled], logits.shape[-1])[0])
        ad.zero_grad(params.tensors)
        ad.backward(nll)
        for name, tensor in params.tensors.items():
            importance[name] += tensor.grad ** 2
    ad.zero_grad(params.tensors)

    for name in importance:
        importance[name] /= count
    anchor = {name: t.data.copy() for name, t in params.tensors.items()}
    fisher = FisherDiag(importance=importance, anchor=anchor, task_index=task_index)
    logger.info("Fisher for task %d from %d samples: total importance %.4g",
                task_index, count, fisher.total_importance())
    return fisher


def ewc_penalty(params: ModelParams, fishers: Sequence[FisherDiag]) -> Tensor:
    """sum over tasks and parameters of F * (theta - theta*)^2."""
    penalty: Optional[Tensor] = None
    for fisher in fishers:
        for name, tensor in params.tensors.items():
            delta = tensor - Tensor(fisher.anchor[name])
            term = ad.total(ad.mul(ad.mul(delta, delta), Tensor(fisher.importance[name])))
            penalty = term if penalty is None else penalty + term
    return penalty if penalty is not None else Tensor(0.0)


def ewc_step(params: ModelParams, adam: AdamState, batch: TripletBatch, fishers: Sequence[FisherDiag],
             ewc_lambda: float, lr: float) -> LossBreakdown:
    """Plasticity plus weighted EWC penalty; no stored Fisher gives :func:`vanilla_step`."""
    if not fishers or ewc_lambda == 0.0:
        return vanilla_step(params, adam, batch, lr)
    logits, _ = forward_batch(batch.features, batch.questions, params)
    plasticity = plasticity_from_logits(logits, batch.answers)
    penalty = ewc_penalty(params, fishers)
    loss = plasticity + ad.mul(penalty, Tensor(ewc_lambda))
    apply_gradients(params, adam, loss, lr)
    # total carries the weighted penalty
    return LossBreakdown(plasticity=plasticity.item(), total=loss.item())


# ──────────────── Joint ────────────────

def joint_train(params: ModelParams, triplets: Sequence[Triplet], config: TrainConfig,
                rng: np.random.Generator, adam: Optional[AdamState] = None) -> List[LossRecord]:
    """Train on the shuffled union of every task's training data."""
    adam = adam or AdamState.for_params(params.tensors)
    data = stack_triplets(triplets)
    log: List[LossRecord] = []
    step = 0
    for epoch in range(config.epochs):
        for batch in iter_minibatches(data, config.batch_size, rng):
            breakdown = vanilla_step(params, adam, batch, config.learning_rate)
            log.append(LossRecord(step=step, task=-1, **breakdown.model_dump()))
            step += 1
        logger.info("Joint epoch %d/%d: last loss %.4f", epoch + 1, config.epochs, log[-1].total)
    return log
