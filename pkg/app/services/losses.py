"""Training objective: plasticity on current data plus stability distillation.

total = plasticity + lambda * (pseudo_label + attention)

The pseudo-label term distils the frozen teacher's full answer distribution
on (current image, memory question) pairs. The attention term aligns the
student's post-softmax self-attention maps with the teacher's over every
layer, head and query row. Two raw-score variants (L1 and ReLU+L1) replace
the attention term in ablations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.exceptions import DimensionError
from app.models.schemas import AttentionLossKind, LossBreakdown, LossWeights, Method
from app.services import autodiff as ad
from app.services.autodiff import Tensor
from app.services.benchmark import TripletBatch
from app.services.memory import ReplayBatch
from app.services.transformer import AttentionCapture, ModelParams, forward_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StabilityComponents:
    """Which stability terms a method uses."""
    pseudo_label: bool
    attention: Optional[AttentionLossKind]

    @property
    def any(self) -> bool:
        return self.pseudo_label or self.attention is not None


_COMPONENTS = {
    Method.QUAD: StabilityComponents(True, AttentionLossKind.CROSS_ENTROPY),
    Method.QUAD_PL_ONLY: StabilityComponents(True, None),
    Method.QUAD_ATT_ONLY: StabilityComponents(False, AttentionLossKind.CROSS_ENTROPY),
    Method.QUAD_L1: StabilityComponents(True, AttentionLossKind.L1),
    Method.QUAD_ASYM: StabilityComponents(True, AttentionLossKind.ASYM),
}


def stability_components(method: Method) -> StabilityComponents:
    return _COMPONENTS.get(method, StabilityComponents(False, None))


def _zero() -> Tensor:
    return Tensor(0.0)


# ──────────────── Plasticity ────────────────

def one_hot(answers: np.ndarray, n_answers: int) -> np.ndarray:
    return np.eye(n_answers)[np.asarray(answers, dtype=np.int64)]


def plasticity_from_logits(logits: Tensor, answers: np.ndarray) -> Tensor:
    """Mean cross-entropy against one-hot ground truth."""
    if len(answers) == 0:
        raise ValueError("plasticity loss needs a nonempty batch")
    return ad.cross_entropy_soft(logits, one_hot(answers, logits.shape[-1]))


def plasticity_loss(student: ModelParams, batch: TripletBatch) -> Tensor:
    logits, _ = forward_batch(batch.features, batch.questions, student)
    return plasticity_from_logits(logits, batch.answers)


# ──────────────── Pseudo-label distillation ────────────────

def teacher_targets(teacher_logits: Tensor) -> np.ndarray:
    """Full softmax distribution of the teacher; no argmax."""
    shifted = teacher_logits.data - teacher_logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def pseudo_label_from_logits(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    return ad.cross_entropy_soft(student_logits, teacher_targets(teacher_logits))


def teacher_forward(teacher: ModelParams, pairs: ReplayBatch) -> Tuple[Tensor, AttentionCapture]:
    with ad.no_grad():
        return forward_batch(pairs.features, pairs.questions, teacher)


def pseudo_label_loss(student: ModelParams, teacher: Optional[ModelParams], pairs: ReplayBatch) -> Tensor:
    """Zero when there is no teacher yet."""
    if teacher is None or len(pairs) == 0:
        return _zero()
    teacher_logits, _ = teacher_forward(teacher, pairs)
    student_logits, _ = forward_batch(pairs.features, pairs.questions, student)
    return pseudo_label_from_logits(student_logits, teacher_logits)


# ──────────────── Attention distillation ────────────────

def _check_geometry(student: AttentionCapture, teacher: AttentionCapture) -> None:
    if student.n_layers != teacher.n_layers:
        raise DimensionError(f"Capture layer counts differ: {student.n_layers} vs {teacher.n_layers}")
    for layer, (s, t) in enumerate(zip(student.maps, teacher.maps)):
        if s.shape != t.shape:
            raise DimensionError(f"Layer {layer} attention shapes differ: {s.shape} vs {t.shape}")


def _layer_mean(terms) -> Tensor:
    terms = list(terms)
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return ad.mul(out, Tensor(1.0 / len(terms)))


def attention_consistency_loss(student: AttentionCapture, teacher: AttentionCapture) -> Tensor:
    """Mean over layers, heads and query rows of CE(teacher row, student row)."""
    _check_geometry(student, teacher)
    return _layer_mean(
        ad.cross_entropy_probs(s, t.data) for s, t in zip(student.maps, teacher.maps)
    )


def attention_l1_loss(student: AttentionCapture, teacher: AttentionCapture) -> Tensor:
    """Mean |student - teacher| over pre-softmax scores."""
    _check_geometry(student, teacher)
    return _layer_mean(
        ad.mean(ad.absolute(s - Tensor(t.data))) for s, t in zip(student.scores, teacher.scores)
    )


def attention_asym_loss(student: AttentionCapture, teacher: AttentionCapture) -> Tensor:
    """Mean ReLU(teacher - student) over pre-softmax scores; only decreases are penalised."""
    _check_geometry(student, teacher)
    return _layer_mean(
        ad.mean(ad.relu(Tensor(t.data) - s)) for s, t in zip(student.scores, teacher.scores)
    )


_ATTENTION_LOSSES = {
    AttentionLossKind.CROSS_ENTROPY: attention_consistency_loss,
    AttentionLossKind.L1: attention_l1_loss,
    AttentionLossKind.ASYM: attention_asym_loss,
}


def attention_loss(kind: AttentionLossKind, student: AttentionCapture, teacher: AttentionCapture) -> Tensor:
    return _ATTENTION_LOSSES[kind](student, teacher)


# ──────────────── Combined objective ────────────────

def total_loss(
    weights: LossWeights,
    plasticity: Tensor,
    pseudo_label: Optional[Tensor] = None,
    attention: Optional[Tensor] = None,
) -> Tuple[Tensor, LossBreakdown]:
    """plasticity + lambda * (pseudo_label + attention), plus scalar breakdown.

    With lambda = 0 or no stability terms, the returned node is ``plasticity``
    itself so gradients match the plasticity-only path bit for bit.
    """
    lam = weights.stability_weight
    stability = [t for t in (pseudo_label, attention) if t is not None]
    pl_value = pseudo_label.item() if pseudo_label is not None else 0.0
    att_value = attention.item() if attention is not None else 0.0

    total = plasticity
    if lam != 0.0 and stability:
        summed = stability[0] if len(stability) == 1 else stability[0] + stability[1]
        total = plasticity + ad.mul(summed, Tensor(lam))

    breakdown = LossBreakdown(
        plasticity=plasticity.item(),
        pseudo_label=pl_value,
        attention=att_value,
        total=plasticity.item() + lam * (pl_value + att_value),
    )
    return total, breakdown
