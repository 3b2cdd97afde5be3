"""Toy multimodal transformer over a unified [answer-query | regions | question] sequence.

Pre-norm encoder blocks of multi-head self-attention and a GELU feed-forward
network. The answer is read from the final hidden state of the learnable
answer-query token, which replaces a generative decoder with a single
decoding step over a global answer vocabulary.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np

from app.exceptions import DimensionError, VocabularyError
from app.models.schemas import ModelConfig
from app.services import autodiff as ad
from app.services.autodiff import Tensor
from app.utils.seeding import derive_rng
from app.utils.serialization import read_tensor_file, sha256_arrays, write_tensor_file

logger = logging.getLogger(__name__)


@dataclass
class AttentionCapture:
    """Per-layer attention tensors shaped (batch, heads, S, S)."""
    maps: List[Tensor]    # post-softmax
    scores: List[Tensor]  # scaled query-key products, pre-softmax

    @property
    def n_layers(self) -> int:
        return len(self.maps)

    @property
    def n_heads(self) -> int:
        return self.maps[0].shape[1]

    @property
    def seq_len(self) -> int:
        return self.maps[0].shape[-1]

    @property
    def geometry(self) -> Tuple[int, ...]:
        return (self.n_layers,) + tuple(self.maps[0].shape)

    def head_map(self, layer: int, head: int, sample: int = 0) -> np.ndarray:
        return self.maps[layer].data[sample, head]


class ModelParams:
    """Named parameter tensors of one model instance."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor], frozen: bool = False):
        self.config = config
        self.tensors = tensors
        self.frozen = frozen

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def digest(self) -> str:
        """SHA-256 over every parameter value, in name order."""
        return sha256_arrays(self.tensors[name].data for name in self.tensors)

    def n_values(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))


# ──────────────── Construction ────────────────

def _shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, ff = config.d_model, config.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {
        "visual.fc1.weight": (config.d_visual, d),
        "visual.fc1.bias": (d,),
        "visual.fc2.weight": (d, d),
        "visual.fc2.bias": (d,),
        "question.embedding": (config.question_vocab_size, d),
        "answer_query": (1, d),
        "position.visual": (config.n_regions, d),
        "position.question": (config.max_question_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes.update({
            f"{p}.ln1.gain": (d,), f"{p}.ln1.bias": (d,),
            f"{p}.attn.query.weight": (d, d), f"{p}.attn.query.bias": (d,),
            f"{p}.attn.key.weight": (d, d), f"{p}.attn.key.bias": (d,),
            f"{p}.attn.value.weight": (d, d), f"{p}.attn.value.bias": (d,),
            f"{p}.attn.output.weight": (d, d), f"{p}.attn.output.bias": (d,),
            f"{p}.ln2.gain": (d,), f"{p}.ln2.bias": (d,),
            f"{p}.ff.fc1.weight": (d, ff), f"{p}.ff.fc1.bias": (ff,),
            f"{p}.ff.fc2.weight": (ff, d), f"{p}.ff.fc2.bias": (d,),
        })
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["head.weight"] = (d, config.answer_vocab_size)
    shapes["head.bias"] = (config.answer_vocab_size,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Normal(0, init_std) weights and embeddings, zero biases, unit LN gains."""
    rng = derive_rng(seed, "model")
    tensors: Dict[str, Tensor] = {}
    for name, shape in _shapes(config).items():
        if name.endswith(".gain"):
            values = np.ones(shape)
        elif name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, config.init_std, size=shape)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    params = ModelParams(config, tensors)
    logger.debug("Initialised %d tensors (%d values), seed=%d", len(params), params.n_values(), seed)
    return params


def clone_frozen(params: ModelParams) -> ModelParams:
    """Deep copy that never records gradients (teacher snapshot)."""
    tensors = {
        name: Tensor(t.data.copy(), requires_grad=False, name=name)
        for name, t in params.tensors.items()
    }
    return ModelParams(params.config, tensors, frozen=True)


# ──────────────── Forward ────────────────

def _dense(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ad.matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def project_visual(features, params: ModelParams) -> Tensor:
    """Dense -> GELU -> dense, applied to every region row."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.shape[-1] != params.config.d_visual:
        raise DimensionError(
            f"Visual feature width {features.shape[-1]} != d_visual {params.config.d_visual}"
        )
    hidden = ad.gelu(_dense(features, params, "visual.fc1"))
    return _dense(hidden, params, "visual.fc2")


def _split_heads(x: Tensor, batch: int, seq: int, config: ModelConfig) -> Tensor:
    x = ad.reshape(x, (batch, seq, config.n_heads, config.head_dim))
    return ad.permute(x, (0, 2, 1, 3))


def _self_attention(x: Tensor, params: ModelParams, layer: int) -> Tuple[Tensor, Tensor, Tensor]:
    config = params.config
    batch, seq, _ = x.shape
    p = f"layers.{layer}.attn"
    q = _split_heads(_dense(x, params, f"{p}.query"), batch, seq, config)
    k = _split_heads(_dense(x, params, f"{p}.key"), batch, seq, config)
    v = _split_heads(_dense(x, params, f"{p}.value"), batch, seq, config)

    scores = ad.mul(ad.matmul(q, ad.transpose_last(k)), Tensor(1.0 / math.sqrt(config.head_dim)))
    attn = ad.softmax_rows(scores)
    context = ad.permute(ad.matmul(attn, v), (0, 2, 1, 3))
    context = ad.reshape(context, (batch, seq, config.d_model))
    return _dense(context, params, f"{p}.output"), attn, scores


def _validate_inputs(features: np.ndarray, questions: np.ndarray, config: ModelConfig) -> None:
    if features.ndim != 3 or questions.ndim != 2 or features.shape[0] != questions.shape[0]:
        raise DimensionError(
            f"Expected features (B, R, d_visual) and questions (B, L); got {features.shape} and {questions.shape}"
        )
    if features.shape[1] > config.n_regions:
        raise DimensionError(f"{features.shape[1]} regions exceed n_regions={config.n_regions}")
    if not 1 <= questions.shape[1] <= config.max_question_len:
        raise DimensionError(
            f"Question length {questions.shape[1]} outside 1..{config.max_question_len}"
        )
    if questions.size and (questions.min() < 0 or questions.max() >= config.question_vocab_size):
        bad = questions[(questions < 0) | (questions >= config.question_vocab_size)]
        raise VocabularyError(f"Unknown question token id(s): {sorted(set(bad.tolist()))}")


def forward_batch(features, questions, params: ModelParams) -> Tuple[Tensor, AttentionCapture]:
    """Logits (B, answer_vocab_size) and the attention capture of every layer."""
    config = params.config
    features = np.asarray(features, dtype=np.float64)
    questions = np.asarray(questions, dtype=np.int64)
    _validate_inputs(features, questions, config)
    batch, n_regions, _ = features.shape
    q_len = questions.shape[1]

    visual = project_visual(Tensor(features), params)
    if config.visual_positions:
        visual = visual + ad.slice_axis(params["position.visual"], 0, 0, n_regions)
    words = ad.embedding(params["question.embedding"], questions)
    words = words + ad.slice_axis(params["position.question"], 0, 0, q_len)
    query = params["answer_query"] + Tensor(np.zeros((batch, 1, config.d_model)))

    hidden = ad.concat([query, visual, words], axis=1)
    maps: List[Tensor] = []
    scores: List[Tensor] = []
    for layer in range(config.n_layers):
        p = f"layers.{layer}"
        normed = ad.layer_norm(hidden, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        attended, attn, raw = _self_attention(normed, params, layer)
        hidden = hidden + attended
        normed = ad.layer_norm(hidden, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
        hidden = hidden + _dense(ad.gelu(_dense(normed, params, f"{p}.ff.fc1")), params, f"{p}.ff.fc2")
        maps.append(attn)
        scores.append(raw)

    answer_state = ad.reshape(ad.slice_axis(hidden, 1, 0, 1), (batch, config.d_model))
    answer_state = ad.layer_norm(answer_state, params["final_ln.gain"], params["final_ln.bias"])
    logits = _dense(answer_state, params, "head")
    return logits, AttentionCapture(maps=maps, scores=scores)


def forward(features, question, params: ModelParams) -> Tuple[Tensor, AttentionCapture]:
    """Single-sample forward: logits of shape (answer_vocab_size,)."""
    features = np.asarray(features, dtype=np.float64)[None, ...]
    question = np.asarray(question, dtype=np.int64)[None, ...]
    logits, capture = forward_batch(features, question, params)
    return ad.reshape(logits, (params.config.answer_vocab_size,)), capture


def predict(features, questions, params: ModelParams) -> np.ndarray:
    """Argmax answer ids without recording a graph."""
    with ad.no_grad():
        logits, _ = forward_batch(features, questions, params)
    return logits.data.argmax(axis=-1)


# ──────────────── Checkpoints ────────────────

def save_model(params: ModelParams, path: str | Path) -> Path:
    """Binary checkpoint plus a JSON config sidecar next to it."""
    path = Path(path)
    write_tensor_file(path, params.arrays())
    path.with_suffix(".json").write_text(params.config.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Saved checkpoint %s (%d tensors)", path, len(params))
    return path


def load_model(path: str | Path, trainable: bool = True) -> ModelParams:
    path = Path(path)
    config = ModelConfig(**json.loads(path.with_suffix(".json").read_text(encoding="utf-8")))
    arrays = read_tensor_file(path)
    expected = _shapes(config)
    if set(arrays) != set(expected):
        raise DimensionError(f"Checkpoint tensors do not match config: {sorted(set(arrays) ^ set(expected))}")
    tensors = {}
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {shape}")
        tensors[name] = Tensor(arrays[name], requires_grad=trainable, name=name)
    return ModelParams(config, tensors, frozen=not trainable)
