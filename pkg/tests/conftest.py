"""Shared tiny configurations so every test trains in well under a second."""

from __future__ import annotations

import pytest

from app.models.schemas import (
    ArchitectureConfig,
    BenchmarkConfig,
    ExperimentConfig,
    ModelConfig,
    SplitSizes,
    TrainConfig,
)


def tiny_benchmark_config(**overrides) -> BenchmarkConfig:
    values = dict(
        seed=0,
        n_categories=20,
        n_groups=5,
        grid_size=3,
        d_visual=8,
        sizes=SplitSizes(train=8, val=4, test=4, novel_test=4),
    )
    values.update(overrides)
    return BenchmarkConfig(**values)


def tiny_architecture(**overrides) -> ArchitectureConfig:
    values = dict(d_model=8, n_layers=1, n_heads=2, d_ff=16)
    values.update(overrides)
    return ArchitectureConfig(**values)


def tiny_experiment_config(**train_overrides) -> ExperimentConfig:
    train = dict(epochs=1, batch_size=4, memory_capacity=10, learning_rate=1e-3, fisher_samples=4)
    train.update(train_overrides)
    return ExperimentConfig(
        benchmark=tiny_benchmark_config(),
        architecture=tiny_architecture(),
        train=TrainConfig(**train),
    )


@pytest.fixture
def model_config() -> ModelConfig:
    return ModelConfig(
        d_model=8,
        n_layers=2,
        n_heads=2,
        d_ff=16,
        n_regions=4,
        d_visual=6,
        question_vocab_size=10,
        answer_vocab_size=5,
        max_question_len=6,
    )


@pytest.fixture
def benchmark_config() -> BenchmarkConfig:
    return tiny_benchmark_config()


@pytest.fixture
def experiment_config() -> ExperimentConfig:
    return tiny_experiment_config()
