"""Pydantic models for configuration, schedules, memory entries and results."""

from __future__ import annotations

from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ────────────────────────── Enums ──────────────────────────

class Skill(str, Enum):
    """Linguistic macro-tasks, in training order."""
    COUNT = "count"
    COLOR = "color"
    EXISTENCE = "existence"
    RECOGNITION = "recognition"
    LOCATION = "location"


class Method(str, Enum):
    VANILLA = "vanilla"
    JOINT = "joint"
    ER = "er"
    EWC = "ewc"
    QUAD = "quad"
    QUAD_PL_ONLY = "quad_pl_only"
    QUAD_ATT_ONLY = "quad_att_only"
    QUAD_L1 = "quad_l1"
    QUAD_ASYM = "quad_asym"

    @property
    def is_quad(self) -> bool:
        return self.value.startswith("quad")


class SelectionStrategy(str, Enum):
    RANDOM = "random"
    OBJECT_MATCHED = "object_matched"


class AttentionLossKind(str, Enum):
    CROSS_ENTROPY = "ce"
    L1 = "l1"
    ASYM = "asym"


class TaskRole(str, Enum):
    TRAIN = "train"
    NOVEL = "novel"


# ────────────────────────── Configuration ──────────────────────────

class SplitSizes(BaseModel):
    """Triplets per sub-task and split."""
    train: int = Field(400, gt=0)
    val: int = Field(50, gt=0)
    test: int = Field(100, gt=0)
    novel_test: int = Field(100, gt=0)


class BenchmarkConfig(BaseModel):
    """Synthetic benchmark generation parameters."""
    seed: int = Field(0, ge=0, description="Global benchmark seed")
    skills: List[Skill] = Field(default_factory=lambda: list(Skill))
    n_categories: int = Field(20, gt=0, le=20)
    n_groups: int = Field(5, gt=0)
    grid_size: int = Field(3, gt=0)
    d_visual: int = Field(32, gt=0)
    noise_sigma: float = Field(0.05, ge=0.0)
    min_objects: int = Field(2, gt=0)
    max_objects: int = Field(5, gt=0)
    max_question_len: int = Field(6, ge=5)
    sizes: SplitSizes = Field(default_factory=SplitSizes)

    @property
    def n_regions(self) -> int:
        return self.grid_size * self.grid_size

    @field_validator("skills")
    @classmethod
    def _unique_skills(cls, v: List[Skill]) -> List[Skill]:
        if not v:
            raise ValueError("at least one skill is required")
        if len(set(v)) != len(v):
            raise ValueError("skills must be unique")
        return v

    @model_validator(mode="after")
    def _object_bounds(self) -> "BenchmarkConfig":
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        if self.max_objects > self.n_regions:
            raise ValueError("max_objects must fit on the grid")
        return self


class ArchitectureConfig(BaseModel):
    """Transformer shape, independent of vocabulary sizes."""
    d_model: int = Field(64, gt=0)
    n_layers: int = Field(2, gt=0)
    n_heads: int = Field(4, gt=0)
    d_ff: int = Field(128, gt=0)
    visual_positions: bool = True
    init_std: float = Field(0.02, gt=0.0)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ArchitectureConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        return self


class ModelConfig(ArchitectureConfig):
    """Complete model geometry."""
    n_regions: int = Field(9, gt=0)
    d_visual: int = Field(32, gt=0)
    question_vocab_size: int = Field(..., gt=0)
    answer_vocab_size: int = Field(..., ge=2)
    max_question_len: int = Field(6, gt=0)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_parts(
        cls,
        architecture: ArchitectureConfig,
        benchmark: BenchmarkConfig,
        question_vocab_size: int,
        answer_vocab_size: int,
    ) -> "ModelConfig":
        return cls(
            **architecture.model_dump(),
            n_regions=benchmark.n_regions,
            d_visual=benchmark.d_visual,
            question_vocab_size=question_vocab_size,
            answer_vocab_size=answer_vocab_size,
            max_question_len=benchmark.max_question_len,
        )


class TrainConfig(BaseModel):
    """Continual training hyper-parameters for one run."""
    method: Method = Method.QUAD
    stability_weight: float = Field(0.5, ge=0.0, description="lambda")
    learning_rate: float = Field(1e-3, gt=0.0)
    epochs: int = Field(40, gt=0, description="Passes over each sub-task (joint: over the union)")
    batch_size: int = Field(32, gt=0)
    memory_capacity: int = Field(200, ge=0)
    selection: SelectionStrategy = SelectionStrategy.OBJECT_MATCHED
    model_seed: int = Field(0, ge=0)
    data_seed: int = Field(1, ge=0)
    replay_seed: int = Field(2, ge=0)
    snapshot_per_subtask: bool = False
    ewc_lambda: float = Field(100.0, ge=0.0)
    fisher_samples: int = Field(200, gt=0)
    eval_chunk_size: int = Field(256, gt=0)


class ExperimentConfig(BaseModel):
    """Everything one CLI invocation needs."""
    benchmark: BenchmarkConfig = Field(default_factory=BenchmarkConfig)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    fold: int = Field(0, ge=0)
    seed: int = Field(0, ge=0)
    repeats: int = Field(1, gt=0)
    methods: List[Method] = Field(default_factory=lambda: [Method.VANILLA, Method.QUAD])
    memory_sizes: List[int] = Field(default_factory=lambda: [25, 50, 100, 200])
    selection_strategies: List[SelectionStrategy] = Field(
        default_factory=lambda: [SelectionStrategy.RANDOM, SelectionStrategy.OBJECT_MATCHED]
    )
    ewc_lambdas: List[float] = Field(default_factory=lambda: [10.0, 100.0, 1000.0])
    output_dir: str = "results"
    benchmark_dir: str = "benchmark"

    @model_validator(mode="after")
    def _fold_in_range(self) -> "ExperimentConfig":
        if self.fold >= self.benchmark.n_groups:
            raise ValueError(f"fold must be in 0..{self.benchmark.n_groups - 1}, got {self.fold}")
        return self

    def seeds_for(self, repeat: int) -> Dict[str, int]:
        """Model/data/replay seeds of the ``repeat``-th run.

        Seeds set explicitly in ``train`` are kept and shifted by ``repeat``;
        the rest derive from the global seed.
        """
        base = self.seed + repeat
        seeds = {"model_seed": base, "data_seed": base + 1, "replay_seed": base + 2}
        for key in seeds:
            if key in self.train.model_fields_set:
                seeds[key] = getattr(self.train, key) + repeat
        return seeds


class ExperimentCell(BaseModel):
    """One independent run inside a command: method, fold, repeat and overrides."""
    method: Method
    fold: int = 0
    repeat: int = 0
    memory_capacity: Optional[int] = None
    selection: Optional[SelectionStrategy] = None
    ewc_lambda: Optional[float] = None
    stability_weight: Optional[float] = None
    out_dir: Optional[str] = None

    def train_overrides(self) -> Dict[str, object]:
        keys = ("memory_capacity", "selection", "ewc_lambda", "stability_weight")
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}


# ────────────────────────── Schedule ──────────────────────────

class SubTask(BaseModel):
    """One (skill, object group) pair of the schedule."""
    index: int
    skill: Skill
    skill_id: int
    group_id: int
    macro_index: int
    role: TaskRole = TaskRole.TRAIN

    @property
    def name(self) -> str:
        return f"{self.skill.value}/g{self.group_id}"


class TaskSchedule(BaseModel):
    """Ordered macro-task x sub-task sequence plus held-out groups."""
    skills: List[Skill]
    groups: List[List[int]]
    held_out_group: Dict[int, int] = Field(..., description="skill_id -> held-out group")
    fold: int
    tasks: List[SubTask] = Field(..., description="Training sub-tasks in order")
    novel: List[SubTask] = Field(..., description="Held-out (skill, group) pairs")

    @property
    def n_macro(self) -> int:
        return len(self.skills)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def total_steps(self) -> int:
        return self.n_macro * self.n_groups

    def tasks_of_macro(self, macro_index: int) -> List[SubTask]:
        return [t for t in self.tasks if t.macro_index == macro_index]

    def is_macro_end(self, task_index: int) -> bool:
        task = self.tasks[task_index]
        return task_index == len(self.tasks) - 1 or self.tasks[task_index + 1].macro_index != task.macro_index


# ────────────────────────── Memory ──────────────────────────

class MemoryEntry(BaseModel):
    """A stored past question. Visual fields are rejected by construction."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    question: Tuple[int, ...]
    skill_id: int
    answer_space_id: int
    categories: Tuple[int, ...]
    task_index: int


# ────────────────────────── Losses ──────────────────────────

class LossWeights(BaseModel):
    stability_weight: float = Field(0.5, ge=0.0)


class LossBreakdown(BaseModel):
    plasticity: float = 0.0
    pseudo_label: float = 0.0
    attention: float = 0.0
    total: float = 0.0


class LossRecord(LossBreakdown):
    step: int
    task: int


# ────────────────────────── Results ──────────────────────────

Matrix = List[List[Optional[float]]]


class RunMetrics(BaseModel):
    """Accuracy matrix a[i][j] (task i after finishing task j) and derived metrics."""
    method: Method
    task_names: List[str]
    accuracy: Matrix
    out_of_answer_set: Matrix
    novel_accuracy: Matrix
    ap: float
    forget: Optional[float] = None
    ooas_rates: List[float] = Field(default_factory=list, description="Final column")
    mean_ooas: float = 0.0
    mean_ooas_previous: Optional[float] = None
    novel_ap: float = 0.0
    novel_forget: Optional[float] = None
    seed: int = 0
    memory_bytes: Optional[int] = None

    def summary(self) -> Dict[str, Optional[float]]:
        return {"AP": self.ap, "Forget": self.forget, "OOAS": self.mean_ooas, "novelAP": self.novel_ap}


class NovelCompositionSummary(BaseModel):
    skills: List[str]
    folds: List[int]
    table: Dict[str, List[float]] = Field(..., description="skill -> novel accuracy per fold")
    per_skill_mean: Dict[str, float]
    overall: float
    seen_gap: Dict[str, float] = Field(default_factory=dict, description="seen - novel per skill")


class BenchmarkManifest(BaseModel):
    config: BenchmarkConfig
    seed: int
    fold: int
    sub_tasks: List[SubTask]
    files: Dict[str, str] = Field(..., description="relative path -> sha256")


class RunManifest(BaseModel):
    method: Method
    config: ExperimentConfig
    seeds: Dict[str, int]
    benchmark_manifest_sha256: str
