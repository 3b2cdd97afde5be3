"""Procedural continual-VQA benchmark.

Scenes of attributed objects on a grid are rendered into region feature
matrices, paired with templated questions per linguistic skill, and grouped
into (skill, object group) sub-tasks. One object group per skill is held
out for novel-composition testing, rotated by fold.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.exceptions import (
    BenchmarkIntegrityError,
    BenchmarkNotFoundError,
    ConfigError,
    DimensionError,
    UnsatisfiableQuestion,
    VocabularyError,
)
from app.models.schemas import (
    BenchmarkConfig,
    BenchmarkManifest,
    Skill,
    SplitSizes,
    SubTask,
    TaskRole,
    TaskSchedule,
)
from app.utils.seeding import derive_rng, namespace
from app.utils.serialization import (
    read_jsonl,
    read_tensor_file,
    sha256_file,
    write_json,
    write_jsonl,
    write_tensor_file,
)

logger = logging.getLogger(__name__)

PAD = "<pad>"
CATEGORY_NAMES = (
    "car", "bus", "bike", "truck", "boat", "plane", "train", "dog", "cat", "cow",
    "horse", "sheep", "bird", "apple", "banana", "cup", "chair", "table", "lamp", "book",
)
COLOR_NAMES = ("red", "green", "blue", "yellow", "purple", "orange")
TEMPLATE_WORDS = ("how", "many", "what", "color", "is", "the", "there", "a", "in", "cell", "where")

# Answer spaces are indexed by the skill's position in the Skill enum.
ANSWER_SPACE = {skill: i for i, skill in enumerate(Skill)}

SPLITS = ("train", "val", "test")
NOVEL_SPLIT = "novel_test"
MAX_RETRIES = 200


# ──────────────── Vocabulary ────────────────

def cell_names(grid_size: int) -> List[str]:
    return [f"r{row}c{col}" for row in range(grid_size) for col in range(grid_size)]


class Vocabulary:
    """Fixed word -> id table for questions and the global answer vocabulary."""

    def __init__(self, config: BenchmarkConfig):
        self.config = config
        self.categories = list(CATEGORY_NAMES[: config.n_categories])
        self.cells = cell_names(config.grid_size)
        self.words = [PAD, *TEMPLATE_WORDS, *self.categories, *self.cells]
        self.word_to_id = {w: i for i, w in enumerate(self.words)}

        spaces: Dict[Skill, List[str]] = {
            Skill.COUNT: [str(n) for n in range(config.max_objects + 1)],
            Skill.COLOR: list(COLOR_NAMES),
            Skill.EXISTENCE: ["yes", "no"],
            Skill.RECOGNITION: list(self.categories),
            Skill.LOCATION: list(self.cells),
        }
        self.answers: List[str] = []
        self.space_ids: List[np.ndarray] = []
        for skill in Skill:
            start = len(self.answers)
            self.answers.extend(spaces[skill])
            self.space_ids.append(np.arange(start, len(self.answers)))
        self.answer_to_id = {a: i for i, a in enumerate(self.answers)}
        self._space_of = np.empty(len(self.answers), dtype=np.int64)
        for space_id, ids in enumerate(self.space_ids):
            self._space_of[ids] = space_id

    @property
    def pad_id(self) -> int:
        return self.word_to_id[PAD]

    @property
    def question_size(self) -> int:
        return len(self.words)

    @property
    def answer_size(self) -> int:
        return len(self.answers)

    def encode_question(self, words: Sequence[str]) -> np.ndarray:
        if len(words) > self.config.max_question_len:
            raise DimensionError(
                f"Question of {len(words)} words exceeds max_question_len={self.config.max_question_len}"
            )
        try:
            ids = [self.word_to_id[w] for w in words]
        except KeyError as exc:
            raise VocabularyError(f"Unknown question word: {exc.args[0]!r}") from None
        ids.extend([self.pad_id] * (self.config.max_question_len - len(ids)))
        return np.asarray(ids, dtype=np.int64)

    def decode_question(self, ids: Sequence[int]) -> List[str]:
        try:
            return [self.words[i] for i in ids if i != self.pad_id]
        except IndexError:
            raise VocabularyError(f"Unknown question token id in {list(ids)}") from None

    def answer_id(self, token: str) -> int:
        try:
            return self.answer_to_id[token]
        except KeyError:
            raise VocabularyError(f"Unknown answer token: {token!r}") from None

    def space_of(self, answer_ids) -> np.ndarray:
        """Answer-space id of each answer id."""
        return self._space_of[np.asarray(answer_ids, dtype=np.int64)]


# ──────────────── Scenes ────────────────

@dataclass(frozen=True)
class ObjectInstance:
    category_id: int
    color_id: int
    cell: int


@dataclass(frozen=True)
class Scene:
    objects: Tuple[ObjectInstance, ...]
    seed: int
    group_id: int
    group: Tuple[int, ...]

    @cached_property
    def category_counts(self) -> Counter:
        return Counter(o.category_id for o in self.objects)

    @property
    def categories(self) -> Tuple[int, ...]:
        return tuple(sorted(self.category_counts))

    def object_at(self, cell: int) -> Optional[ObjectInstance]:
        return next((o for o in self.objects if o.cell == cell), None)

    def unique_object(self, category_id: int) -> Optional[ObjectInstance]:
        matches = [o for o in self.objects if o.category_id == category_id]
        return matches[0] if len(matches) == 1 else None

    def to_record(self) -> List[List[int]]:
        return [[o.category_id, o.color_id, o.cell] for o in self.objects]


def generate_scene(rng: np.random.Generator, group_id: int, group: Sequence[int],
                   config: BenchmarkConfig) -> Scene:
    """Place min_objects..max_objects objects on distinct cells, categories from ``group``."""
    if not group:
        raise ConfigError(f"Object group {group_id} is empty")
    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(config.n_regions, size=n_objects, replace=False)
    categories = rng.choice(np.asarray(group), size=n_objects, replace=True)
    colors = rng.integers(0, len(COLOR_NAMES), size=n_objects)
    objects = tuple(
        ObjectInstance(int(cat), int(col), int(cell))
        for cat, col, cell in sorted(zip(categories, colors, cells), key=lambda t: t[2])
    )
    seed = int(rng.integers(0, 2 ** 62))
    return Scene(objects=objects, seed=seed, group_id=group_id, group=tuple(int(c) for c in group))


# ──────────────── Features ────────────────

@dataclass(frozen=True)
class FeatureTables:
    """Fixed pseudo-random embedding tables shared by every scene of a benchmark."""
    category: np.ndarray  # (C, d_visual)
    color: np.ndarray     # (palette, d_visual)
    position: np.ndarray  # (n_regions, d_visual)
    null: np.ndarray      # (d_visual,)


@lru_cache(maxsize=8)
def feature_tables(seed: int, n_categories: int, n_regions: int, d_visual: int) -> FeatureTables:
    rng = derive_rng(seed, "tables")
    # unit-variance entries keep region content well above noise_sigma
    return FeatureTables(
        category=rng.normal(0.0, 1.0, size=(n_categories, d_visual)),
        color=rng.normal(0.0, 1.0, size=(len(COLOR_NAMES), d_visual)),
        position=rng.normal(0.0, 1.0, size=(n_regions, d_visual)),
        null=rng.normal(0.0, 1.0, size=(d_visual,)),
    )


def tables_for(config: BenchmarkConfig) -> FeatureTables:
    return feature_tables(config.seed, config.n_categories, config.n_regions, config.d_visual)


def render_features(scene: Scene, config: BenchmarkConfig,
                    noise_rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Region feature matrix (n_regions, d_visual); row r describes grid cell r.

    Occupied rows are E_cat + E_col + E_pos plus Gaussian noise; empty rows are
    the null embedding plus noise. Noise defaults to a stream derived from the
    scene seed.
    """
    tables = tables_for(config)
    features = np.tile(tables.null, (config.n_regions, 1))
    for obj in scene.objects:
        features[obj.cell] = tables.category[obj.category_id] + tables.color[obj.color_id] + tables.position[obj.cell]
    if config.noise_sigma > 0:
        rng = noise_rng if noise_rng is not None else derive_rng(scene.seed, "noise")
        features = features + rng.normal(0.0, config.noise_sigma, size=features.shape)
    return features


def decode_region(row: np.ndarray, cell: int, config: BenchmarkConfig) -> Optional[Tuple[int, int]]:
    """Nearest-embedding decoding of one region row: (category, color) or None for null."""
    tables = tables_for(config)
    candidates = tables.category[:, None, :] + tables.color[None, :, :] + tables.position[cell]
    distances = np.linalg.norm(candidates - row, axis=-1)
    best = np.unravel_index(np.argmin(distances), distances.shape)
    if np.linalg.norm(tables.null - row) < distances[best]:
        return None
    return int(best[0]), int(best[1])


# ──────────────── Questions ────────────────

def instantiate_question(skill: Skill, scene: Scene, rng: np.random.Generator,
                         vocab: Vocabulary) -> Tuple[np.ndarray, int, Tuple[int, ...]]:
    """Sample an unambiguous question of ``skill`` about ``scene``.

    Returns (padded token ids, answer id, referenced category ids).

    Raises:
        UnsatisfiableQuestion: the scene has no unambiguous instance.
    """
    names = vocab.categories
    counts = scene.category_counts

    if skill is Skill.COUNT:
        cat = int(rng.choice(scene.group))
        words = ["how", "many", names[cat]]
        answer = str(counts.get(cat, 0))
    elif skill is Skill.COLOR:
        unique = [c for c in scene.categories if counts[c] == 1]
        if not unique:
            raise UnsatisfiableQuestion("color: no category occurs exactly once")
        cat = int(rng.choice(unique))
        words = ["what", "color", "is", "the", names[cat]]
        answer = COLOR_NAMES[scene.unique_object(cat).color_id]
    elif skill is Skill.EXISTENCE:
        want_yes = bool(rng.integers(0, 2))
        pool = scene.categories if want_yes else [c for c in scene.group if c not in counts]
        if not pool:
            raise UnsatisfiableQuestion("existence: every group category is present")
        cat = int(rng.choice(pool))
        words = ["is", "there", "a", names[cat]]
        answer = "yes" if want_yes else "no"
    elif skill is Skill.RECOGNITION:
        obj = scene.objects[int(rng.integers(0, len(scene.objects)))]
        cat = obj.category_id
        words = ["what", "is", "in", "cell", vocab.cells[obj.cell]]
        answer = names[cat]
    elif skill is Skill.LOCATION:
        unique = [c for c in scene.categories if counts[c] == 1]
        if not unique:
            raise UnsatisfiableQuestion("location: no category occurs exactly once")
        cat = int(rng.choice(unique))
        words = ["where", "is", "the", names[cat]]
        answer = vocab.cells[scene.unique_object(cat).cell]
    else:
        raise ConfigError(f"Unknown skill {skill}")

    return vocab.encode_question(words), vocab.answer_id(answer), (cat,)


def answer_from_scene(question: Sequence[int], scene: Scene, vocab: Vocabulary) -> int:
    """Re-derive the ground-truth answer by parsing the question words."""
    words = vocab.decode_question(question)
    head = tuple(words[:-1])
    last = words[-1]
    if head == ("how", "many"):
        cat = vocab.categories.index(last)
        return vocab.answer_id(str(sum(o.category_id == cat for o in scene.objects)))
    if head == ("what", "color", "is", "the"):
        cat = vocab.categories.index(last)
        (obj,) = [o for o in scene.objects if o.category_id == cat]
        return vocab.answer_id(COLOR_NAMES[obj.color_id])
    if head == ("is", "there", "a"):
        cat = vocab.categories.index(last)
        return vocab.answer_id("yes" if any(o.category_id == cat for o in scene.objects) else "no")
    if head == ("what", "is", "in", "cell"):
        cell = vocab.cells.index(last)
        (obj,) = [o for o in scene.objects if o.cell == cell]
        return vocab.answer_id(vocab.categories[obj.category_id])
    if head == ("where", "is", "the"):
        cat = vocab.categories.index(last)
        (obj,) = [o for o in scene.objects if o.category_id == cat]
        return vocab.answer_id(vocab.cells[obj.cell])
    raise VocabularyError(f"Question matches no template: {' '.join(words)}")


# ──────────────── Triplets ────────────────

@dataclass
class Triplet:
    """One (visual features, question, answer) sample with its metadata."""
    features: np.ndarray
    question: np.ndarray
    answer: int
    skill_id: int
    group_id: int
    answer_space_id: int
    categories: Tuple[int, ...]
    scene: Scene


@dataclass
class TripletBatch:
    features: np.ndarray         # (B, n_regions, d_visual)
    questions: np.ndarray        # (B, max_question_len)
    answers: np.ndarray          # (B,)
    skill_ids: np.ndarray
    answer_space_ids: np.ndarray
    categories: List[Tuple[int, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.answers)

    def take(self, indices) -> "TripletBatch":
        indices = np.asarray(indices, dtype=np.int64)
        return TripletBatch(
            features=self.features[indices],
            questions=self.questions[indices],
            answers=self.answers[indices],
            skill_ids=self.skill_ids[indices],
            answer_space_ids=self.answer_space_ids[indices],
            categories=[self.categories[i] for i in indices],
        )


def stack_triplets(triplets: Sequence[Triplet]) -> TripletBatch:
    if not triplets:
        raise ValueError("Cannot stack an empty triplet list")
    return TripletBatch(
        features=np.stack([t.features for t in triplets]),
        questions=np.stack([t.question for t in triplets]),
        answers=np.asarray([t.answer for t in triplets], dtype=np.int64),
        skill_ids=np.asarray([t.skill_id for t in triplets], dtype=np.int64),
        answer_space_ids=np.asarray([t.answer_space_id for t in triplets], dtype=np.int64),
        categories=[t.categories for t in triplets],
    )


def iter_minibatches(batch: TripletBatch, batch_size: int,
                     rng: np.random.Generator) -> Iterator[TripletBatch]:
    """One shuffled pass over ``batch`` in chunks of ``batch_size`` (last may be short)."""
    order = rng.permutation(len(batch))
    for start in range(0, len(order), batch_size):
        yield batch.take(order[start:start + batch_size])


def generate_triplet(rng: np.random.Generator, skill: Skill, skill_id: int, group_id: int,
                     group: Sequence[int], config: BenchmarkConfig, vocab: Vocabulary) -> Triplet:
    """Sample scenes until one admits an unambiguous ``skill`` question."""
    for attempt in range(MAX_RETRIES):
        scene = generate_scene(rng, group_id, group, config)
        try:
            question, answer, referenced = instantiate_question(skill, scene, rng, vocab)
        except UnsatisfiableQuestion as exc:
            logger.debug("Retry %d for %s/g%d: %s", attempt + 1, skill.value, group_id, exc)
            continue
        return Triplet(
            features=render_features(scene, config),
            question=question,
            answer=answer,
            skill_id=skill_id,
            group_id=group_id,
            answer_space_id=ANSWER_SPACE[skill],
            categories=referenced,
            scene=scene,
        )
    raise ConfigError(
        f"No satisfiable {skill.value} question for group {group_id} after {MAX_RETRIES} scenes"
    )


# ──────────────── Schedule ────────────────

def build_schedule(config: BenchmarkConfig, fold: int) -> TaskSchedule:
    """Partition categories into K groups and order the (skill, group) sub-tasks."""
    n_groups, n_categories = config.n_groups, config.n_categories
    if n_groups > n_categories:
        raise ConfigError(f"n_groups={n_groups} exceeds n_categories={n_categories}")
    if not 0 <= fold < n_groups:
        raise ConfigError(f"fold must be in 0..{n_groups - 1}, got {fold}")

    order = derive_rng(config.seed, "schedule").permutation(n_categories)
    groups = [sorted(int(c) for c in order[k::n_groups]) for k in range(n_groups)]

    held_out = {s: (s + fold) % n_groups for s in range(len(config.skills))}
    tasks: List[SubTask] = []
    for s, skill in enumerate(config.skills):
        for g in range(n_groups):
            if g != held_out[s]:
                tasks.append(SubTask(index=len(tasks), skill=skill, skill_id=s, group_id=g, macro_index=s))
    novel = [
        SubTask(index=len(tasks) + s, skill=skill, skill_id=s, group_id=held_out[s],
                macro_index=s, role=TaskRole.NOVEL)
        for s, skill in enumerate(config.skills)
    ]
    return TaskSchedule(skills=list(config.skills), groups=groups, held_out_group=held_out,
                        fold=fold, tasks=tasks, novel=novel)


@dataclass
class TaskSplit:
    train: List[Triplet]
    val: List[Triplet]
    test: List[Triplet]
    novel_test: List[Triplet]

    def get(self, name: str) -> List[Triplet]:
        return getattr(self, name)


def _generate_split(sub_task: SubTask, schedule: TaskSchedule, split: str, size: int,
                    config: BenchmarkConfig, vocab: Vocabulary) -> List[Triplet]:
    # Keyed by (skill, group) rather than task position so data is fold-independent.
    group = schedule.groups[sub_task.group_id]
    skill_code = list(Skill).index(sub_task.skill)
    return [
        generate_triplet(
            derive_rng(config.seed, namespace(split), skill_code, sub_task.group_id, i),
            sub_task.skill, sub_task.skill_id, sub_task.group_id, group, config, vocab,
        )
        for i in range(size)
    ]


def generate_task_split(schedule: TaskSchedule, task_index: int, config: BenchmarkConfig,
                        sizes: Optional[SplitSizes] = None,
                        vocab: Optional[Vocabulary] = None) -> TaskSplit:
    """train/val/test from the task's (skill, group); novel_test from (skill, held-out group)."""
    sizes = sizes or config.sizes
    vocab = vocab or Vocabulary(config)
    task = schedule.tasks[task_index]
    novel = schedule.novel[task.skill_id]
    return TaskSplit(
        train=_generate_split(task, schedule, "train", sizes.train, config, vocab),
        val=_generate_split(task, schedule, "val", sizes.val, config, vocab),
        test=_generate_split(task, schedule, "test", sizes.test, config, vocab),
        novel_test=_generate_split(novel, schedule, NOVEL_SPLIT, sizes.novel_test, config, vocab),
    )


# ──────────────── Benchmark container ────────────────

class SyntheticBenchmark:
    """Schedule plus every split of one (config, fold), generated or loaded from disk."""

    MANIFEST = "manifest.json"

    def __init__(self, config: BenchmarkConfig, fold: int):
        self.config = config
        self.fold = fold
        self.vocab = Vocabulary(config)
        self.schedule = build_schedule(config, fold)
        # sub-task index -> split name -> triplets
        self._splits: Dict[int, Dict[str, List[Triplet]]] = {}

    # ── Access ──

    @property
    def sub_tasks(self) -> List[SubTask]:
        return self.schedule.tasks + self.schedule.novel

    def split(self, sub_task: SubTask, name: str) -> List[Triplet]:
        cached = self._splits.setdefault(sub_task.index, {})
        if name not in cached:
            size = getattr(self.config.sizes, name)
            cached[name] = _generate_split(sub_task, self.schedule, name, size, self.config, self.vocab)
        return cached[name]

    def task_split(self, task_index: int) -> TaskSplit:
        task = self.schedule.tasks[task_index]
        novel = self.schedule.novel[task.skill_id]
        return TaskSplit(
            train=self.split(task, "train"),
            val=self.split(task, "val"),
            test=self.split(task, "test"),
            novel_test=self.split(novel, NOVEL_SPLIT),
        )

    def macro_test(self, macro_index: int) -> List[Triplet]:
        """Standard test set of a macro-task: union of its training sub-tasks' test splits."""
        out: List[Triplet] = []
        for task in self.schedule.tasks_of_macro(macro_index):
            out.extend(self.split(task, "test"))
        return out

    def macro_novel_test(self, macro_index: int) -> List[Triplet]:
        return self.split(self.schedule.novel[macro_index], NOVEL_SPLIT)

    def _split_names(self, sub_task: SubTask) -> Tuple[str, ...]:
        return SPLITS if sub_task.role is TaskRole.TRAIN else (NOVEL_SPLIT,)

    def generate_all(self) -> None:
        for sub_task in self.sub_tasks:
            for name in self._split_names(sub_task):
                self.split(sub_task, name)

    # ── Persistence ──

    @staticmethod
    def _stem(sub_task: SubTask) -> str:
        return f"{sub_task.index:02d}_{sub_task.skill.value}_g{sub_task.group_id}"

    def export(self, directory: str | Path) -> BenchmarkManifest:
        """Write one JSON-lines file and one feature file per split, plus the manifest."""
        directory = Path(directory)
        files: Dict[str, str] = {}
        for sub_task in self.sub_tasks:
            for name in self._split_names(sub_task):
                triplets = self.split(sub_task, name)
                stem = f"{self._stem(sub_task)}/{name}"
                jsonl = write_jsonl(directory / f"{stem}.jsonl", (_triplet_record(t) for t in triplets))
                feats = write_tensor_file(
                    directory / f"{stem}.features.bin",
                    {"features": np.stack([t.features for t in triplets])},
                )
                for path in (jsonl, feats):
                    files[path.relative_to(directory).as_posix()] = sha256_file(path)

        manifest = BenchmarkManifest(
            config=self.config, seed=self.config.seed, fold=self.fold,
            sub_tasks=self.sub_tasks, files=files,
        )
        write_json(directory / self.MANIFEST, manifest.model_dump(mode="json"))
        logger.info("Exported %d sub-tasks (%d files) to %s", len(self.sub_tasks), len(files), directory)
        return manifest

    @classmethod
    def load(cls, directory: str | Path, expected: Optional[BenchmarkConfig] = None) -> "SyntheticBenchmark":
        """Load an exported benchmark, verifying every file against the manifest hashes."""
        directory = Path(directory)
        manifest_path = directory / cls.MANIFEST
        if not manifest_path.is_file():
            raise BenchmarkNotFoundError(
                f"No benchmark at {directory}; run the 'generate' command first"
            )
        try:
            manifest = BenchmarkManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
        except ValidationError as exc:
            raise BenchmarkIntegrityError(f"Unreadable manifest {manifest_path}: {exc}") from exc
        if expected is not None and manifest.config != expected:
            raise ConfigError(
                f"Benchmark at {directory} was generated with a different config; rerun 'generate'"
            )

        for rel, digest in manifest.files.items():
            path = directory / rel
            if not path.is_file():
                raise BenchmarkIntegrityError(f"Missing benchmark file {path}")
            if sha256_file(path) != digest:
                raise BenchmarkIntegrityError(f"Hash mismatch for {path}")

        bench = cls(manifest.config, manifest.fold)
        by_index = {t.index: t for t in bench.sub_tasks}
        for sub_task in manifest.sub_tasks:
            if by_index.get(sub_task.index) != sub_task:
                raise BenchmarkIntegrityError(f"Manifest sub-task {sub_task.name} does not match the schedule")
            for name in bench._split_names(sub_task):
                stem = directory / cls._stem(sub_task) / name
                features = read_tensor_file(stem.with_suffix(".features.bin"))["features"]
                records = list(read_jsonl(stem.with_suffix(".jsonl")))
                if len(records) != len(features):
                    raise BenchmarkIntegrityError(f"{stem}: {len(records)} records vs {len(features)} feature rows")
                group = bench.schedule.groups[sub_task.group_id]
                bench._splits.setdefault(sub_task.index, {})[name] = [
                    _triplet_from_record(rec, feat, group) for rec, feat in zip(records, features)
                ]
        logger.info("Loaded benchmark from %s (fold=%d)", directory, bench.fold)
        return bench


def _triplet_record(t: Triplet) -> dict:
    return {
        "question": t.question.tolist(),
        "answer": t.answer,
        "skill_id": t.skill_id,
        "group_id": t.group_id,
        "answer_space_id": t.answer_space_id,
        "categories": list(t.categories),
        "objects": t.scene.to_record(),
        "scene_seed": t.scene.seed,
    }


def _triplet_from_record(record: dict, features: np.ndarray, group: Sequence[int]) -> Triplet:
    scene = Scene(
        objects=tuple(ObjectInstance(*obj) for obj in record["objects"]),
        seed=record["scene_seed"],
        group_id=record["group_id"],
        group=tuple(group),
    )
    return Triplet(
        features=features,
        question=np.asarray(record["question"], dtype=np.int64),
        answer=record["answer"],
        skill_id=record["skill_id"],
        group_id=record["group_id"],
        answer_space_id=record["answer_space_id"],
        categories=tuple(record["categories"]),
        scene=scene,
    )
