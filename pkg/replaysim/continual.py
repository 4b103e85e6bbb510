"""
Class-incremental training with diffusion generative replay.

For every task i the classifier trains first, on balanced batches mixing the
task's real data with a rehearsal cache sampled from the frozen task-(i-1)
diffusion model and regenerated every ``interval`` batches. The diffusion
model then trains on the task's data plus unguided samples of all previous
classes drawn from its own previous snapshot.
"""
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from tqdm import tqdm

from replaysim.classifier import ClassifierModel, accuracy, classifier_train_step
from replaysim.data import LabeledDataset, Scenario, Task, concat_datasets
from replaysim.diffusion import (
    DenoiserModel, NoiseSchedule, SamplerConfig, make_linear_schedule, sample, train_diffusion,
)
from replaysim.errors import ConfigError, ContractError, ProtocolError
from replaysim.guidance import GuidanceConfig, GuidanceVariant, sample_rehearsal
from replaysim.metrics import AccuracyMatrix, avg_accuracy, avg_forgetting
from replaysim.nn import state_hash
from replaysim.optim import OptimizerKind, make_optimizer
from replaysim.utils import Stream, derive_seed, make_rng

logger = logging.getLogger(__name__)

__all__ = [
    "Scenario", "Task", "ClassifierSettings", "DiffusionSettings", "TrainingConfig",
    "Models", "RehearsalCache", "TaskLog", "RunRecord",
    "balanced_class_counts", "build_balanced_batch", "refresh_rehearsal_cache",
    "train_task_classifier", "build_diffusion_dataset", "train_task_diffusion",
    "evaluate", "run_scenario", "train_joint_diffusion", "write_record",
]


# =========================================================
# CONFIGURATION
# =========================================================

@dataclass(frozen=True)
class ClassifierSettings:
    hidden: int = 64
    depth: int = 2
    optimizer: OptimizerKind = OptimizerKind.SGD
    lr_first_task: float = 0.1
    lr: float = 0.05
    weight_decay: float = 0.0
    steps_first_task: int = 1000
    steps: int = 1000
    batch_size: int = 64

    def __post_init__(self):
        try:
            object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        except ValueError:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", "classifier.optimizer") from None
        for key in ("hidden", "depth", "steps_first_task", "steps", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"must be positive, got {getattr(self, key)}", f"classifier.{key}")


@dataclass(frozen=True)
class DiffusionSettings:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: int = 128
    depth: int = 3
    time_embed_dim: int = 16
    class_embed_dim: int = 16
    steps_first_task: int = 3000
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    self_rehearsal_ddim_steps: int = 20

    def __post_init__(self):
        for key in ("num_steps", "hidden", "depth", "time_embed_dim", "class_embed_dim",
                    "steps_first_task", "steps", "batch_size", "self_rehearsal_ddim_steps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"must be positive, got {getattr(self, key)}", f"diffusion.{key}")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.num_steps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class TrainingConfig:
    """
    Everything one run needs besides the scenario. ``interval`` is the number of
    classifier batches between rehearsal regenerations; ``math.inf`` builds the
    cache once per task.
    """

    classifier: ClassifierSettings = field(default_factory=ClassifierSettings)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    ddim_steps: int = 10
    replay: bool = True
    interval: float = 5
    seed: int = 0
    archive_samples: bool = False
    save_checkpoints: bool = False
    record_timings: bool = False
    progress: bool = False

    def __post_init__(self):
        if self.ddim_steps < 1:
            raise ConfigError(f"ddim_steps must be positive, got {self.ddim_steps}", "sampler.ddim_steps")
        if not self.interval >= 1:
            raise ConfigError(f"interval must be at least 1, got {self.interval}", "rehearsal.interval")
        if math.isfinite(self.interval) and self.interval != int(self.interval):
            raise ConfigError(f"interval must be a whole number or inf, got {self.interval}", "rehearsal.interval")

    def classifier_steps(self, i: int) -> int:
        return self.classifier.steps_first_task if i == 1 else self.classifier.steps

    def diffusion_steps(self, i: int) -> int:
        return self.diffusion.steps_first_task if i == 1 else self.diffusion.steps

    def regenerates_at(self, step: int) -> bool:
        return step == 0 or (math.isfinite(self.interval) and step % int(self.interval) == 0)


# =========================================================
# RUN STATE
# =========================================================

@dataclass
class Models:
    classifier: ClassifierModel
    denoiser: DenoiserModel
    schedule: NoiseSchedule
    prev_classifier: Optional[ClassifierModel] = None
    prev_denoiser: Optional[DenoiserModel] = None

    def snapshot(self) -> None:
        """Freeze copies of the current models as the previous-task snapshots."""
        self.prev_classifier = self.classifier.clone()
        self.prev_denoiser = self.denoiser.clone()

    def snapshot_hashes(self) -> Dict[str, str]:
        hashes = {}
        if self.prev_classifier is not None:
            hashes["classifier"] = state_hash(self.prev_classifier)
        if self.prev_denoiser is not None:
            hashes["denoiser"] = state_hash(self.prev_denoiser)
        return hashes


@dataclass
class RehearsalCache:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return int(self.y.size)

    def class_histogram(self) -> Dict[int, int]:
        ids, counts = np.unique(self.y, return_counts=True)
        return {int(c): int(n) for c, n in zip(ids, counts)}


@dataclass
class TaskLog:
    task: int
    classifier_losses: List[float] = field(default_factory=list)
    diffusion_losses: List[float] = field(default_factory=list)
    cache_refreshes: int = 0
    diffusion_dataset_size: int = 0
    archived: Optional[RehearsalCache] = None
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, record_timings: bool = False) -> Dict[str, Any]:
        def summary(losses):
            if not losses:
                return None
            return {"first": losses[0], "last": losses[-1], "mean": float(np.mean(losses)), "steps": len(losses)}

        document = {
            "task": self.task,
            "classifier_loss": summary(self.classifier_losses),
            "diffusion_loss": summary(self.diffusion_losses),
            "cache_refreshes": self.cache_refreshes,
            "diffusion_dataset_size": self.diffusion_dataset_size,
            "archived_samples": len(self.archived) if self.archived is not None else 0,
        }
        if record_timings:
            document["timings"] = dict(sorted(self.timings.items()))
        return document


@dataclass
class RunRecord:
    seed: int
    matrix: AccuracyMatrix
    tasks: List[TaskLog] = field(default_factory=list)
    status: str = "running"
    error: Optional[str] = None
    labels: Dict[str, Any] = field(default_factory=dict)

    @property
    def final_avg_accuracy(self) -> Optional[float]:
        done = self.matrix.completed_tasks
        return avg_accuracy(self.matrix, done) if done else None

    @property
    def final_avg_forgetting(self) -> Optional[float]:
        done = self.matrix.completed_tasks
        return avg_forgetting(self.matrix, done) if done >= 2 else None

    def to_dict(self, record_timings: bool = False) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "status": self.status,
            "error": self.error,
            "labels": self.labels,
            "num_tasks": self.matrix.num_tasks,
            "completed_tasks": self.matrix.completed_tasks,
            "accuracy_matrix": self.matrix.to_list(),
            "avg_accuracy": self.final_avg_accuracy,
            "avg_forgetting": self.final_avg_forgetting,
            "tasks": [log.to_dict(record_timings) for log in self.tasks],
        }


def write_record(record: RunRecord, path: str, record_timings: bool = False) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(record.to_dict(record_timings), f, indent=2, sort_keys=True)
        f.write("\n")


# =========================================================
# BALANCED BATCHES
# =========================================================

def balanced_class_counts(classes, total: int) -> Dict[int, int]:
    """Split ``total`` evenly over ``classes``; the remainder goes to the lowest ids."""
    ids = sorted(int(c) for c in classes)
    if not ids:
        raise ContractError("class set is empty")
    if total < 0:
        raise ContractError(f"negative sample count {total}")
    base, extra = divmod(total, len(ids))
    return {c: base + (1 if rank < extra else 0) for rank, c in enumerate(ids)}


def rehearsal_size(batch_size: int, i: int) -> int:
    return (batch_size // i) * (i - 1)


def _real_batch(train: LabeledDataset, classes, count: int, rng: np.random.Generator):
    xs, ys = [], []
    for c, n in balanced_class_counts(classes, count).items():
        if n == 0:
            continue
        pool = np.flatnonzero(train.y == c)
        if pool.size == 0:
            raise ProtocolError(f"no training data for class {c}")
        idx = rng.choice(pool, size=n, replace=n > pool.size)
        xs.append(train.x[idx])
        ys.append(train.y[idx])
    return np.concatenate(xs), np.concatenate(ys)


def build_balanced_batch(task: Task, cache: Optional[RehearsalCache], i: int, batch_size: int,
                         rng: np.random.Generator):
    """
    Batch of ``batch_size`` rows: the whole rehearsal cache plus real task-i
    samples spread evenly over the current classes (remainder to the lowest id).
    """
    if i == 1:
        return _real_batch(task.train, task.classes, batch_size, rng)
    if cache is None or len(cache) == 0:
        raise ProtocolError(f"task {i} needs a rehearsal cache but it is empty")
    if len(cache) >= batch_size:
        raise ProtocolError(f"rehearsal cache ({len(cache)}) leaves no room for real samples in a batch of {batch_size}")
    x_real, y_real = _real_batch(task.train, task.classes, batch_size - len(cache), rng)
    return np.concatenate([cache.x, x_real]), np.concatenate([cache.y, y_real])


# =========================================================
# PER-TASK PHASES
# =========================================================

def refresh_rehearsal_cache(models: Models, scenario: Scenario, i: int, config: TrainingConfig,
                            step: int = 0) -> RehearsalCache:
    """Sample floor(B/i)*(i-1) guided rehearsal rows evenly over all previous classes."""
    if i < 2:
        raise ContractError(f"rehearsal starts at task 2, got task {i}")
    if models.prev_denoiser is None:
        raise ProtocolError("no frozen diffusion snapshot to rehearse from")
    previous = scenario.previous_classes(i)
    size = rehearsal_size(config.classifier.batch_size, i)
    if size < len(previous):
        raise ProtocolError(
            f"batch size {config.classifier.batch_size} gives {size} rehearsal rows for {len(previous)} previous classes"
        )
    counts = balanced_class_counts(previous, size)
    labels = np.repeat(np.array(list(counts), dtype=np.int64), list(counts.values()))
    sampler = SamplerConfig(ddim_steps=config.ddim_steps, seed=derive_seed(config.seed, Stream.REHEARSAL, i, step))
    x = sample_rehearsal(models.prev_denoiser, models.prev_classifier, models.classifier, labels,
                         scenario.task(i).classes, config.guidance, sampler, models.schedule)
    logger.debug("task %d step %d: regenerated %d rehearsal samples", i, step, size)
    return RehearsalCache(x, labels)


def train_task_classifier(scenario: Scenario, i: int, models: Models, config: TrainingConfig,
                          log: Optional[TaskLog] = None) -> ClassifierModel:
    log = log if log is not None else TaskLog(i)
    task = scenario.task(i)
    steps = config.classifier_steps(i)
    rehearse = i > 1 and config.replay
    if rehearse and math.isfinite(config.interval) and config.interval > steps:
        logger.warning("interval %s exceeds %d classifier steps; the cache is built once", config.interval, steps)

    lr = config.classifier.lr_first_task if i == 1 else config.classifier.lr
    optimizer = make_optimizer(config.classifier.optimizer, models.classifier.parameters(), lr,
                               weight_decay=config.classifier.weight_decay)
    rng = make_rng(config.seed, Stream.CLASSIFIER_BATCHES, i)
    frozen_before = models.snapshot_hashes()

    cache = None
    sampling_time = 0.0
    for step in tqdm(range(steps), desc=f"classifier task {i}", disable=not config.progress, leave=False):
        if rehearse:
            if config.regenerates_at(step):
                start = time.perf_counter()
                cache = refresh_rehearsal_cache(models, scenario, i, config, step)
                sampling_time += time.perf_counter() - start
                log.cache_refreshes += 1
            x, y = build_balanced_batch(task, cache, i, config.classifier.batch_size, rng)
        else:
            x, y = _real_batch(task.train, task.classes, config.classifier.batch_size, rng)
        log.classifier_losses.append(classifier_train_step(models.classifier, x, y, optimizer, task=i, step=step))

    if models.snapshot_hashes() != frozen_before:
        raise ProtocolError(f"frozen snapshots changed while training the task-{i} classifier")
    if rehearse and config.archive_samples:
        log.archived = cache
    log.timings["rehearsal_sampling"] = sampling_time
    logger.info("task %d classifier: %d steps, %d cache refreshes, final loss %.4f",
                i, steps, log.cache_refreshes, log.classifier_losses[-1])
    return models.classifier


def build_diffusion_dataset(prev_diffusion: Optional[DenoiserModel], scenario: Scenario, i: int,
                            config: TrainingConfig, schedule: NoiseSchedule) -> LabeledDataset:
    """Task i's data plus unguided samples of every previous class, as many as all earlier real data."""
    task = scenario.task(i)
    if i == 1:
        return task.train
    if prev_diffusion is None:
        raise ProtocolError("no frozen diffusion snapshot for self-rehearsal")
    total = sum(len(scenario.task(j).train) for j in range(1, i))
    counts = balanced_class_counts(scenario.previous_classes(i), total)
    labels = np.repeat(np.array(list(counts), dtype=np.int64), list(counts.values()))
    sampler = SamplerConfig(ddim_steps=config.diffusion.self_rehearsal_ddim_steps,
                            seed=derive_seed(config.seed, Stream.DIFFUSION_DATASET, i))
    synthetic = sample(prev_diffusion, labels, sampler, schedule)
    logger.info("task %d self-rehearsal: %d synthetic + %d real samples", i, total, len(task.train))
    return concat_datasets([LabeledDataset(synthetic, labels), task.train])


def train_task_diffusion(models: Models, dataset: LabeledDataset, i: int, config: TrainingConfig,
                         log: Optional[TaskLog] = None) -> DenoiserModel:
    log = log if log is not None else TaskLog(i)
    optimizer = make_optimizer(OptimizerKind.ADAMW, models.denoiser.parameters(), config.diffusion.lr,
                               weight_decay=config.diffusion.weight_decay)
    log.diffusion_losses.extend(train_diffusion(
        models.denoiser, dataset.x, dataset.y, models.schedule, optimizer,
        steps=config.diffusion_steps(i), batch_size=config.diffusion.batch_size,
        rng=make_rng(config.seed, Stream.DIFFUSION_TRAIN, i), task=i, progress=config.progress,
    ))
    return models.denoiser


def evaluate(classifier: ClassifierModel, scenario: Scenario, i: int) -> Dict[int, float]:
    """Accuracy on each seen task's test split, predicting over the classes seen so far."""
    seen = scenario.seen_classes(i)
    return {
        j: accuracy(classifier, scenario.task(j).test.x, scenario.task(j).test.y, seen)
        for j in range(1, i + 1)
    }


# =========================================================
# END TO END
# =========================================================

def build_models(scenario: Scenario, config: TrainingConfig, num_classes: Optional[int] = None) -> Models:
    num_classes = num_classes or scenario.num_classes
    d = config.diffusion
    denoiser = DenoiserModel(scenario.data_dim, num_classes, hidden=d.hidden, depth=d.depth,
                             time_embed_dim=d.time_embed_dim, class_embed_dim=d.class_embed_dim,
                             seed=derive_seed(config.seed, Stream.DENOISER_INIT))
    classifier = ClassifierModel(scenario.data_dim, num_classes, hidden=config.classifier.hidden,
                                 depth=config.classifier.depth,
                                 seed=derive_seed(config.seed, Stream.CLASSIFIER_INIT))
    return Models(classifier=classifier, denoiser=denoiser, schedule=d.schedule())


def _save_checkpoints(models: Models, directory: str, i: int) -> None:
    models.denoiser.save(os.path.join(directory, f"denoiser_task{i}.json"), models.schedule)
    models.classifier.save(os.path.join(directory, f"classifier_task{i}.json"))


def run_scenario(scenario: Scenario, config: TrainingConfig, checkpoint_dir: Optional[str] = None,
                 record_path: Optional[str] = None, labels: Optional[Dict[str, Any]] = None) -> RunRecord:
    """
    Train the classifier and diffusion model through every task, filling the
    accuracy matrix after each classifier phase. A failing run still writes its
    partial record (status ``failed``) before the error propagates.
    """
    record = RunRecord(seed=config.seed, matrix=AccuracyMatrix(scenario.num_tasks), labels=dict(labels or {}))
    variant = config.guidance.variant.value if config.replay else GuidanceVariant.NONE.value
    logger.info("run seed=%d: %d tasks, replay=%s, guidance=%s scale=%g, interval=%s",
                config.seed, scenario.num_tasks, config.replay, variant, config.guidance.scale, config.interval)
    try:
        models = build_models(scenario, config)
        for i in range(1, scenario.num_tasks + 1):
            log = TaskLog(i)
            record.tasks.append(log)
            if i > 1:
                models.snapshot()

            start = time.perf_counter()
            train_task_classifier(scenario, i, models, config, log)
            log.timings["classifier"] = time.perf_counter() - start

            for j, value in evaluate(models.classifier, scenario, i).items():
                record.matrix.record(i, j, value)
            logger.info("after task %d: avg accuracy %.4f", i, avg_accuracy(record.matrix, i))

            if config.replay:
                start = time.perf_counter()
                dataset = build_diffusion_dataset(models.prev_denoiser, scenario, i, config, models.schedule)
                log.diffusion_dataset_size = len(dataset)
                train_task_diffusion(models, dataset, i, config, log)
                log.timings["diffusion"] = time.perf_counter() - start

            if checkpoint_dir and config.save_checkpoints:
                _save_checkpoints(models, checkpoint_dir, i)
    except Exception as exc:
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        logger.error("run seed=%d failed: %s", config.seed, record.error)
        if record_path:
            write_record(record, record_path, config.record_timings)
        raise

    record.status = "completed"
    if record_path:
        write_record(record, record_path, config.record_timings)
    return record


def train_joint_diffusion(scenario: Scenario, i: int, config: TrainingConfig,
                          seed: Optional[int] = None) -> DenoiserModel:
    """
    A fresh diffusion model trained on the real data of tasks 1..i with the
    step budget the continual model received over those tasks.
    """
    seed = config.seed if seed is None else seed
    data = scenario.train_upto(i)
    d = config.diffusion
    model = DenoiserModel(scenario.data_dim, scenario.num_classes, hidden=d.hidden, depth=d.depth,
                          time_embed_dim=d.time_embed_dim, class_embed_dim=d.class_embed_dim,
                          seed=derive_seed(seed, Stream.DENOISER_INIT))
    budget = sum(config.diffusion_steps(j) for j in range(1, i + 1))
    optimizer = make_optimizer(OptimizerKind.ADAMW, model.parameters(), d.lr, weight_decay=d.weight_decay)
    train_diffusion(model, data.x, data.y, d.schedule(), optimizer, steps=budget, batch_size=d.batch_size,
                    rng=make_rng(seed, Stream.DIFFUSION_TRAIN, 0), task=0, progress=config.progress)
    logger.info("joint diffusion over tasks 1..%d trained for %d steps", i, budget)
    return model
