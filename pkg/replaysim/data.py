"""
Synthetic low-dimensional class data and the class-incremental task stream.

Generators place classes in the first two coordinates; any further
coordinates carry isotropic noise only. Every feature is min-max scaled
onto [-1, 1]; constant features map to 0.
"""
import enum
import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.datasets import make_moons
from sklearn.preprocessing import MinMaxScaler

from replaysim.errors import ArtifactError, ConfigError, ContractError, DimensionError
from replaysim.utils import Stream, make_rng

logger = logging.getLogger(__name__)

ANCHOR_EXTENT = 0.75


class Generator(str, enum.Enum):
    GAUSSIAN_GRID = "gaussian_grid"
    RINGS = "rings"
    MOONS = "moons"


@dataclass(frozen=True)
class DatasetSpec:
    generator: Generator = Generator.GAUSSIAN_GRID
    dimension: int = 2
    classes: int = 10
    samples_per_class: int = 200
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "generator", Generator(self.generator))
        except ValueError:
            raise ConfigError(f"unknown generator {self.generator!r}", "data.generator") from None
        if not 2 <= self.dimension <= 16:
            raise ConfigError(f"dimension must lie in [2, 16], got {self.dimension}", "data.dimension")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}", "data.classes")
        if self.samples_per_class < 1:
            raise ConfigError(f"samples_per_class must be positive, got {self.samples_per_class}",
                              "data.samples_per_class")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be nonnegative, got {self.noise_std}", "data.noise_std")
        if self.generator is Generator.MOONS and self.classes % 2:
            raise ConfigError("moons generator needs an even class count", "data.classes")

    def to_dict(self) -> Dict:
        document = asdict(self)
        document["generator"] = self.generator.value
        return document


@dataclass(frozen=True)
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.size:
            raise DimensionError("dataset", x.shape, y.shape)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return int(self.y.size)

    @property
    def dimension(self) -> int:
        return int(self.x.shape[1])

    @property
    def classes(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.y))

    def of_classes(self, classes: Sequence[int]) -> "LabeledDataset":
        mask = np.isin(self.y, list(classes))
        return LabeledDataset(self.x[mask], self.y[mask])

    def class_counts(self) -> Dict[int, int]:
        ids, counts = np.unique(self.y, return_counts=True)
        return {int(c): int(n) for c, n in zip(ids, counts)}


def concat_datasets(parts: Sequence[LabeledDataset]) -> LabeledDataset:
    if not parts:
        raise ContractError("nothing to concatenate")
    return LabeledDataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


# =========================================================
# TASK STREAM
# =========================================================

@dataclass(frozen=True)
class Task:
    index: int
    classes: Tuple[int, ...]
    train: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True)
class Scenario:
    """Ordered tasks over disjoint class sets; task indices are 1-based."""

    tasks: Tuple[Task, ...]
    num_classes: int
    data_dim: int

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ContractError("scenario has no tasks")
        seen = set()
        for position, task in enumerate(self.tasks, start=1):
            if task.index != position:
                raise ContractError(f"task {position} carries index {task.index}")
            classes = set(task.classes)
            if not classes:
                raise ContractError(f"task {position} has an empty class set")
            if classes & seen:
                raise ContractError(f"task {position} repeats classes {sorted(classes & seen)}")
            seen |= classes
            for split in (task.train, task.test):
                stray = set(split.classes) - classes
                if stray:
                    raise ContractError(f"task {position} holds labels {sorted(stray)} outside its classes")
        if max(seen) >= self.num_classes:
            raise ContractError(f"class id {max(seen)} outside [0, {self.num_classes})")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def task(self, i: int) -> Task:
        if not 1 <= i <= self.num_tasks:
            raise ContractError(f"task index {i} outside [1, {self.num_tasks}]")
        return self.tasks[i - 1]

    def seen_classes(self, i: int) -> List[int]:
        return sorted(c for j in range(1, i + 1) for c in self.task(j).classes)

    def previous_classes(self, i: int) -> List[int]:
        return self.seen_classes(i - 1) if i > 1 else []

    def train_upto(self, i: int) -> LabeledDataset:
        return concat_datasets([self.task(j).train for j in range(1, i + 1)])


# =========================================================
# GENERATORS
# =========================================================

def grid_anchors(count: int, extent: float = ANCHOR_EXTENT) -> np.ndarray:
    """Row-major anchors on the smallest near-square grid inside [-extent, extent]^2."""
    cols = int(np.ceil(np.sqrt(count)))
    rows = int(np.ceil(count / cols))
    xs = np.linspace(-extent, extent, cols) if cols > 1 else np.zeros(1)
    ys = np.linspace(extent, -extent, rows) if rows > 1 else np.zeros(1)
    return np.array([(xs[k % cols], ys[k // cols]) for k in range(count)], dtype=np.float64)


def _gaussian_grid(spec: DatasetSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    anchors = grid_anchors(spec.classes)
    y = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    planar = anchors[y] + spec.noise_std * rng.standard_normal((y.size, 2))
    return planar, y


def _rings(spec: DatasetSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    # class k lives on the circle of radius extent * (k + 1) / classes
    y = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    radius = ANCHOR_EXTENT * (y + 1) / spec.classes
    theta = rng.uniform(0.0, 2.0 * np.pi, size=y.size)
    planar = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return planar + spec.noise_std * rng.standard_normal(planar.shape), y


def _moons(spec: DatasetSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    pairs = spec.classes // 2
    side = int(np.ceil(np.sqrt(pairs)))
    centers = grid_anchors(pairs, extent=0.5) if pairs > 1 else np.zeros((1, 2))
    half_width = ANCHOR_EXTENT if pairs == 1 else 0.45 / (side - 1)
    # make_moons spans x in [-1, 2]; map that width onto the cell
    factor = half_width / 1.5
    xs, ys = [], []
    for p in range(pairs):
        points, labels = make_moons(
            n_samples=(spec.samples_per_class, spec.samples_per_class),
            noise=spec.noise_std / factor if spec.noise_std > 0 else None,
            random_state=int(rng.integers(0, 2 ** 31 - 1)),
        )
        order = np.argsort(labels, kind="stable")
        xs.append((points[order] - np.array([0.5, 0.25])) * factor + centers[p])
        ys.append(labels[order] + 2 * p)
    return np.concatenate(xs), np.concatenate(ys)


_GENERATORS = {
    Generator.GAUSSIAN_GRID: _gaussian_grid,
    Generator.RINGS: _rings,
    Generator.MOONS: _moons,
}


def generate(spec: DatasetSpec) -> LabeledDataset:
    rng = make_rng(spec.seed, Stream.DATA)
    planar, y = _GENERATORS[spec.generator](spec, rng)
    if spec.dimension > 2:
        extra = spec.noise_std * rng.standard_normal((y.size, spec.dimension - 2))
        planar = np.concatenate([planar, extra], axis=1)
    scaler = MinMaxScaler(feature_range=(-1.0, 1.0))
    x = scaler.fit_transform(planar)
    x[:, scaler.data_range_ == 0] = 0.0
    # rounding can leave the extremes one ulp outside the box
    x = np.clip(x, -1.0, 1.0)
    logger.debug("generated %d %s samples in %d dimensions", y.size, spec.generator.value, spec.dimension)
    return LabeledDataset(x, y)


def split_tasks(dataset: LabeledDataset, classes_per_task: int, test_fraction: float = 0.2,
                seed: int = 0) -> Scenario:
    """
    Consecutive class groups of size ``classes_per_task`` become tasks; each
    class is split into train/test with ``test_fraction`` held out.
    """
    classes = dataset.classes
    num_classes = max(classes) + 1
    if classes_per_task < 1 or num_classes % classes_per_task:
        raise ConfigError(
            f"{num_classes} classes cannot be split into tasks of {classes_per_task}", "data.classes_per_task"
        )
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}", "data.test_fraction")

    rng = make_rng(seed, Stream.SPLIT)
    train_idx: Dict[int, np.ndarray] = {}
    test_idx: Dict[int, np.ndarray] = {}
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.y == c))
        n_test = max(1, int(round(test_fraction * idx.size)))
        if idx.size - n_test < 1:
            raise ConfigError(f"class {c} has too few samples ({idx.size}) for a train/test split",
                              "data.samples_per_class")
        test_idx[c], train_idx[c] = np.sort(idx[:n_test]), np.sort(idx[n_test:])

    tasks = []
    for position, start in enumerate(range(0, num_classes, classes_per_task), start=1):
        group = tuple(range(start, start + classes_per_task))
        train = np.concatenate([train_idx[c] for c in group])
        test = np.concatenate([test_idx[c] for c in group])
        tasks.append(Task(
            index=position,
            classes=group,
            train=LabeledDataset(dataset.x[train], dataset.y[train]),
            test=LabeledDataset(dataset.x[test], dataset.y[test]),
        ))
    logger.info("split %d classes into %d tasks", num_classes, len(tasks))
    return Scenario(tuple(tasks), num_classes=num_classes, data_dim=dataset.dimension)


# =========================================================
# CSV ROUND TRIP
# =========================================================

def dataset_frame(dataset: LabeledDataset) -> pd.DataFrame:
    frame = pd.DataFrame(dataset.x, columns=[f"x_{k}" for k in range(dataset.dimension)])
    frame["label"] = dataset.y
    return frame


def save_dataset(dataset: LabeledDataset, path: str, spec: Optional[DatasetSpec] = None) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    dataset_frame(dataset).to_csv(path, index=False, float_format="%.17g")
    with open(path + ".json", "w") as f:
        json.dump({"spec": spec.to_dict() if spec else None, "rows": len(dataset)}, f, indent=2, sort_keys=True)


def load_dataset(path: str) -> Tuple[LabeledDataset, Optional[DatasetSpec]]:
    if not os.path.exists(path):
        raise ArtifactError(f"dataset not found: {path}")
    frame = pd.read_csv(path, float_precision="round_trip")
    columns = [c for c in frame.columns if c.startswith("x_")]
    if "label" not in frame.columns or not columns:
        raise ArtifactError(f"{path} lacks x_* or label columns")
    spec = None
    sidecar = path + ".json"
    if os.path.exists(sidecar):
        with open(sidecar) as f:
            document = json.load(f)
        if document.get("spec"):
            spec = DatasetSpec(**document["spec"])
    return LabeledDataset(frame[columns].to_numpy(dtype=np.float64), frame["label"].to_numpy()), spec
