"""Continual-learning metrics, k-NN precision/recall and embedding export."""
import logging
import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import pairwise_distances
from sklearn.neighbors import NearestNeighbors

from replaysim.classifier import ClassifierModel
from replaysim.errors import ContractError

logger = logging.getLogger(__name__)

MATRIX_COLUMNS = ["task_trained", "task_evaluated", "accuracy"]


@dataclass
class AccuracyMatrix:
    """
    A[j][i]: accuracy after training ``i`` tasks, evaluated on task ``j``'s
    test split. Defined for 1 <= j <= i <= num_tasks.
    """

    num_tasks: int
    entries: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def record(self, trained: int, evaluated: int, value: float) -> None:
        if not 1 <= evaluated <= trained <= self.num_tasks:
            raise ContractError(f"entry (evaluated={evaluated}, trained={trained}) outside the lower triangle")
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"accuracy {value} outside [0, 1]")
        self.entries[(evaluated, trained)] = float(value)

    def get(self, evaluated: int, trained: int) -> float:
        try:
            return self.entries[(evaluated, trained)]
        except KeyError:
            raise ContractError(f"no accuracy for task {evaluated} after training {trained} tasks") from None

    def row_complete(self, trained: int) -> bool:
        return all((j, trained) in self.entries for j in range(1, trained + 1))

    @property
    def completed_tasks(self) -> int:
        done = 0
        while done < self.num_tasks and self.row_complete(done + 1):
            done += 1
        return done

    def to_rows(self) -> List[Dict]:
        return [
            {"task_trained": i, "task_evaluated": j, "accuracy": self.entries[(j, i)]}
            for (j, i) in sorted(self.entries, key=lambda key: (key[1], key[0]))
        ]

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.to_rows(), columns=MATRIX_COLUMNS)

    def to_list(self) -> List[List[float]]:
        """Row ``i - 1`` holds [A_1^i, ..., A_i^i] for every completed i."""
        return [[self.get(j, i) for j in range(1, i + 1)] for i in range(1, self.completed_tasks + 1)]

    @classmethod
    def from_list(cls, rows: Sequence[Sequence[float]], num_tasks: Optional[int] = None) -> "AccuracyMatrix":
        matrix = cls(num_tasks or len(rows))
        for i, row in enumerate(rows, start=1):
            if len(row) != i:
                raise ContractError(f"row {i} has {len(row)} entries, expected {i}")
            for j, value in enumerate(row, start=1):
                matrix.record(i, j, value)
        return matrix


def _require_row(matrix: AccuracyMatrix, i: int) -> None:
    if not 1 <= i <= matrix.num_tasks:
        raise ContractError(f"task count {i} outside [1, {matrix.num_tasks}]")
    if not matrix.row_complete(i):
        raise ContractError(f"accuracy row after task {i} is incomplete")


def avg_accuracy(matrix: AccuracyMatrix, i: int) -> float:
    """A-bar_i = (1/i) sum_j A_j^i."""
    _require_row(matrix, i)
    return statistics.fmean(matrix.get(j, i) for j in range(1, i + 1))


def avg_forgetting(matrix: AccuracyMatrix, i: int) -> float:
    """F-bar_i = (1/(i-1)) sum_{j<i} max_{j<=k<=i} (A_j^k - A_j^i); never negative."""
    if i < 2:
        raise ContractError(f"forgetting needs at least 2 tasks, got {i}")
    for k in range(1, i + 1):
        _require_row(matrix, k)
    drops = [
        max(matrix.get(j, k) - matrix.get(j, i) for k in range(j, i + 1))
        for j in range(1, i)
    ]
    return statistics.fmean(drops)


def previous_task_accuracy(matrix: AccuracyMatrix, i: int) -> float:
    """Mean accuracy over tasks 1..i-1 after training task i."""
    if i < 2:
        raise ContractError(f"no previous tasks before task {i}")
    _require_row(matrix, i)
    return statistics.fmean(matrix.get(j, i) for j in range(1, i))


def current_task_accuracy(matrix: AccuracyMatrix, i: int) -> float:
    _require_row(matrix, i)
    return matrix.get(i, i)


# =========================================================
# PRECISION / RECALL
# =========================================================

def _knn_radii(points: np.ndarray, k: int) -> np.ndarray:
    # column 0 is the point itself
    distances, _ = NearestNeighbors(n_neighbors=k + 1).fit(points).kneighbors(points)
    return distances[:, k]


def _inside(queries: np.ndarray, support: np.ndarray, radii: np.ndarray) -> np.ndarray:
    return np.any(pairwise_distances(queries, support) <= radii[None, :], axis=1)


def knn_precision_recall(real_set: np.ndarray, generated_set: np.ndarray, k: int = 3) -> Dict[str, float]:
    """
    Each set's manifold is the union of balls reaching every point's k-th
    nearest neighbour. Precision: generated points inside the real manifold.
    Recall: real points inside the generated manifold.
    """
    real = np.atleast_2d(np.asarray(real_set, dtype=np.float64))
    generated = np.atleast_2d(np.asarray(generated_set, dtype=np.float64))
    if real.size == 0 or generated.size == 0:
        raise ContractError("precision/recall needs two nonempty sets")
    if real.shape[1] != generated.shape[1]:
        raise ContractError(f"feature widths differ: {real.shape[1]} vs {generated.shape[1]}")
    if k < 1 or k >= real.shape[0] or k >= generated.shape[0]:
        raise ContractError(f"k={k} needs 1 <= k < min set size ({min(real.shape[0], generated.shape[0])})")

    precision = float(np.mean(_inside(generated, real, _knn_radii(real, k))))
    recall = float(np.mean(_inside(real, generated, _knn_radii(generated, k))))
    return {"precision": precision, "recall": recall}


# =========================================================
# EMBEDDINGS
# =========================================================

def export_embeddings(classifier: ClassifierModel, samples: np.ndarray, labels: np.ndarray,
                      source: str) -> pd.DataFrame:
    """One row per sample: penultimate features f_*, label and a source tag."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    features = classifier.features(samples)
    frame = pd.DataFrame(features, columns=[f"f_{k}" for k in range(features.shape[1])])
    frame["label"] = np.broadcast_to(np.asarray(labels, dtype=np.int64), (samples.shape[0],))
    frame["source"] = source
    return frame


def centroid_distance(embeddings: pd.DataFrame, source_a: str, source_b: str) -> float:
    """Euclidean distance between the feature centroids of two sources."""
    columns = [c for c in embeddings.columns if c.startswith("f_")]
    a = embeddings.loc[embeddings["source"] == source_a, columns]
    b = embeddings.loc[embeddings["source"] == source_b, columns]
    if a.empty or b.empty:
        raise ContractError(f"no embeddings for {source_a!r} or {source_b!r}")
    return float(np.linalg.norm(a.mean().to_numpy() - b.mean().to_numpy()))
