import numpy as np
import pytest

from replaysim import metrics
from replaysim.classifier import ClassifierModel
from replaysim.errors import ContractError
from replaysim.metrics import AccuracyMatrix


def _matrix(rows):
    return AccuracyMatrix.from_list(rows)


def _naive(full, i):
    """Averages straight from a dense (evaluated, trained) array with NaN above the diagonal."""
    acc = np.nanmean(full[:i, i - 1])
    if i < 2:
        return acc, None
    drops = [np.nanmax(full[j, j:i]) - full[j, i - 1] for j in range(i - 1)]
    return acc, float(np.mean(drops))


def test_worked_examples():
    assert metrics.avg_accuracy(_matrix([[0.9]]), 1) == pytest.approx(0.9)
    matrix = _matrix([[0.9], [0.8, 0.85]])
    assert metrics.avg_accuracy(matrix, 2) == pytest.approx(0.825)
    assert metrics.avg_forgetting(matrix, 2) == pytest.approx(0.1)
    assert metrics.previous_task_accuracy(matrix, 2) == pytest.approx(0.8)
    assert metrics.current_task_accuracy(matrix, 2) == pytest.approx(0.85)


def test_constant_and_improving_matrices():
    constant = _matrix([[0.7], [0.7, 0.7], [0.7, 0.7, 0.7]])
    assert metrics.avg_accuracy(constant, 3) == pytest.approx(0.7)
    improving = _matrix([[0.5], [0.6, 0.5], [0.9, 0.7, 0.8]])
    assert metrics.avg_forgetting(improving, 3) == 0.0


def test_matches_naive_evaluator_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        full = np.full((n, n), np.nan)
        rows = []
        for i in range(n):
            row = rng.uniform(0, 1, size=i + 1)
            full[: i + 1, i] = row
            rows.append(row.tolist())
        matrix = _matrix(rows)
        for i in range(1, n + 1):
            acc, forgetting = _naive(full, i)
            assert metrics.avg_accuracy(matrix, i) == pytest.approx(acc, abs=1e-12)
            if forgetting is not None:
                value = metrics.avg_forgetting(matrix, i)
                assert value == pytest.approx(forgetting, abs=1e-12)
                assert value >= 0.0


def test_matrix_contracts():
    matrix = AccuracyMatrix(3)
    with pytest.raises(ContractError):
        matrix.record(1, 2, 0.5)
    with pytest.raises(ContractError):
        matrix.record(1, 1, 1.2)
    matrix.record(1, 1, 0.9)
    matrix.record(2, 2, 0.8)
    assert matrix.completed_tasks == 1
    with pytest.raises(ContractError, match="incomplete"):
        metrics.avg_accuracy(matrix, 2)
    with pytest.raises(ContractError):
        metrics.avg_forgetting(matrix, 1)
    with pytest.raises(ContractError):
        AccuracyMatrix.from_list([[0.5, 0.5]])


def test_matrix_rows():
    matrix = _matrix([[0.9], [0.8, 0.85]])
    assert matrix.to_rows() == [
        {"task_trained": 1, "task_evaluated": 1, "accuracy": 0.9},
        {"task_trained": 2, "task_evaluated": 1, "accuracy": 0.8},
        {"task_trained": 2, "task_evaluated": 2, "accuracy": 0.85},
    ]
    assert list(matrix.to_dataframe().columns) == metrics.MATRIX_COLUMNS
    assert matrix.to_list() == [[0.9], [0.8, 0.85]]


# =========================================================
# PRECISION / RECALL
# =========================================================

def test_identical_sets_are_fully_covered():
    points = np.random.default_rng(1).normal(size=(40, 2))
    assert metrics.knn_precision_recall(points, points.copy()) == {"precision": 1.0, "recall": 1.0}


def test_collapsed_generator_has_low_recall():
    real = np.random.default_rng(2).normal(size=(200, 2))
    generated = np.repeat(real[:1], 10, axis=0)
    result = metrics.knn_precision_recall(real, generated, k=3)
    assert result["precision"] == 1.0
    assert result["recall"] < 0.05


def test_swapping_sets_swaps_scores():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(60, 3)), rng.normal(loc=0.5, size=(45, 3))
    forward, backward = metrics.knn_precision_recall(a, b, k=4), metrics.knn_precision_recall(b, a, k=4)
    assert forward["precision"] == backward["recall"]
    assert forward["recall"] == backward["precision"]


def test_knn_contracts():
    points = np.zeros((3, 2))
    with pytest.raises(ContractError):
        metrics.knn_precision_recall(points, points, k=3)
    with pytest.raises(ContractError):
        metrics.knn_precision_recall(points, np.zeros((5, 3)), k=1)
    with pytest.raises(ContractError):
        metrics.knn_precision_recall(np.zeros((0, 2)), points)


# =========================================================
# EMBEDDINGS
# =========================================================

def test_export_embeddings():
    model = ClassifierModel(2, 4, hidden=12)
    samples = np.random.default_rng(4).uniform(-1, 1, size=(7, 2))
    frame = metrics.export_embeddings(model, samples, 3, "GUIDE")
    assert len(frame) == 7
    assert [c for c in frame.columns if c.startswith("f_")] == [f"f_{k}" for k in range(12)]
    assert set(frame["source"]) == {"GUIDE"}
    assert set(frame["label"]) == {3}


def test_centroid_distance():
    model = ClassifierModel(2, 4, hidden=12)
    samples = np.random.default_rng(5).uniform(-1, 1, size=(10, 2))
    frame = metrics.export_embeddings(model, samples, np.zeros(10), "real")
    both = frame.assign(source=["real"] * 5 + ["NONE"] * 5)
    assert metrics.centroid_distance(frame, "real", "real") == 0.0
    assert metrics.centroid_distance(both, "real", "NONE") >= 0.0
    with pytest.raises(ContractError):
        metrics.centroid_distance(frame, "real", "GUIDE")
