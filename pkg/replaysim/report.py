"""Summary tables built from run records."""
import glob
import json
import logging
import os
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from replaysim.errors import ArtifactError
from replaysim.metrics import AccuracyMatrix, current_task_accuracy, previous_task_accuracy
from replaysim.utils import FLOAT_FORMAT, SUMMARY_CSV_HEADERS, mean_value, stdev_value

logger = logging.getLogger(__name__)

GROUP_COLUMNS = ["strategy", "variant", "scale"]


# -------------------------------------------------
# LOADING
# -------------------------------------------------

def load_records(run_dir: str) -> List[Dict]:
    if not os.path.isdir(run_dir):
        raise ArtifactError(f"run directory not found: {run_dir}")
    paths = glob.glob(os.path.join(run_dir, "record_*.json"))
    if not paths:
        raise ArtifactError(f"no record_<seed>.json files in {run_dir}")
    records = []
    for path in paths:
        try:
            with open(path) as f:
                records.append(json.load(f))
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"{path} is not valid JSON: {exc}") from exc
    return sorted(records, key=lambda r: r["seed"])


def record_metrics(record: Dict) -> Dict[str, float]:
    """Final-task metrics of one record; undefined ones are NaN."""
    rows = record.get("accuracy_matrix") or []
    metrics = {
        "avg_accuracy": record.get("avg_accuracy"),
        "avg_forgetting": record.get("avg_forgetting"),
        "prev_task_accuracy": None,
        "current_task_accuracy": None,
    }
    if rows:
        matrix = AccuracyMatrix.from_list(rows, record.get("num_tasks"))
        done = len(rows)
        metrics["current_task_accuracy"] = current_task_accuracy(matrix, done)
        if done >= 2:
            metrics["prev_task_accuracy"] = previous_task_accuracy(matrix, done)
    return {k: float("nan") if v is None else float(v) for k, v in metrics.items()}


# -------------------------------------------------
# SUMMARIES
# -------------------------------------------------

def _stat(values: Sequence[float], reducer) -> float:
    present = [v for v in values if not np.isnan(v)]
    return reducer(present) if present else float("nan")


def summary_row(records: Sequence[Dict]) -> Dict:
    """Mean and population std across seeds of the final-task metrics."""
    per_seed = [record_metrics(r) for r in records]
    labels = records[0].get("labels", {})

    def column(name):
        return [m[name] for m in per_seed]

    return {
        "strategy": labels.get("strategy", "custom"),
        "variant": labels.get("variant", ""),
        "scale": labels.get("scale", float("nan")),
        "seeds": len(records),
        "avg_accuracy_mean": _stat(column("avg_accuracy"), mean_value),
        "avg_accuracy_std": _stat(column("avg_accuracy"), stdev_value),
        "avg_forgetting_mean": _stat(column("avg_forgetting"), mean_value),
        "avg_forgetting_std": _stat(column("avg_forgetting"), stdev_value),
        "prev_task_accuracy_mean": _stat(column("prev_task_accuracy"), mean_value),
        "current_task_accuracy_mean": _stat(column("current_task_accuracy"), mean_value),
    }


def summary_frame(records: Sequence[Dict]) -> pd.DataFrame:
    """One row per (strategy, variant, scale) present in ``records``."""
    groups: Dict[tuple, List[Dict]] = {}
    for record in records:
        labels = record.get("labels", {})
        key = tuple(labels.get(c) for c in GROUP_COLUMNS)
        groups.setdefault(key, []).append(record)
    rows = [summary_row(group) for group in groups.values()]
    return pd.DataFrame(rows, columns=SUMMARY_CSV_HEADERS)


def write_summary(frame: pd.DataFrame, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("wrote %s", path)


def write_accuracy_matrix(record: Dict, path: str) -> None:
    matrix = AccuracyMatrix.from_list(record["accuracy_matrix"], record.get("num_tasks"))
    matrix.to_dataframe().to_csv(path, index=False, float_format=FLOAT_FORMAT)


def format_table(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}", na_rep="-")


def build_report(run_dir: str) -> pd.DataFrame:
    """Rebuild ``summary.csv`` of ``run_dir`` from its records."""
    frame = summary_frame(load_records(run_dir))
    write_summary(frame, os.path.join(run_dir, "summary.csv"))
    return frame
