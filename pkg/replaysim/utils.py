import csv
import enum
import os
import statistics
from typing import Any, Dict, Optional, Sequence

import numpy as np

# ============================================================
# GLOBAL CSV HEADERS (CONSISTENT ACROSS PROJECT)
# ============================================================

SUMMARY_CSV_HEADERS = [
    "strategy", "variant", "scale", "seeds",

    # Continual-learning metrics
    "avg_accuracy_mean", "avg_accuracy_std",
    "avg_forgetting_mean", "avg_forgetting_std",
    "prev_task_accuracy_mean", "current_task_accuracy_mean",
]

SWEEP_CSV_HEADERS = [
    "axis", "value", "strategy", "seeds",
    "avg_accuracy_mean", "avg_accuracy_std",
    "avg_forgetting_mean", "avg_forgetting_std",
    "prev_task_accuracy_mean", "current_task_accuracy_mean",

    # Runtime
    "wall_clock", "speedup",
]

FLOAT_FORMAT = "%.10g"

# ============================================================
# SEED SPLITTING
# ============================================================


class Stream(enum.IntEnum):
    """Independent random streams split off the run seed."""

    DATA = 0
    SPLIT = 1
    DENOISER_INIT = 2
    CLASSIFIER_INIT = 3
    CLASSIFIER_BATCHES = 4
    REHEARSAL = 5
    DIFFUSION_DATASET = 6
    DIFFUSION_TRAIN = 7
    PROBE = 8
    DEMO = 9


def derive_seed(root: int, *keys: int) -> int:
    """
    Deterministic child seed for (root, key_0, key_1, ...).

    Keys are a stream id followed by counters (task, step, ...), mapped onto
    numpy SeedSequence spawn keys so distinct key tuples never collide.
    """
    seq = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def make_rng(root: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))


# ============================================================
# BASIC STATISTICS
# ============================================================

def mean_value(values: Sequence[float]) -> float:
    return statistics.fmean(values) if values else float("nan")


def stdev_value(values: Sequence[float]) -> float:
    # population std: one seed (or identical seeds) reports exactly 0
    return statistics.pstdev(values) if len(values) > 1 else 0.0


def speedup(baseline_time: float, measured_time: float) -> float:
    return baseline_time / measured_time if measured_time > 0 else 0.0


def is_finite(value: float) -> bool:
    return bool(np.isfinite(value))


# ============================================================
# CSV LOGGING (SAFE & EXTENSIBLE)
# ============================================================

def save_results_csv(result: Dict[str, Any],
                     filename: str,
                     headers: Optional[Sequence[str]] = None) -> None:
    """
    Append one result row, creating the file with a header on first use.

    Keys not yet in the header extend it; existing rows are rewritten with
    blanks for the new columns.
    """
    headers = list(headers) if headers else list(result)

    os.makedirs(os.path.dirname(filename) or ".", exist_ok=True)
    file_exists = os.path.exists(filename)

    if file_exists:
        with open(filename, "r", newline="") as f:
            reader = csv.reader(f)
            existing = next(reader, [])
        headers = existing + [h for h in headers if h not in existing]

    # Expand headers if new fields appear
    missing = [k for k in result if k not in headers]
    headers = headers + missing
    if file_exists and headers != existing:
        with open(filename, "r", newline="") as f:
            rows = list(csv.DictReader(f))
        with open(filename, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=headers)
            writer.writeheader()
            for r in rows:
                writer.writerow({h: r.get(h, "") for h in headers})

    with open(filename, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=headers)
        if not file_exists:
            writer.writeheader()
        row = {h: "" for h in headers}
        for k, v in result.items():
            row[k] = FLOAT_FORMAT % v if isinstance(v, float) else v
        writer.writerow(row)
