import argparse
import functools
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from replaysim.classifier import ClassifierModel, ProbeConfig, boundary_flip_rate, train_classifier
from replaysim.config import ExperimentConfig, load_config, parse_values, write_config
from replaysim.continual import balanced_class_counts, run_scenario, train_joint_diffusion
from replaysim.data import LabeledDataset, concat_datasets, dataset_frame, generate, load_dataset
from replaysim.diffusion import DenoiserModel, SamplerConfig, sample, train_diffusion
from replaysim.errors import ArtifactError, ConfigError, ReplaySimError
from replaysim.guidance import GuidanceConfig, dual_guided_sample, sample_rehearsal
from replaysim.metrics import export_embeddings, knn_precision_recall
from replaysim.optim import OptimizerKind, make_optimizer
from replaysim.report import (
    build_report, format_table, summary_frame, summary_row, write_accuracy_matrix, write_summary,
)
from replaysim.utils import (
    FLOAT_FORMAT, SWEEP_CSV_HEADERS, Stream, derive_seed, make_rng, save_results_csv, speedup,
)

logger = logging.getLogger("replaysim")

SWEEP_AXES = {
    "scale": ("guidance.scale", float),
    "window": ("guidance.window", float),
    "ddim_steps": ("sampler.ddim_steps", int),
    "interval": ("rehearsal.interval", float),
}

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_ARTIFACT = 3


def exit_codes(command):
    """Map the error hierarchy onto process exit codes."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs) -> int:
        try:
            return command(*args, **kwargs)
        except ConfigError as exc:
            logger.error("configuration error: %s", exc)
            return EXIT_USAGE
        except ArtifactError as exc:
            logger.error("missing or invalid artifact: %s", exc)
            return EXIT_ARTIFACT
        except ReplaySimError as exc:
            logger.error("%s: %s", type(exc).__name__, exc)
            return EXIT_FAILURE

    return wrapper


def _write_frame(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("wrote %s", path)


# =================================================
# RUN
# =================================================

def _run_seed(config: ExperimentConfig, seed: int, output_dir: str, progress: bool) -> Dict:
    training = replace(config.for_seed(seed), progress=progress)
    record = run_scenario(
        config.scenario(), training,
        checkpoint_dir=os.path.join(output_dir, f"checkpoints_{seed}"),
        record_path=os.path.join(output_dir, f"record_{seed}.json"),
        labels=config.labels(),
    )
    document = record.to_dict(training.record_timings)
    write_accuracy_matrix(document, os.path.join(output_dir, f"accuracy_matrix_{seed}.csv"))
    for log in record.tasks:
        if log.archived is not None:
            frame = dataset_frame(LabeledDataset(log.archived.x, log.archived.y))
            _write_frame(frame, os.path.join(output_dir, f"rehearsal_{seed}_task{log.task}.csv"))
    return document


def _run_seeds(config: ExperimentConfig, output_dir: str, workers: int, progress: bool) -> List[Dict]:
    if workers > 1 and len(config.seeds) > 1:
        logger.info("running %d seeds on %d worker processes", len(config.seeds), workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_seed, config, seed, output_dir, False) for seed in config.seeds]
            return [f.result() for f in futures]
    return [_run_seed(config, seed, output_dir, progress) for seed in config.seeds]


@exit_codes
def cmd_run(config_path: str, output_dir: Optional[str] = None, overrides: Optional[Dict[str, str]] = None,
            workers: Optional[int] = None, progress: bool = False) -> int:
    config = load_config(config_path, overrides)
    output_dir = output_dir or config.output_dir
    os.makedirs(output_dir, exist_ok=True)
    write_config(config, os.path.join(output_dir, "config.ini"))

    records = _run_seeds(config, output_dir, workers or config.workers, progress)

    frame = summary_frame(records)
    write_summary(frame, os.path.join(output_dir, "summary.csv"))
    print(f"\n{config.name}: {config.strategy} over seeds {', '.join(map(str, config.seeds))}\n")
    print(format_table(frame))
    return EXIT_OK


# =================================================
# SWEEP
# =================================================

@exit_codes
def cmd_sweep(config_path: str, axis: str, values: Sequence, output_dir: Optional[str] = None,
              overrides: Optional[Dict[str, str]] = None, progress: bool = False) -> int:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown axis {axis!r}; choose from {', '.join(SWEEP_AXES)}", "axis")
    key, kind = SWEEP_AXES[axis]
    if isinstance(values, str):
        values = parse_values(values, kind)
    if not values:
        raise ConfigError("no sweep values given", "values")

    base = load_config(config_path, overrides)
    output_dir = output_dir or base.output_dir
    path = os.path.join(output_dir, f"sweep_{axis}.csv")
    if os.path.exists(path):
        os.remove(path)

    baseline = None
    for value in values:
        config = load_config(config_path, {**(overrides or {}), key: str(value)})
        start = time.perf_counter()
        records = [
            run_scenario(config.scenario(), replace(config.for_seed(seed), progress=progress),
                         labels=config.labels()).to_dict()
            for seed in config.seeds
        ]
        wall_clock = time.perf_counter() - start
        baseline = wall_clock if baseline is None else baseline

        summary = summary_row(records)
        row = {h: summary[h] for h in SWEEP_CSV_HEADERS if h in summary}
        row.update({
            "axis": axis,
            "value": value,
            "strategy": config.strategy,
            "wall_clock": wall_clock,
            "speedup": speedup(baseline, wall_clock),
        })
        save_results_csv(row, path, SWEEP_CSV_HEADERS)
        logger.info("sweep %s=%s: avg accuracy %.4f in %.1fs", axis, value, row["avg_accuracy_mean"], wall_clock)

    print(f"\nSweep over {axis}\n")
    print(format_table(pd.read_csv(path)))
    return EXIT_OK


# =================================================
# PROBE
# =================================================

def _load_run_config(run_dir: str) -> ExperimentConfig:
    path = os.path.join(run_dir, "config.ini")
    if not os.path.exists(path):
        raise ArtifactError(f"no config.ini in {run_dir}; is it a run directory?")
    return load_config(path)


def _recall_rows(config: ExperimentConfig, run_dir: str, seed: int, i: int) -> List[Dict]:
    scenario = config.scenario()
    continual, schedule = DenoiserModel.from_checkpoint(
        os.path.join(run_dir, f"checkpoints_{seed}", f"denoiser_task{i}.json"))
    joint = train_joint_diffusion(scenario, i, config.for_seed(seed), seed)
    real = scenario.task(1).train
    sampler = SamplerConfig(config.training.diffusion.self_rehearsal_ddim_steps,
                            seed=derive_seed(seed, Stream.PROBE, 0))
    rows = []
    for name, model in (("continual", continual), ("joint", joint)):
        generated = sample(model, real.y, sampler, schedule)
        rows.append({"model": name, "seed": seed, "task": i, **knn_precision_recall(real.x, generated, k=3)})
    return rows


@exit_codes
def cmd_probe(run_dir: str, epsilon: Optional[float] = None, samples: Optional[int] = None,
              variants: Optional[Sequence[str]] = None, seed: Optional[int] = None,
              task: Optional[int] = None, recall: bool = False) -> int:
    config = _load_run_config(run_dir)
    scenario = config.scenario()
    seed = config.seeds[0] if seed is None else seed
    i = scenario.num_tasks if task is None else task
    if not 2 <= i <= scenario.num_tasks:
        raise ConfigError(f"probing needs a task in [2, {scenario.num_tasks}], got {i}", "task")

    checkpoints = os.path.join(run_dir, f"checkpoints_{seed}")
    prev_denoiser, schedule = DenoiserModel.from_checkpoint(os.path.join(checkpoints, f"denoiser_task{i - 1}.json"))
    prev_classifier = ClassifierModel.from_checkpoint(os.path.join(checkpoints, f"classifier_task{i - 1}.json"))
    classifier = ClassifierModel.from_checkpoint(os.path.join(checkpoints, f"classifier_task{i}.json"))

    probe = ProbeConfig(epsilon=config.probe.epsilon if epsilon is None else epsilon)
    count = config.probe.samples if samples is None else samples
    current = scenario.task(i).classes
    counts = balanced_class_counts(scenario.previous_classes(i), count)
    labels = np.repeat(np.array(list(counts), dtype=np.int64), list(counts.values()))
    sampler = SamplerConfig(config.training.ddim_steps, seed=derive_seed(seed, Stream.PROBE, i))

    previous_test = concat_datasets([scenario.task(j).test for j in range(1, i)])
    embeddings = [
        export_embeddings(classifier, previous_test.x, previous_test.y, "real_previous"),
        export_embeddings(classifier, scenario.task(i).test.x, scenario.task(i).test.y, "real_current"),
    ]
    rows = []
    for variant in variants or [v.value for v in config.probe.variants]:
        guidance = GuidanceConfig(variant=variant, scale=config.training.guidance.scale,
                                  full_backprop=config.training.guidance.full_backprop,
                                  window=config.training.guidance.window)
        x = sample_rehearsal(prev_denoiser, prev_classifier, classifier, labels, current,
                             guidance, sampler, schedule)
        name = guidance.variant.value
        rows.append({"variant": name, "seed": seed, "task": i,
                     **boundary_flip_rate(classifier, x, labels, probe, current, prev_classifier)})
        _write_frame(dataset_frame(LabeledDataset(x, labels)), os.path.join(run_dir, f"samples_{name}.csv"))
        embeddings.append(export_embeddings(classifier, x, labels, name))

    archived_path = os.path.join(run_dir, f"rehearsal_{seed}_task{i}.csv")
    if os.path.exists(archived_path):
        archived, _ = load_dataset(archived_path)
        rows.append({"variant": "archived", "seed": seed, "task": i,
                     **boundary_flip_rate(classifier, archived.x, archived.y, probe, current, prev_classifier)})

    frame = pd.DataFrame(rows)
    _write_frame(frame, os.path.join(run_dir, "probe.csv"))
    _write_frame(pd.concat(embeddings, ignore_index=True), os.path.join(run_dir, "embeddings.csv"))
    print(f"\nBoundary probe after task {i} (seed {seed}, epsilon {probe.epsilon})\n")
    print(format_table(frame))

    if recall:
        recall_frame = pd.DataFrame(_recall_rows(config, run_dir, seed, i))
        _write_frame(recall_frame, os.path.join(run_dir, "recall.csv"))
        print("\nTask-1 precision / recall\n")
        print(format_table(recall_frame))
    return EXIT_OK


# =================================================
# DUAL-GUIDANCE DEMO
# =================================================

@exit_codes
def cmd_demo_dual(config_path: str, output_dir: Optional[str] = None,
                  overrides: Optional[Dict[str, str]] = None, progress: bool = False) -> int:
    config = load_config(config_path, overrides)
    output_dir = output_dir or config.output_dir
    seed = config.seeds[0]
    dual = config.dual
    training = config.training
    dataset = generate(config.dataset)

    # unconditional diffusion model on the training classes only
    seen = dataset.of_classes(dual.train_classes)
    d = training.diffusion
    denoiser = DenoiserModel(dataset.dimension, config.dataset.classes, hidden=d.hidden, depth=d.depth,
                             time_embed_dim=d.time_embed_dim, class_embed_dim=d.class_embed_dim,
                             seed=derive_seed(seed, Stream.DENOISER_INIT))
    schedule = d.schedule()
    null_labels = np.full(len(seen), denoiser.null_class, dtype=np.int64)
    train_diffusion(denoiser, seen.x, null_labels, schedule,
                    make_optimizer(OptimizerKind.ADAMW, denoiser.parameters(), d.lr, weight_decay=d.weight_decay),
                    steps=d.steps_first_task, batch_size=d.batch_size,
                    rng=make_rng(seed, Stream.DEMO, 0), progress=progress)

    # the classifier knows every class, c2 included
    c = training.classifier
    classifier = ClassifierModel(dataset.dimension, config.dataset.classes, hidden=c.hidden, depth=c.depth,
                                 seed=derive_seed(seed, Stream.CLASSIFIER_INIT))
    train_classifier(classifier, dataset.x, dataset.y,
                     make_optimizer(c.optimizer, classifier.parameters(), c.lr_first_task,
                                    weight_decay=c.weight_decay),
                     steps=c.steps_first_task, batch_size=c.batch_size,
                     rng=make_rng(seed, Stream.DEMO, 1), progress=progress)

    sampler = SamplerConfig(training.ddim_steps, seed=derive_seed(seed, Stream.DEMO, 2))
    x = dual_guided_sample(denoiser, classifier, dual.guidance, sampler, schedule, dual.samples)

    logits = classifier.logits(x)
    frame = pd.DataFrame(x, columns=[f"x_{k}" for k in range(x.shape[1])])
    frame["preset"] = dual.preset
    for k in range(logits.shape[1]):
        frame[f"logit_{k}"] = logits[:, k]
    frame["predicted"] = np.argmax(logits, axis=1)

    os.makedirs(output_dir, exist_ok=True)
    _write_frame(frame, os.path.join(output_dir, "samples_dual.csv"))
    g = dual.guidance
    print(f"\nDual guidance ({dual.preset}): c1={g.c1} s1={g.s1}, c2={g.c2} s2={g.s2}\n")
    print(frame["predicted"].value_counts().sort_index().rename("samples").to_string())
    return EXIT_OK


# =================================================
# REPORT
# =================================================

@exit_codes
def cmd_report(run_dir: str) -> int:
    frame = build_report(run_dir)
    print(format_table(frame))
    return EXIT_OK


# =================================================
# ENTRY POINT
# =================================================

def _overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"expected section.key=value, got {pair!r}", "set")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replaysim",
                                     description="Continual learning with guided diffusion rehearsal")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--progress", action="store_true", help="show training progress bars")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="train every seed through the task stream")
    run.add_argument("config")
    run.add_argument("--output-dir")
    run.add_argument("--method", help="strategy preset, e.g. guide or fine_tuning")
    run.add_argument("--seeds", help="comma-separated seeds")
    run.add_argument("--workers", type=int)
    run.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    sweep = commands.add_parser("sweep", help="rerun the config over one axis")
    sweep.add_argument("config")
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--output-dir")
    sweep.add_argument("--method")
    sweep.add_argument("--seeds", help="comma-separated seeds")
    sweep.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    probe = commands.add_parser("probe", help="boundary statistics of rehearsal samples")
    probe.add_argument("run_dir")
    probe.add_argument("--epsilon", type=float)
    probe.add_argument("--samples", type=int)
    probe.add_argument("--variants", help="comma-separated guidance variants")
    probe.add_argument("--seed", type=int)
    probe.add_argument("--task", type=int)
    probe.add_argument("--recall", action="store_true", help="also compare task-1 recall with joint training")

    demo = commands.add_parser("demo-dual", help="unconditional sampling guided to two classes")
    demo.add_argument("config")
    demo.add_argument("--output-dir")
    demo.add_argument("--preset", choices=["both", "reference", "custom"])
    demo.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    report = commands.add_parser("report", help="rebuild summary.csv from run records")
    report.add_argument("run_dir")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(getattr(args, "set", None))
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_USAGE
    if getattr(args, "method", None):
        overrides["experiment.method"] = args.method
    if getattr(args, "seeds", None):
        overrides["experiment.seeds"] = args.seeds

    if args.command == "run":
        return cmd_run(args.config, args.output_dir, overrides, args.workers, args.progress)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.axis, args.values, args.output_dir, overrides, args.progress)
    if args.command == "probe":
        variants = [v.strip() for v in args.variants.split(",")] if args.variants else None
        return cmd_probe(args.run_dir, args.epsilon, args.samples, variants, args.seed, args.task, args.recall)
    if args.command == "demo-dual":
        if args.preset:
            overrides["dual.preset"] = args.preset
        return cmd_demo_dual(args.config, args.output_dir, overrides, args.progress)
    return cmd_report(args.run_dir)


if __name__ == "__main__":
    sys.exit(main())
