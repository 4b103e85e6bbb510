"""
Flat INI experiment configuration.

Every key has a default (the desk-scale five-task benchmark); files only
name what they change. Unknown sections or keys are rejected.
"""
import configparser
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Tuple

from replaysim.continual import ClassifierSettings, DiffusionSettings, TrainingConfig
from replaysim.data import DatasetSpec, Scenario, generate, split_tasks
from replaysim.errors import ConfigError
from replaysim.guidance import DualGuidanceConfig, GuidanceConfig, GuidanceVariant
from replaysim.strategy import dual_preset, strategy_label, strategy_overrides

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Dict[str, str]] = {
    "experiment": {
        "name": "toy_cifar10_5",
        "seeds": "0, 1, 2",
        "output_dir": "runs/toy_cifar10_5",
        "method": "",
        "record_timings": "false",
        "save_checkpoints": "true",
        "archive_samples": "true",
        "workers": "1",
    },
    "data": {
        "generator": "gaussian_grid",
        "dimension": "2",
        "classes": "10",
        "samples_per_class": "250",
        "noise_std": "0.08",
        "seed": "0",
        "classes_per_task": "2",
        "test_fraction": "0.2",
    },
    "diffusion": {
        "num_steps": "1000",
        "beta_start": "0.0001",
        "beta_end": "0.02",
        "hidden": "128",
        "depth": "3",
        "time_embed_dim": "16",
        "class_embed_dim": "16",
        "steps_first_task": "3000",
        "steps": "3000",
        "batch_size": "128",
        "lr": "0.001",
        "weight_decay": "0.0",
        "self_rehearsal_ddim_steps": "20",
    },
    "classifier": {
        "hidden": "64",
        "depth": "2",
        "optimizer": "sgd",
        "lr_first_task": "0.1",
        "lr": "0.05",
        "weight_decay": "0.0",
        "steps_first_task": "1000",
        "steps": "1000",
        "batch_size": "64",
    },
    "guidance": {
        "variant": "GUIDE",
        "scale": "0.5",
        "full_backprop": "false",
        "window": "1.0",
    },
    "sampler": {
        "ddim_steps": "10",
    },
    "rehearsal": {
        "replay": "true",
        "interval": "5",
    },
    "probe": {
        "epsilon": "0.1",
        "samples": "256",
        "variants": "NONE, GUIDE",
    },
    "dual": {
        "c1": "0",
        "c2": "2",
        "s1": "10",
        "s2": "10",
        "train_classes": "0, 1",
        "samples": "64",
        "preset": "both",
    },
}


@dataclass(frozen=True)
class ProbeSettings:
    epsilon: float = 0.1
    samples: int = 256
    variants: Tuple[GuidanceVariant, ...] = (GuidanceVariant.NONE, GuidanceVariant.GUIDE)


@dataclass(frozen=True)
class DualSettings:
    guidance: DualGuidanceConfig
    train_classes: Tuple[int, ...] = (0, 1)
    samples: int = 64
    preset: str = "both"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seeds: Tuple[int, ...]
    output_dir: str
    method: str
    workers: int
    dataset: DatasetSpec
    classes_per_task: int
    test_fraction: float
    training: TrainingConfig
    probe: ProbeSettings
    dual: DualSettings
    values: Dict[str, Dict[str, str]] = field(default_factory=dict, compare=False)

    @property
    def strategy(self) -> str:
        return strategy_label(self.method)

    def labels(self) -> Dict[str, object]:
        return {
            "strategy": self.strategy,
            "variant": self.training.guidance.variant.value if self.training.replay else "NONE",
            "scale": self.training.guidance.scale,
        }

    def for_seed(self, seed: int) -> TrainingConfig:
        return replace(self.training, seed=int(seed))

    def scenario(self) -> Scenario:
        return split_tasks(generate(self.dataset), self.classes_per_task, self.test_fraction, seed=self.dataset.seed)


# =========================================================
# PARSING
# =========================================================

class _Reader:
    """Typed access to merged string values, naming the key on failure."""

    def __init__(self, values: Mapping[str, Mapping[str, str]]):
        self.values = values

    def text(self, key: str) -> str:
        section, name = key.split(".", 1)
        return self.values[section][name].strip()

    def _convert(self, key: str, kind, convert):
        raw = self.text(key)
        try:
            return convert(raw)
        except ValueError:
            raise ConfigError(f"expected {kind}, got {raw!r}", key) from None

    def integer(self, key: str) -> int:
        return self._convert(key, "an integer", int)

    def number(self, key: str) -> float:
        return self._convert(key, "a number", float)

    def flag(self, key: str) -> bool:
        def convert(raw):
            lowered = raw.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        return self._convert(key, "a boolean", convert)

    def integers(self, key: str) -> Tuple[int, ...]:
        return self._convert(key, "comma-separated integers",
                             lambda raw: tuple(int(v) for v in raw.split(",") if v.strip()))

    def words(self, key: str) -> Tuple[str, ...]:
        return tuple(v.strip() for v in self.text(key).split(",") if v.strip())


def _merge(target: Dict[str, Dict[str, str]], updates: Mapping[str, Mapping[str, str]], origin: str) -> None:
    for section, entries in updates.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}] in {origin}", section)
        for key, value in entries.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key in {origin}", f"{section}.{key}")
            target[section][key] = str(value)


def _dotted(overrides: Mapping[str, str]) -> Dict[str, Dict[str, str]]:
    nested: Dict[str, Dict[str, str]] = {}
    for dotted, value in overrides.items():
        if "." not in dotted:
            raise ConfigError("override keys take the form section.key", dotted)
        section, key = dotted.split(".", 1)
        nested.setdefault(section, {})[key] = value
    return nested


def read_values(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> Dict[str, Dict[str, str]]:
    """Defaults, then the file, then the method preset, then explicit overrides."""
    values = {section: dict(entries) for section, entries in DEFAULTS.items()}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}", "path")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}", "path") from None
        _merge(values, {s: dict(parser.items(s)) for s in parser.sections()}, path)

    overrides = _dotted(overrides or {})
    method = overrides.get("experiment", {}).get("method", values["experiment"]["method"]).strip()
    if method:
        _merge(values, _dotted(strategy_overrides(method)), f"method {method}")
    _merge(values, overrides, "overrides")
    return values


def build_config(values: Dict[str, Dict[str, str]]) -> ExperimentConfig:
    r = _Reader(values)

    seeds = r.integers("experiment.seeds")
    if not seeds:
        raise ConfigError("at least one seed is required", "experiment.seeds")
    workers = r.integer("experiment.workers")
    if workers < 1:
        raise ConfigError(f"must be positive, got {workers}", "experiment.workers")

    dataset = DatasetSpec(
        generator=r.text("data.generator").lower(),
        dimension=r.integer("data.dimension"),
        classes=r.integer("data.classes"),
        samples_per_class=r.integer("data.samples_per_class"),
        noise_std=r.number("data.noise_std"),
        seed=r.integer("data.seed"),
    )
    classes_per_task = r.integer("data.classes_per_task")
    if classes_per_task < 1 or dataset.classes % classes_per_task:
        raise ConfigError(f"{dataset.classes} classes cannot be split into tasks of {classes_per_task}",
                          "data.classes_per_task")

    classifier = ClassifierSettings(**{
        "hidden": r.integer("classifier.hidden"),
        "depth": r.integer("classifier.depth"),
        "optimizer": r.text("classifier.optimizer").lower(),
        "lr_first_task": r.number("classifier.lr_first_task"),
        "lr": r.number("classifier.lr"),
        "weight_decay": r.number("classifier.weight_decay"),
        "steps_first_task": r.integer("classifier.steps_first_task"),
        "steps": r.integer("classifier.steps"),
        "batch_size": r.integer("classifier.batch_size"),
    })
    diffusion = DiffusionSettings(**{
        key: (r.number if key in ("beta_start", "beta_end", "lr", "weight_decay") else r.integer)(f"diffusion.{key}")
        for key in DEFAULTS["diffusion"]
    })
    # fail early on an invalid schedule
    diffusion.schedule()

    guidance = GuidanceConfig(
        variant=r.text("guidance.variant").upper(),
        scale=r.number("guidance.scale"),
        full_backprop=r.flag("guidance.full_backprop"),
        window=r.number("guidance.window"),
    )
    ddim_steps = r.integer("sampler.ddim_steps")
    if ddim_steps > diffusion.num_steps:
        raise ConfigError(f"ddim_steps {ddim_steps} exceeds num_steps {diffusion.num_steps}", "sampler.ddim_steps")
    interval = r.number("rehearsal.interval")

    training = TrainingConfig(
        classifier=classifier,
        diffusion=diffusion,
        guidance=guidance,
        ddim_steps=ddim_steps,
        replay=r.flag("rehearsal.replay"),
        interval=interval if math.isfinite(interval) else math.inf,
        seed=seeds[0],
        archive_samples=r.flag("experiment.archive_samples"),
        save_checkpoints=r.flag("experiment.save_checkpoints"),
        record_timings=r.flag("experiment.record_timings"),
    )
    _check_batch(training, dataset.classes // classes_per_task, classes_per_task)

    try:
        variants = tuple(GuidanceVariant(v.upper()) for v in r.words("probe.variants"))
    except ValueError:
        raise ConfigError(f"unknown variant in {r.text('probe.variants')!r}", "probe.variants") from None
    probe = ProbeSettings(epsilon=r.number("probe.epsilon"), samples=r.integer("probe.samples"), variants=variants)
    if not probe.epsilon > 0:
        raise ConfigError(f"must be positive, got {probe.epsilon}", "probe.epsilon")
    if probe.samples < 1:
        raise ConfigError(f"must be positive, got {probe.samples}", "probe.samples")

    dual = _build_dual(r, dataset.classes)

    return ExperimentConfig(
        name=r.text("experiment.name"),
        seeds=seeds,
        output_dir=r.text("experiment.output_dir"),
        method=r.text("experiment.method"),
        workers=workers,
        dataset=dataset,
        classes_per_task=classes_per_task,
        test_fraction=r.number("data.test_fraction"),
        training=training,
        probe=probe,
        dual=dual,
        values=values,
    )


def _check_batch(training: TrainingConfig, num_tasks: int, classes_per_task: int) -> None:
    if not training.replay:
        return
    batch = training.classifier.batch_size
    for i in range(2, num_tasks + 1):
        if (batch // i) * (i - 1) < classes_per_task * (i - 1):
            raise ConfigError(
                f"batch size {batch} cannot hold a rehearsal sample of every previous class at task {i}",
                "classifier.batch_size",
            )


def _build_dual(r: _Reader, num_classes: int) -> DualSettings:
    scales = dual_preset(r.text("dual.preset"), r.number("dual.s1"), r.number("dual.s2"))
    c1, c2 = r.integer("dual.c1"), r.integer("dual.c2")
    train_classes = r.integers("dual.train_classes")
    for key, c in (("dual.c1", c1), ("dual.c2", c2)):
        if not 0 <= c < num_classes:
            raise ConfigError(f"class {c} outside [0, {num_classes})", key)
    if c1 not in train_classes:
        raise ConfigError(f"c1={c1} must be one of the diffusion training classes", "dual.c1")
    if c2 in train_classes:
        raise ConfigError(f"c2={c2} must be unseen by the diffusion model", "dual.c2")
    samples = r.integer("dual.samples")
    if samples < 1:
        raise ConfigError(f"must be positive, got {samples}", "dual.samples")
    return DualSettings(
        guidance=DualGuidanceConfig(c1=c1, c2=c2, s1=scales["s1"], s2=scales["s2"]),
        train_classes=train_classes,
        samples=samples,
        preset=scales["preset"],
    )


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    config = build_config(read_values(path, overrides))
    logger.debug("loaded config %s (%s)", config.name, path or "defaults")
    return config


def write_config(config: ExperimentConfig, path: str) -> None:
    """Write the effective (merged) configuration, sections and keys in schema order."""
    parser = configparser.ConfigParser(interpolation=None)
    for section in DEFAULTS:
        parser[section] = {key: config.values[section][key] for key in DEFAULTS[section]}
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        parser.write(f)


def parse_values(raw: str, kind=float) -> Tuple:
    """Comma-separated sweep values; ``inf`` is allowed for floats."""
    items = [v.strip() for v in raw.split(",") if v.strip()]
    try:
        return tuple(kind(v) for v in items)
    except ValueError:
        raise ConfigError(f"cannot parse values {raw!r}", "values") from None

