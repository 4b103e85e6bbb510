"""
Noise schedules, forward noising, epsilon-prediction training and
deterministic DDIM sampling for a class-conditional MLP denoiser.

Time indices run 1..T for noised states; index 0 is the clean sample with
alpha_bar(0) = 1.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple, Union

import numpy as np
from tqdm import tqdm

from replaysim.errors import ConfigError, ContractError, DimensionError, ScheduleIndexError, TrainingError
from replaysim.nn import MLP, Module, read_checkpoint, save_checkpoint, state_from_document
from replaysim.optim import OptimizerState, optimizer_step
from replaysim.tensor import Parameter, Tensor, backward, concat, embedding, mse, no_grad
from replaysim.utils import is_finite

logger = logging.getLogger(__name__)

TimeIndex = Union[int, np.ndarray]

# A guidance hook receives (x_t, t, eps, labels) and returns the eps to use.
GuidanceHook = Callable[[np.ndarray, int, np.ndarray, np.ndarray], np.ndarray]


# =========================================================
# NOISE SCHEDULE
# =========================================================

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ConfigError("betas must be a nonempty 1-D sequence", "betas")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("every beta must lie in (0, 1)", "betas")
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))
        # index t -> alpha_bar(t), with alpha_bar(0) = 1
        object.__setattr__(self, "_padded", np.concatenate([[1.0], self.alpha_bars]))

    @property
    def num_steps(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: TimeIndex) -> Union[float, np.ndarray]:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.num_steps):
            raise ScheduleIndexError(f"time index outside [0, {self.num_steps}]")
        value = self._padded[t]
        return float(value) if value.ndim == 0 else value

    def to_header(self) -> Dict[str, Any]:
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_header(cls, header: Dict[str, Any]) -> "NoiseSchedule":
        return cls(np.asarray(header["betas"], dtype=np.float64))


def make_linear_schedule(num_steps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    if num_steps < 1:
        raise ConfigError(f"num_steps must be positive, got {num_steps}", "diffusion.num_steps")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}", "diffusion.beta_start"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, num_steps))


def _check_time(t: TimeIndex, schedule: NoiseSchedule, low: int = 1) -> None:
    t = np.asarray(t)
    if np.any(t < low) or np.any(t > schedule.num_steps):
        raise ScheduleIndexError(f"time index outside [{low}, {schedule.num_steps}]")


def _coefficient(schedule: NoiseSchedule, t: TimeIndex, like: np.ndarray) -> np.ndarray:
    ab = np.asarray(schedule.alpha_bar(t), dtype=np.float64)
    if ab.ndim == 1 and like.ndim > 1:
        ab = ab.reshape((-1,) + (1,) * (like.ndim - 1))
    return ab


# =========================================================
# CLOSED-FORM ALGEBRA
# =========================================================

def q_sample(x0: np.ndarray, t: TimeIndex, epsilon: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0, epsilon = np.asarray(x0, dtype=np.float64), np.asarray(epsilon, dtype=np.float64)
    if x0.shape != epsilon.shape:
        raise DimensionError("q_sample", x0.shape, epsilon.shape)
    _check_time(t, schedule)
    ab = _coefficient(schedule, t, x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * epsilon


def predict_z0(x_t: np.ndarray, t: TimeIndex, eps_pred: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Clean-sample estimate (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)."""
    x_t, eps_pred = np.asarray(x_t, dtype=np.float64), np.asarray(eps_pred, dtype=np.float64)
    if x_t.shape != eps_pred.shape:
        raise DimensionError("predict_z0", x_t.shape, eps_pred.shape)
    _check_time(t, schedule)
    ab = _coefficient(schedule, t, x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) move from time t to t_prev < t."""
    if not t_prev < t:
        raise ContractError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    _check_time(t_prev, schedule, low=0)
    z0 = predict_z0(x_t, t, eps_hat, schedule)
    if t_prev == 0:
        return z0
    ab_prev = schedule.alpha_bar(t_prev)
    return np.sqrt(ab_prev) * z0 + np.sqrt(1.0 - ab_prev) * np.asarray(eps_hat, dtype=np.float64)


def ddim_timesteps(num_steps: int, ddim_steps: int) -> List[int]:
    """Evenly spaced indices from T down to 1, then the final hop to 0."""
    if not 1 <= ddim_steps <= num_steps:
        raise ConfigError(f"ddim_steps must lie in [1, {num_steps}], got {ddim_steps}", "sampler.ddim_steps")
    if ddim_steps == 1:
        return [num_steps, 0]
    times = np.rint(np.linspace(num_steps, 1, ddim_steps)).astype(int).tolist()
    return times + [0]


# =========================================================
# DENOISER
# =========================================================

def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sinusoidal features of integer time indices."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.size, 1))], axis=1)
    return emb


class NoisePredictor(Protocol):
    data_dim: int

    def predict_noise(self, x_t: np.ndarray, t: int, labels: np.ndarray) -> np.ndarray:
        ...


class DenoiserModel(Module):
    """
    eps_theta(x_t, t, y): an MLP over [x_t, time embedding, class embedding].

    The class table has one extra row (index ``num_classes``) used as the
    unconditional label.
    """

    kind = "denoiser"

    def __init__(self, data_dim: int, num_classes: int, hidden: int = 128, depth: int = 3,
                 time_embed_dim: int = 16, class_embed_dim: int = 16, seed: int = 0):
        super().__init__()
        self.data_dim = data_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.depth = depth
        self.time_embed_dim = time_embed_dim
        self.class_embed_dim = class_embed_dim
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.class_table = self.register(
            Parameter(rng.normal(0.0, 1.0, size=(num_classes + 1, class_embed_dim)), "class_embedding")
        )
        sizes = [data_dim + time_embed_dim + class_embed_dim] + [hidden] * depth + [data_dim]
        self.net = MLP(self, "net", sizes, "silu", rng)

    @property
    def null_class(self) -> int:
        return self.num_classes

    def hyperparameters(self) -> Dict[str, Any]:
        return {
            "data_dim": self.data_dim, "num_classes": self.num_classes, "hidden": self.hidden,
            "depth": self.depth, "time_embed_dim": self.time_embed_dim,
            "class_embed_dim": self.class_embed_dim, "seed": self.seed,
        }

    def forward(self, x_t, t: TimeIndex, labels) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        if x_t.data.ndim != 2 or x_t.shape[1] != self.data_dim:
            raise DimensionError("denoiser", x_t.shape, (None, self.data_dim))
        n = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
        if labels.size and (labels.min() < 0 or labels.max() > self.num_classes):
            raise ContractError(f"class label outside [0, {self.num_classes}]")
        h = concat([
            x_t,
            Tensor(timestep_embedding(t, self.time_embed_dim)),
            embedding(self.class_table, labels),
        ], axis=1)
        return self.net(h)

    def predict_noise(self, x_t: np.ndarray, t: int, labels: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(x_t), t, labels).data

    def save(self, path: str, schedule: NoiseSchedule) -> None:
        save_checkpoint(self, path, header={"schedule": schedule.to_header()})

    @classmethod
    def from_checkpoint(cls, path: str) -> Tuple["DenoiserModel", NoiseSchedule]:
        document = read_checkpoint(path, kind=cls.kind)
        model = cls(**document["hyperparameters"])
        model.load_state_dict(state_from_document(document))
        return model, NoiseSchedule.from_header(document["header"]["schedule"])


# =========================================================
# SAMPLING
# =========================================================

@dataclass(frozen=True)
class SamplerConfig:
    ddim_steps: int = 50
    seed: int = 0
    eta: float = 0.0

    def __post_init__(self):
        if self.ddim_steps < 1:
            raise ConfigError(f"ddim_steps must be positive, got {self.ddim_steps}", "sampler.ddim_steps")
        if self.eta != 0.0:
            raise ConfigError("only deterministic sampling (eta = 0) is supported", "sampler.eta")


def _label_batch(class_label, num_samples: Optional[int]) -> np.ndarray:
    labels = np.asarray(class_label, dtype=np.int64)
    if labels.ndim == 0:
        return np.full(num_samples if num_samples is not None else 1, int(labels), dtype=np.int64)
    if num_samples is not None and num_samples != labels.size:
        raise ContractError(f"num_samples={num_samples} but {labels.size} labels were given")
    return labels.reshape(-1)


def sample(model: NoisePredictor, class_label, sampler_config: SamplerConfig, schedule: NoiseSchedule,
           guidance: Optional[GuidanceHook] = None, num_samples: Optional[int] = None) -> np.ndarray:
    """
    Run the DDIM subsequence from T to 0 starting at x_T ~ N(0, I).

    The result is a pure function of the model parameters, the labels and the
    sampler config; ``guidance`` may rewrite eps at every step.
    """
    labels = _label_batch(class_label, num_samples)
    times = ddim_timesteps(schedule.num_steps, sampler_config.ddim_steps)
    rng = np.random.default_rng(sampler_config.seed)
    x = rng.standard_normal((labels.size, model.data_dim))

    for t, t_prev in zip(times[:-1], times[1:]):
        eps = model.predict_noise(x, t, labels)
        if guidance is not None:
            eps = guidance(x, t, eps, labels)
        x = ddim_step(x, t, t_prev, eps, schedule)
    return x


# =========================================================
# TRAINING
# =========================================================

def diffusion_train_step(model: DenoiserModel, x0: np.ndarray, y: np.ndarray, schedule: NoiseSchedule,
                         optimizer: OptimizerState, rng: np.random.Generator,
                         task: Optional[int] = None, step: Optional[int] = None) -> float:
    """One optimizer step on MSE(eps_theta(x_t, t, y), eps) with t ~ U[1, T]."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = rng.integers(1, schedule.num_steps + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, schedule)

    loss = mse(model(Tensor(x_t), t, y), Tensor(eps))
    value = loss.item()
    if not is_finite(value):
        raise TrainingError("non-finite diffusion loss", phase="diffusion", task=task, step=step)
    backward(loss)
    optimizer_step(optimizer, model.parameters())
    return value


def train_diffusion(model: DenoiserModel, x: np.ndarray, y: np.ndarray, schedule: NoiseSchedule,
                    optimizer: OptimizerState, steps: int, batch_size: int, rng: np.random.Generator,
                    task: Optional[int] = None, progress: bool = False) -> List[float]:
    losses = []
    n = x.shape[0]
    for step in tqdm(range(steps), desc=f"diffusion task {task}", disable=not progress, leave=False):
        idx = rng.integers(0, n, size=min(batch_size, n))
        losses.append(diffusion_train_step(model, x[idx], y[idx], schedule, optimizer, rng, task=task, step=step))
    if losses:
        logger.info("diffusion trained %d steps (task %s), final loss %.4f", steps, task, losses[-1])
    return losses
