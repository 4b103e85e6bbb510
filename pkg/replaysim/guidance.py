"""
Classifier guidance on the clean-sample prediction.

Every rule rewrites the denoiser's eps as

    eps_hat = eps + sign * s * grad_{x_t} l(f(z0_hat(x_t)), y)

and differs only in which classifier snapshot is consulted, which class y is
targeted and the sign:

    GUIDE       current classifier, y = current-task argmax on z0_hat, +1
    PREV_PLUS   previous classifier, y = source class, +1
    PREV_MINUS  previous classifier, y = source class, -1
    CURR_MINUS  current classifier,  y = source class, -1

By default the gradient stops at the denoiser: z0_hat depends on x_t only
through the explicit x_t term, so grad_{x_t} = grad_{z0} / sqrt(ab_t).
``full_backprop`` differentiates through eps_theta as well. ``window`` restricts
guidance to the low-noise end of the trajectory, where 1/sqrt(ab_t) stays small.
"""
import enum
import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from replaysim.classifier import ClassifierModel, masked_argmax
from replaysim.diffusion import (
    DenoiserModel, GuidanceHook, NoisePredictor, NoiseSchedule, SamplerConfig, predict_z0, sample,
)
from replaysim.errors import ConfigError, ContractError
from replaysim.tensor import Tensor, backward, cross_entropy

logger = logging.getLogger(__name__)


class GuidanceVariant(str, enum.Enum):
    NONE = "NONE"
    GUIDE = "GUIDE"
    PREV_PLUS = "PREV_PLUS"
    PREV_MINUS = "PREV_MINUS"
    CURR_MINUS = "CURR_MINUS"

    @property
    def sign(self) -> int:
        return -1 if self in (GuidanceVariant.PREV_MINUS, GuidanceVariant.CURR_MINUS) else 1

    @property
    def uses_current_classifier(self) -> bool:
        return self in (GuidanceVariant.GUIDE, GuidanceVariant.CURR_MINUS)

    @property
    def uses_previous_classifier(self) -> bool:
        return self in (GuidanceVariant.PREV_PLUS, GuidanceVariant.PREV_MINUS)


@dataclass(frozen=True)
class GuidanceConfig:
    variant: GuidanceVariant = GuidanceVariant.GUIDE
    scale: float = 0.2
    full_backprop: bool = False
    # guide only while t <= window * T; 1.0 guides every step
    window: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", GuidanceVariant(str(self.variant).upper()
                                                                if not isinstance(self.variant, GuidanceVariant)
                                                                else self.variant))
        except ValueError:
            raise ConfigError(f"unknown guidance variant {self.variant!r}", "guidance.variant") from None
        if self.scale < 0:
            raise ConfigError(f"scale must be nonnegative, got {self.scale}", "guidance.scale")
        if not 0.0 < self.window <= 1.0:
            raise ConfigError(f"window must lie in (0, 1], got {self.window}", "guidance.window")

    @property
    def active(self) -> bool:
        return self.variant is not GuidanceVariant.NONE and self.scale > 0


@dataclass(frozen=True)
class DualGuidanceConfig:
    c1: int
    c2: int
    s1: float = 10.0
    s2: float = 10.0

    def __post_init__(self):
        if self.c1 == self.c2:
            raise ConfigError(f"c1 and c2 must differ, both are {self.c1}", "dual.c2")
        if self.s1 < 0 or self.s2 < 0:
            raise ConfigError("dual guidance scales must be nonnegative", "dual.s1")


# =========================================================
# GRADIENT AND EPS UPDATE
# =========================================================

def guidance_gradient(classifier: ClassifierModel, x_t: np.ndarray, t: int, z0_hat: np.ndarray, target_class,
                      schedule: NoiseSchedule, denoiser: Optional[DenoiserModel] = None,
                      labels: Optional[np.ndarray] = None) -> np.ndarray:
    """grad_{x_t} of the summed cross-entropy of f(z0_hat(x_t)) against ``target_class``."""
    ab = schedule.alpha_bar(t)
    if denoiser is None:
        grad_z0, _ = classifier.input_gradient(z0_hat, target_class)
        return grad_z0 / np.sqrt(ab)

    x = Tensor(np.asarray(x_t, dtype=np.float64), requires_grad=True)
    with denoiser.frozen(), classifier.frozen():
        eps = denoiser(x, t, labels)
        z0 = (x - eps * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))
        backward(cross_entropy(classifier(z0), target_class, reduction="sum"))
    return x.grad


def guidance_shift(x_t: np.ndarray, t: int, z0_hat: np.ndarray, classifier: ClassifierModel, target_class,
                   scale: float, sign: int, schedule: NoiseSchedule,
                   denoiser: Optional[DenoiserModel] = None, labels: Optional[np.ndarray] = None) -> np.ndarray:
    """The term sign * scale * grad added to eps; exactly linear in ``scale``."""
    if sign not in (1, -1):
        raise ContractError(f"guidance sign must be +1 or -1, got {sign}")
    if scale == 0:
        return np.zeros_like(np.asarray(x_t, dtype=np.float64))
    grad = guidance_gradient(classifier, x_t, t, z0_hat, target_class, schedule, denoiser, labels)
    return (sign * scale) * grad


def guide_epsilon(eps: np.ndarray, x_t: np.ndarray, t: int, z0_hat: np.ndarray, classifier: ClassifierModel,
                  target_class, scale: float, sign: int, schedule: NoiseSchedule,
                  denoiser: Optional[DenoiserModel] = None, labels: Optional[np.ndarray] = None) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    targets = np.asarray(target_class, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= classifier.num_classes):
        raise ContractError(f"target class outside [0, {classifier.num_classes})")
    if sign not in (1, -1):
        raise ContractError(f"guidance sign must be +1 or -1, got {sign}")
    if scale == 0:
        return eps
    return eps + guidance_shift(x_t, t, z0_hat, classifier, target_class, scale, sign, schedule, denoiser, labels)


def select_target_class(classifier: ClassifierModel, z0_hat: np.ndarray, current_task_classes: Iterable[int]):
    """Current-task class with the highest classifier output on z0_hat (lowest id on ties)."""
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    chosen = masked_argmax(classifier.logits(z0_hat), current_task_classes)
    return int(chosen[0]) if z0_hat.ndim == 1 else chosen


# =========================================================
# REHEARSAL SAMPLING
# =========================================================

def make_rehearsal_hook(guidance_config: GuidanceConfig, schedule: NoiseSchedule,
                        current_task_classes: Iterable[int],
                        prev_classifier: Optional[ClassifierModel] = None,
                        curr_classifier: Optional[ClassifierModel] = None,
                        denoiser: Optional[DenoiserModel] = None) -> Optional[GuidanceHook]:
    variant = guidance_config.variant
    if not guidance_config.active:
        return None
    if variant.uses_current_classifier and curr_classifier is None:
        raise ContractError(f"{variant.value} guidance needs the current classifier")
    if variant.uses_previous_classifier and prev_classifier is None:
        raise ContractError(f"{variant.value} guidance needs the previous classifier")

    classes = sorted(int(c) for c in current_task_classes)
    classifier = curr_classifier if variant.uses_current_classifier else prev_classifier
    backprop_through = denoiser if guidance_config.full_backprop else None

    last_guided = guidance_config.window * schedule.num_steps

    def hook(x_t, t, eps, labels):
        if t > last_guided:
            return eps
        z0_hat = predict_z0(x_t, t, eps, schedule)
        if variant is GuidanceVariant.GUIDE:
            # re-selected at every denoising step
            target = select_target_class(curr_classifier, z0_hat, classes)
        else:
            target = labels
        return guide_epsilon(eps, x_t, t, z0_hat, classifier, target, guidance_config.scale, variant.sign,
                             schedule, backprop_through, labels)

    return hook


def sample_rehearsal(prev_diffusion: DenoiserModel, prev_classifier: Optional[ClassifierModel],
                     curr_classifier: Optional[ClassifierModel], source_classes, current_task_classes: Iterable[int],
                     guidance_config: GuidanceConfig, sampler_config: SamplerConfig, schedule: NoiseSchedule,
                     num_samples: Optional[int] = None) -> np.ndarray:
    """
    Samples of previous-task ``source_classes`` from the frozen previous diffusion
    model, guided per ``guidance_config``. The caller keeps the source labels.
    """
    current = {int(c) for c in current_task_classes}
    if not current:
        raise ContractError("current task class set is empty")
    if current & {int(c) for c in np.atleast_1d(source_classes)}:
        raise ContractError("rehearsal source classes must come from previous tasks")
    hook = make_rehearsal_hook(guidance_config, schedule, current, prev_classifier, curr_classifier,
                               denoiser=prev_diffusion)
    return sample(prev_diffusion, source_classes, sampler_config, schedule, guidance=hook,
                  num_samples=num_samples)


def dual_guided_sample(uncond_diffusion: NoisePredictor, classifier: ClassifierModel,
                       dual_config: DualGuidanceConfig, sampler_config: SamplerConfig,
                       schedule: NoiseSchedule, num_samples: int) -> np.ndarray:
    """
    Unconditional sampling steered toward c1 (a class the diffusion model saw)
    and simultaneously toward c2 (one it never saw).
    """
    c1, c2 = dual_config.c1, dual_config.c2

    def hook(x_t, t, eps, labels):
        z0_hat = predict_z0(x_t, t, eps, schedule)
        eps_hat = guide_epsilon(eps, x_t, t, z0_hat, classifier, c1, dual_config.s1, 1, schedule)
        return guide_epsilon(eps_hat, x_t, t, z0_hat, classifier, c2, dual_config.s2, 1, schedule)

    null_label = getattr(uncond_diffusion, "null_class", 0)
    return sample(uncond_diffusion, null_label, sampler_config, schedule, guidance=hook, num_samples=num_samples)
