"""SGD and AdamW updates over named parameters."""
import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from replaysim.errors import ConfigError, ContractError
from replaysim.tensor import Parameter

logger = logging.getLogger(__name__)


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    ADAMW = "adamw"


@dataclass
class OptimizerState:
    """
    Optimizer hyperparameters plus per-parameter moment buffers.

    AdamW follows decoupled weight decay:

        m_t = b1 m + (1 - b1) g
        v_t = b2 v + (1 - b2) g^2
        p  <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)

    SGD applies ``p <- p - lr * (g + wd * p)``.
    """

    kind: OptimizerKind
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    step_count: int = 0
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}", "learning_rate")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ConfigError(f"betas must lie in (0, 1), got ({self.beta1}, {self.beta2})", "betas")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, got {self.weight_decay}", "weight_decay")


def make_optimizer(kind, parameters: Sequence[Parameter], learning_rate: float,
                   weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999) -> OptimizerState:
    state = OptimizerState(kind=kind, learning_rate=learning_rate, beta1=beta1,
                           beta2=beta2, weight_decay=weight_decay)
    if state.kind is OptimizerKind.ADAMW:
        for p in parameters:
            state.moments[p.name] = (np.zeros_like(p.data), np.zeros_like(p.data))
    logger.debug("optimizer %s lr=%g wd=%g over %d parameters",
                 state.kind.value, learning_rate, weight_decay, len(parameters))
    return state


def zero_grad(parameters: Sequence[Parameter]) -> None:
    for p in parameters:
        p.grad = None


def optimizer_step(state: OptimizerState, parameters: Sequence[Parameter]) -> None:
    """Apply one update to every parameter, then clear the gradients."""
    missing = [p.name for p in parameters if p.grad is None]
    if missing:
        raise ContractError(f"optimizer_step: no gradient for {', '.join(missing)}")

    state.step_count += 1
    lr, wd = state.learning_rate, state.weight_decay

    if state.kind is OptimizerKind.SGD:
        for p in parameters:
            p.data -= lr * (p.grad + wd * p.data)
    else:
        b1, b2, t = state.beta1, state.beta2, state.step_count
        for p in parameters:
            if p.name not in state.moments:
                state.moments[p.name] = (np.zeros_like(p.data), np.zeros_like(p.data))
            m, v = state.moments[p.name]
            if m.shape != p.data.shape:
                raise ContractError(f"moment buffer for {p.name} has shape {m.shape}, parameter {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + wd * p.data)

    zero_grad(parameters)
