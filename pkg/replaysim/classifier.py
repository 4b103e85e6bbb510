"""The continually trained softmax classifier and the FGSM boundary probe."""
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np
from tqdm import tqdm

from replaysim.errors import ContractError, TrainingError
from replaysim.nn import MLP, Module, read_checkpoint, save_checkpoint, state_from_document
from replaysim.optim import OptimizerState, optimizer_step
from replaysim.tensor import Tensor, backward, cross_entropy, no_grad, softmax
from replaysim.utils import is_finite

logger = logging.getLogger(__name__)


class ClassifierModel(Module):
    """
    f_phi(y | x): ReLU MLP with one shared head over every scenario class.

    ``depth`` counts Linear layers, so depth=1 is multinomial logistic regression.
    """

    kind = "classifier"

    def __init__(self, data_dim: int, num_classes: int, hidden: int = 64, depth: int = 2, seed: int = 0):
        super().__init__()
        if depth < 1:
            raise ContractError(f"classifier depth must be at least 1, got {depth}")
        self.data_dim = data_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.depth = depth
        self.seed = seed
        sizes = [data_dim] + [hidden] * (depth - 1) + [num_classes]
        self.net = MLP(self, "net", sizes, "relu", np.random.default_rng(seed))

    @property
    def feature_dim(self) -> int:
        return self.hidden if self.depth > 1 else self.data_dim

    def hyperparameters(self) -> Dict[str, Any]:
        return {"data_dim": self.data_dim, "num_classes": self.num_classes,
                "hidden": self.hidden, "depth": self.depth, "seed": self.seed}

    def forward(self, x) -> Tensor:
        return self.net(x if isinstance(x, Tensor) else Tensor(x))

    def logits(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(np.atleast_2d(x))).data

    def features(self, x: np.ndarray) -> np.ndarray:
        """Penultimate-layer activations."""
        with no_grad():
            return self.net.features(Tensor(np.atleast_2d(x))).data

    def input_gradient(self, x: np.ndarray, targets) -> Tuple[np.ndarray, float]:
        """Gradient of the summed cross-entropy w.r.t. the inputs, one row per sample."""
        inputs = Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)), requires_grad=True)
        with self.frozen():
            loss = cross_entropy(self.forward(inputs), targets, reduction="sum")
            backward(loss)
        return inputs.grad, loss.item()

    def save(self, path: str) -> None:
        save_checkpoint(self, path)

    @classmethod
    def from_checkpoint(cls, path: str) -> "ClassifierModel":
        document = read_checkpoint(path, kind=cls.kind)
        model = cls(**document["hyperparameters"])
        model.load_state_dict(state_from_document(document))
        return model


@dataclass(frozen=True)
class ProbeConfig:
    epsilon: float = 0.1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError(f"probe epsilon must be positive, got {self.epsilon}")


# =========================================================
# READOUTS
# =========================================================

def _class_ids(classes: Iterable[int], num_classes: int) -> np.ndarray:
    ids = np.unique(np.asarray(list(classes), dtype=np.int64))
    if ids.size == 0:
        raise ContractError("class set is empty")
    if ids.min() < 0 or ids.max() >= num_classes:
        raise ContractError(f"class ids {ids.tolist()} outside [0, {num_classes})")
    return ids


def masked_argmax(logits: np.ndarray, classes: Optional[Iterable[int]] = None) -> np.ndarray:
    """Argmax restricted to ``classes``; exact ties go to the lowest class id."""
    logits = np.asarray(logits, dtype=np.float64)
    if classes is None:
        return np.argmax(logits, axis=-1)
    ids = _class_ids(classes, logits.shape[-1])
    return ids[np.argmax(logits[..., ids], axis=-1)]


def predict(model: ClassifierModel, x: np.ndarray, classes: Optional[Iterable[int]] = None) -> np.ndarray:
    return masked_argmax(model.logits(x), classes)


def confidence(model: ClassifierModel, x: np.ndarray, class_id=None) -> np.ndarray:
    """Softmax probabilities; with ``class_id`` (int or per-row ids) only that column."""
    probs = softmax(model.logits(x), axis=1).data
    if class_id is None:
        return probs
    class_id = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (probs.shape[0],))
    return probs[np.arange(probs.shape[0]), class_id]


def accuracy(model: ClassifierModel, x: np.ndarray, y: np.ndarray,
             classes: Optional[Iterable[int]] = None) -> float:
    if len(y) == 0:
        raise ContractError("accuracy over an empty set")
    return float(np.mean(predict(model, x, classes) == np.asarray(y)))


# =========================================================
# TRAINING
# =========================================================

def classifier_train_step(model: ClassifierModel, x: np.ndarray, y: np.ndarray, optimizer: OptimizerState,
                          task: Optional[int] = None, step: Optional[int] = None) -> float:
    loss = cross_entropy(model(Tensor(x)), y)
    value = loss.item()
    if not is_finite(value):
        raise TrainingError("non-finite classifier loss", phase="classifier", task=task, step=step)
    backward(loss)
    optimizer_step(optimizer, model.parameters())
    return value


def train_classifier(model: ClassifierModel, x: np.ndarray, y: np.ndarray, optimizer: OptimizerState,
                     steps: int, batch_size: int, rng: np.random.Generator, progress: bool = False):
    """Plain supervised training on uniformly drawn mini-batches."""
    losses = []
    n = x.shape[0]
    for step in tqdm(range(steps), desc="classifier", disable=not progress, leave=False):
        idx = rng.integers(0, n, size=min(batch_size, n))
        losses.append(classifier_train_step(model, x[idx], y[idx], optimizer, step=step))
    return losses


# =========================================================
# BOUNDARY PROBE
# =========================================================

def fgsm_perturb(model: ClassifierModel, x_hat: np.ndarray, probe_config: ProbeConfig,
                 current_task_classes: Iterable[int]) -> np.ndarray:
    """
    x* = x_hat - eps * sign(grad_x l(f(x_hat), y_i)), y_i the current-task argmax.

    sign(0) = 0, so coordinates with a vanishing gradient stay put.
    """
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    targets = predict(model, x_hat, current_task_classes)
    grad, _ = model.input_gradient(x_hat, targets)
    direction = np.sign(grad)
    if not np.any(direction):
        logger.warning("FGSM gradient vanished on all %d samples", x_hat.shape[0])
    return x_hat - probe_config.epsilon * direction


def boundary_flip_rate(model: ClassifierModel, samples: np.ndarray, source_labels: np.ndarray,
                       probe_config: ProbeConfig, current_task_classes: Iterable[int],
                       prev_model: Optional[ClassifierModel] = None) -> Dict[str, float]:
    """
    Fraction of samples whose prediction changes under the FGSM step, plus the
    mean confidence of the previous and current classifiers on the source labels.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ContractError("boundary_flip_rate needs at least one sample")
    samples = np.atleast_2d(samples)
    perturbed = fgsm_perturb(model, samples, probe_config, current_task_classes)
    flipped = predict(model, perturbed) != predict(model, samples)
    return {
        "flip_rate": float(np.mean(flipped)),
        "mean_conf_prev": float(np.mean(confidence(prev_model, samples, source_labels)))
        if prev_model is not None else float("nan"),
        "mean_conf_curr": float(np.mean(confidence(model, samples, source_labels))),
        "num_samples": int(samples.shape[0]),
    }
