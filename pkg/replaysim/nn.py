"""Parameter containers, dense layers and the JSON checkpoint format."""
import contextlib
import copy
import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from replaysim.errors import ArtifactError, ContractError
from replaysim.tensor import Parameter, Tensor, matmul, relu, silu

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "replaysim-checkpoint/1"

ACTIVATIONS = {
    "relu": relu,
    "silu": silu,
}


class Module:
    """Owns an ordered registry of uniquely named parameters."""

    kind = "module"

    def __init__(self):
        self._params: Dict[str, Parameter] = {}

    def register(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ContractError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def parameters(self) -> List[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> Dict[str, Parameter]:
        return dict(self._params)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            raise ContractError(
                f"state keys {sorted(state)} do not match parameters {sorted(self._params)}"
            )
        for name, p in self._params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.data.shape:
                raise ContractError(f"{name}: stored shape {values.shape}, parameter {p.data.shape}")
            p.data[...] = values

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Stop recording parameter gradients, e.g. while differentiating w.r.t. inputs."""
        flags = [(p, p.requires_grad) for p in self._params.values()]
        for p, _ in flags:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in flags:
                p.requires_grad = flag

    def clone(self) -> "Module":
        twin = copy.deepcopy(self)
        twin.zero_grad()
        return twin

    def hyperparameters(self) -> Dict[str, Any]:
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear:
    def __init__(self, owner: Module, name: str, in_features: int, out_features: int,
                 rng: np.random.Generator):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = owner.register(
            Parameter(rng.uniform(-bound, bound, size=(in_features, out_features)), f"{name}.weight")
        )
        self.bias = owner.register(Parameter(np.zeros(out_features), f"{name}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class MLP:
    """Stack of Linear layers with an activation between them."""

    def __init__(self, owner: Module, name: str, sizes: Sequence[int], activation: str,
                 rng: np.random.Generator):
        if len(sizes) < 2:
            raise ContractError(f"MLP needs at least input and output sizes, got {list(sizes)}")
        self.activation = ACTIVATIONS[activation]
        self.layers = [
            Linear(owner, f"{name}.{i}", sizes[i], sizes[i + 1], rng)
            for i in range(len(sizes) - 1)
        ]

    def features(self, x: Tensor) -> Tensor:
        """Activations feeding the last layer (the input itself for a single layer)."""
        for layer in self.layers[:-1]:
            x = self.activation(layer(x))
        return x

    def __call__(self, x: Tensor) -> Tensor:
        return self.layers[-1](self.features(x))


# =========================================================
# CHECKPOINTS
# =========================================================

def state_hash(model: Module) -> str:
    digest = hashlib.sha256()
    for name, p in model.named_parameters().items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def checkpoint_document(model: Module, header: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "hyperparameters": model.hyperparameters(),
        "header": header or {},
        "parameters": {
            name: {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in model.named_parameters().items()
        },
    }


def save_checkpoint(model: Module, path: str, header: Optional[Dict[str, Any]] = None) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(checkpoint_document(model, header), f)
    logger.debug("wrote %s checkpoint to %s", model.kind, path)


def read_checkpoint(path: str, kind: Optional[str] = None) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ArtifactError(f"checkpoint not found: {path}")
    try:
        with open(path) as f:
            document = json.load(f)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if document.get("format") != CHECKPOINT_FORMAT:
        raise ArtifactError(f"checkpoint {path} has format {document.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    if kind is not None and document.get("kind") != kind:
        raise ArtifactError(f"checkpoint {path} holds a {document.get('kind')!r}, expected {kind!r}")
    return document


def state_from_document(document: Dict[str, Any]) -> Dict[str, np.ndarray]:
    return {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in document["parameters"].items()
    }
