"""MLP feature extractors and classifiers, and the per-source-domain ensemble."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import DimensionError, FormatError, PreconditionError
from .numerics import Tensor

CHECKPOINT_VERSION = 1


class Mlp:
    """Stack of affine layers with relu between them (not after the last)."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator) -> None:
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise PreconditionError(f"invalid layer dims {dims}")
        self.dims = dims
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True))
            self.biases.append(Tensor(np.zeros((1, fan_out)), requires_grad=True))

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.dims[:-1], self.dims[1:]))

    def __call__(self, x: Tensor) -> Tensor:
        if x.cols != self.dims[0]:
            raise DimensionError(f"input width {x.cols} does not match layer input {self.dims[0]}")
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nx.add(nx.matmul(h, w), b)
            if k < last:
                h = nx.relu(h)
        return h

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.values + b.values
            if k < last:
                h = np.where(h > 0, h, 0.0)
        return h


class DomainModel:
    """Feature extractor F followed by a linear classifier G."""

    def __init__(self, input_dim: int, hidden: Sequence[int], feature_dim: int, num_classes: int, seed: int) -> None:
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.extractor = Mlp([input_dim, *hidden, feature_dim], rng)
        self.classifier = Mlp([feature_dim, num_classes], rng)

    @property
    def input_dim(self) -> int:
        return self.extractor.dims[0]

    @property
    def feature_dim(self) -> int:
        return self.extractor.dims[-1]

    @property
    def num_classes(self) -> int:
        return self.classifier.dims[-1]

    @property
    def params(self) -> list[Tensor]:
        return self.extractor.params + self.classifier.params

    def get_state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.params]

    def set_state(self, state: Sequence[np.ndarray]) -> None:
        params = self.params
        if len(state) != len(params):
            raise DimensionError(f"state has {len(state)} arrays, model has {len(params)} parameters")
        for p, v in zip(params, state):
            if p.shape != v.shape:
                raise DimensionError(f"parameter shape {p.shape} vs state shape {v.shape}")
            p.values = np.array(v, dtype=np.float64)
            p.grad = None

    def snapshot(self) -> "DomainModel":
        """Detached deep copy, safe to hand to another worker."""
        snap = copy.deepcopy(self)
        for p in snap.params:
            p.grad = None
        return snap

    def zero_grad(self) -> None:
        nx.zero_grads(self.params)

    def features(self, x) -> Tensor:
        return self.extractor(x if isinstance(x, Tensor) else Tensor(x))

    def logits_from_features(self, z: Tensor) -> Tensor:
        return self.classifier(z)

    def logits(self, x) -> Tensor:
        return self.logits_from_features(self.features(x))

    def predict_proba(self, x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        logits = self.classifier.forward_array(self.extractor.forward_array(x))
        return nx.softmax_rows_array(logits / temperature)


def init_model(
    input_dim: int,
    feature_dim: int = 64,
    num_classes: int = 6,
    seed: int = 0,
    hidden: Sequence[int] = (64,),
) -> DomainModel:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    return DomainModel(input_dim, hidden, feature_dim, num_classes, seed)


@dataclass
class ModelEnsemble:
    members: list[DomainModel]

    def __post_init__(self) -> None:
        if not self.members:
            raise PreconditionError("an ensemble needs at least one member")
        arch = {(tuple(m.extractor.dims), tuple(m.classifier.dims)) for m in self.members}
        if len(arch) != 1:
            raise DimensionError(f"ensemble members differ in architecture: {sorted(arch)}")

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, i: int) -> DomainModel:
        return self.members[i]

    @classmethod
    def create(
        cls,
        size: int,
        input_dim: int,
        feature_dim: int,
        num_classes: int,
        seeds: Sequence[int],
        hidden: Sequence[int] = (64,),
    ) -> "ModelEnsemble":
        if len(seeds) != size:
            raise PreconditionError(f"{size} members need {size} seeds, got {len(seeds)}")
        return cls([init_model(input_dim, feature_dim, num_classes, s, hidden) for s in seeds])


def ensemble_predict(models: ModelEnsemble | Sequence[DomainModel], x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Average of the members' tempered softmax outputs."""
    members = models.members if isinstance(models, ModelEnsemble) else list(models)
    if not members:
        raise PreconditionError("ensemble_predict needs at least one model")
    if temperature <= 0:
        raise PreconditionError("temperature must be positive")
    probs = np.stack([m.predict_proba(x, temperature) for m in members])
    # sorting along the member axis makes the sum exactly order-independent
    return np.sort(probs, axis=0).sum(axis=0) / len(members)


# -------------------------------------------------------------- checkpoints


def save_models(path: str | Path, models: Sequence[DomainModel]) -> None:
    arrays: dict[str, np.ndarray] = {
        "version": np.array(CHECKPOINT_VERSION),
        "count": np.array(len(models)),
    }
    for i, m in enumerate(models):
        arrays[f"m{i}_extractor_dims"] = np.array(m.extractor.dims)
        arrays[f"m{i}_classifier_dims"] = np.array(m.classifier.dims)
        arrays[f"m{i}_seed"] = np.array(m.seed)
        for k, v in enumerate(m.get_state()):
            arrays[f"m{i}_p{k}"] = v
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_models(path: str | Path) -> list[DomainModel]:
    with np.load(Path(path)) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        models = []
        for i in range(int(data["count"])):
            ext = [int(d) for d in data[f"m{i}_extractor_dims"]]
            cls_dims = [int(d) for d in data[f"m{i}_classifier_dims"]]
            m = DomainModel(ext[0], ext[1:-1], ext[-1], cls_dims[-1], int(data[f"m{i}_seed"]))
            m.set_state([data[f"m{i}_p{k}"] for k in range(len(m.params))])
            models.append(m)
    return models
