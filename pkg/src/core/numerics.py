"""
Numerics for HEML: a two-stage MLP (trunk + embedder) with exact
backpropagation, plain SGD and elementwise parameter averaging.

Parameters are stored as float32 (or float64 when a caller asks for it,
e.g. for finite-difference checks); every forward/backward pass computes
in float64.
"""

import logging
import math
from dataclasses import dataclass, asdict
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from src.utils.errors import NumericalError, ShapeError, UsageError
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)

# Dense matrices are plain 2-D numpy arrays (row-major)
DenseMatrix = np.ndarray


class Activation(str, Enum):
    RELU = 'relu'
    IDENTITY = 'identity'


class LossName(str, Enum):
    TRIPLET = 'triplet'
    SNR = 'snr'
    NTXENT = 'ntxent'
    # Accepted by the registry but not implemented
    ANGULAR = 'angular'
    MULTI_SIMILARITY = 'multisimilarity'
    PROXY_ANCHOR = 'proxyanchor'
    SUBCENTER_ARCFACE = 'subcenterarcface'


class MinerName(str, Enum):
    ALL = 'all'
    SEMIHARD = 'semihard'


class MarginMode(str, Enum):
    ABS = 'abs'
    HINGE = 'hinge'


def _require_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values in {what}")


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray   # (out_dim, in_dim)
    bias: np.ndarray     # (out_dim,)
    activation: Activation = Activation.IDENTITY

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class MlpParams:
    layers: Tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("MLP needs at least one layer")
        object.__setattr__(self, 'layers', tuple(self.layers))
        for k, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {k}: weight {layer.weight.shape} / bias {layer.bias.shape} disagree")
            if k > 0 and self.layers[k - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"layer {k}: input dim {layer.in_dim} != previous output dim {self.layers[k - 1].out_dim}")
            _require_finite(layer.weight, f"layer {k} weight")
            _require_finite(layer.bias, f"layer {k} bias")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def activations(self) -> List[str]:
        return [layer.activation.value for layer in self.layers]

    @property
    def dims(self) -> List[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def size(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def same_architecture(self, other: 'MlpParams') -> bool:
        return self.dims == other.dims and self.activations == other.activations

    def flatten(self) -> np.ndarray:
        """Weights row-major then bias, layer by layer, as float64."""
        parts = []
        for layer in self.layers:
            parts.append(np.asarray(layer.weight, dtype=np.float64).ravel())
            parts.append(np.asarray(layer.bias, dtype=np.float64))
        return np.concatenate(parts)

    def unflatten(self, vector: np.ndarray, dtype=None) -> 'MlpParams':
        vector = np.asarray(vector)
        if vector.shape != (self.size,):
            raise ShapeError(f"expected {self.size} parameters, got {vector.shape}")
        layers, offset = [], 0
        for layer in self.layers:
            target = dtype or layer.weight.dtype
            w_size = layer.weight.size
            weight = vector[offset:offset + w_size].reshape(layer.weight.shape).astype(target)
            offset += w_size
            bias = vector[offset:offset + layer.out_dim].astype(target)
            offset += layer.out_dim
            layers.append(Layer(weight, bias, layer.activation))
        return MlpParams(tuple(layers))

    def astype(self, dtype) -> 'MlpParams':
        return MlpParams(tuple(
            Layer(layer.weight.astype(dtype), layer.bias.astype(dtype), layer.activation)
            for layer in self.layers
        ))

    def equals(self, other: 'MlpParams') -> bool:
        """Bitwise equality (dtype included)."""
        if not self.same_architecture(other):
            return False
        return all(
            a.weight.dtype == b.weight.dtype
            and np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )


@dataclass(frozen=True, eq=False)
class EmbedderModel:
    trunk: MlpParams
    embedder: MlpParams

    def __post_init__(self):
        if self.trunk.out_dim != self.embedder.in_dim:
            raise ShapeError(f"trunk output {self.trunk.out_dim} != embedder input {self.embedder.in_dim}")
        if len(self.embedder.layers) != 2:
            raise ShapeError(f"embedder must have exactly one hidden layer, got {len(self.embedder.layers) - 1}")

    @property
    def input_dim(self) -> int:
        return self.trunk.in_dim

    @property
    def embed_dim(self) -> int:
        return self.embedder.out_dim

    @property
    def layers(self) -> Tuple[Layer, ...]:
        return self.trunk.layers + self.embedder.layers

    def same_architecture(self, other: 'EmbedderModel') -> bool:
        return self.trunk.same_architecture(other.trunk) and self.embedder.same_architecture(other.embedder)

    def equals(self, other: 'EmbedderModel') -> bool:
        return self.trunk.equals(other.trunk) and self.embedder.equals(other.embedder)

    def architecture(self) -> dict:
        return {
            'trunk_dims': self.trunk.dims,
            'trunk_activations': self.trunk.activations,
            'embedder_dims': self.embedder.dims,
            'embedder_activations': self.embedder.activations,
        }


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    margin: float = 0.1
    margin_mode: MarginMode = MarginMode.ABS
    loss: LossName = LossName.TRIPLET
    miner: MinerName = MinerName.SEMIHARD
    seed: int = 1234
    embed_dim: int = 8
    temperature: float = 0.1
    alpha: float = 1.0
    neg_weight: float = 1.0
    trunk_widths: Tuple[int, ...] = (64,)
    embedder_hidden: int = 32

    def __post_init__(self):
        # coerce enum-valued strings (CLI, env and checkpoint headers hand us strings)
        object.__setattr__(self, 'margin_mode', MarginMode(self.margin_mode))
        object.__setattr__(self, 'loss', LossName(self.loss))
        object.__setattr__(self, 'miner', MinerName(self.miner))
        object.__setattr__(self, 'trunk_widths', tuple(int(w) for w in self.trunk_widths))
        if self.epochs < 0:
            raise UsageError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise UsageError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.margin > 0:
            raise UsageError(f"margin must be > 0, got {self.margin}")
        if not self.temperature > 0:
            raise UsageError(f"temperature must be > 0, got {self.temperature}")
        if self.alpha < 0 or self.neg_weight < 0:
            raise UsageError("alpha and neg_weight must be non-negative")
        if self.embed_dim < 2:
            raise UsageError(f"embed_dim must be >= 2 (SNR distance needs two dimensions), got {self.embed_dim}")
        if self.embedder_hidden < 1 or any(w < 1 for w in self.trunk_widths):
            raise UsageError("layer widths must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise UsageError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ('margin_mode', 'loss', 'miner'):
            data[key] = data[key].value
        data['trunk_widths'] = list(self.trunk_widths)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainConfig':
        return cls(**data)


@dataclass(frozen=True, eq=False)
class ForwardCache:
    owner: EmbedderModel
    inputs: Tuple[np.ndarray, ...]
    preacts: Tuple[np.ndarray, ...]


def init_params(dims: Sequence[int], activations: Sequence[Activation],
                rng: np.random.Generator, dtype=np.float32) -> MlpParams:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for weights and biases."""
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        bound = 1.0 / math.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        bias = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
        layers.append(Layer(weight, bias, Activation(act)))
    return MlpParams(tuple(layers))


def init_embedder(input_dim: int, config: TrainConfig, seed: int, dtype=np.float32) -> EmbedderModel:
    rng = make_rng(seed)
    trunk_dims = [input_dim, *config.trunk_widths]
    trunk = init_params(trunk_dims, [Activation.RELU] * len(config.trunk_widths), rng, dtype)
    embedder = init_params(
        [trunk.out_dim, config.embedder_hidden, config.embed_dim],
        [Activation.RELU, Activation.IDENTITY], rng, dtype,
    )
    return EmbedderModel(trunk, embedder)


def mlp_forward(model: EmbedderModel, batch: DenseMatrix) -> Tuple[np.ndarray, ForwardCache]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match input_dim {model.input_dim}")
    inputs, preacts = [], []
    h = x
    for layer in model.layers:
        inputs.append(h)
        z = h @ np.asarray(layer.weight, dtype=np.float64).T + np.asarray(layer.bias, dtype=np.float64)
        preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation is Activation.RELU else z
    _require_finite(h, "forward pass")
    return h, ForwardCache(model, tuple(inputs), tuple(preacts))


def mlp_backward(model: EmbedderModel, cache: ForwardCache,
                 grad_embeddings: DenseMatrix) -> Tuple[EmbedderModel, np.ndarray]:
    """Exact gradients; returns (EmbedderModel-shaped float64 grads, input grads)."""
    if cache.owner is not model:
        raise UsageError("forward cache was produced by a different model")
    g = np.asarray(grad_embeddings, dtype=np.float64)
    n = cache.inputs[0].shape[0]
    if g.shape != (n, model.embed_dim):
        raise UsageError(f"upstream gradient shape {g.shape} does not match cached batch ({n}, {model.embed_dim})")

    grads: List[Layer] = []
    for idx in reversed(range(len(model.layers))):
        layer = model.layers[idx]
        if layer.activation is Activation.RELU:
            g = g * (cache.preacts[idx] > 0.0)
        grad_w = g.T @ cache.inputs[idx]
        grad_b = g.sum(axis=0)
        g = g @ np.asarray(layer.weight, dtype=np.float64)
        grads.append(Layer(grad_w, grad_b, layer.activation))
    grads.reverse()
    _require_finite(g, "backward pass")

    n_trunk = len(model.trunk.layers)
    param_grads = EmbedderModel(MlpParams(tuple(grads[:n_trunk])), MlpParams(tuple(grads[n_trunk:])))
    return param_grads, g


def input_gradient(model: EmbedderModel, batch: DenseMatrix, grad_embeddings: DenseMatrix) -> np.ndarray:
    _, cache = mlp_forward(model, batch)
    _, input_grads = mlp_backward(model, cache, grad_embeddings)
    return input_grads


def _check_same(a: MlpParams, b: MlpParams, what: str):
    if not a.same_architecture(b):
        raise ShapeError(f"{what}: architecture {a.dims}/{a.activations} != {b.dims}/{b.activations}")


def sgd_step(params: MlpParams, grads: MlpParams, lr: float) -> MlpParams:
    """p' = p - lr * g, stored back in the parameter dtype."""
    _check_same(params, grads, "sgd_step")
    layers = []
    for p, g in zip(params.layers, grads.layers):
        weight = (np.asarray(p.weight, np.float64) - lr * np.asarray(g.weight, np.float64)).astype(p.weight.dtype)
        bias = (np.asarray(p.bias, np.float64) - lr * np.asarray(g.bias, np.float64)).astype(p.bias.dtype)
        layers.append(Layer(weight, bias, p.activation))
    return MlpParams(tuple(layers))


def sgd_step_model(model: EmbedderModel, grads: EmbedderModel, lr: float) -> EmbedderModel:
    return EmbedderModel(sgd_step(model.trunk, grads.trunk, lr), sgd_step(model.embedder, grads.embedder, lr))


def average_params(a: MlpParams, b: MlpParams) -> MlpParams:
    """Elementwise (a + b) / 2, accumulated in float64."""
    _check_same(a, b, "average_params")
    layers = []
    for la, lb in zip(a.layers, b.layers):
        weight = ((np.asarray(la.weight, np.float64) + np.asarray(lb.weight, np.float64)) / 2.0).astype(la.weight.dtype)
        bias = ((np.asarray(la.bias, np.float64) + np.asarray(lb.bias, np.float64)) / 2.0).astype(la.bias.dtype)
        layers.append(Layer(weight, bias, la.activation))
    return MlpParams(tuple(layers))


def average_models(a: EmbedderModel, b: EmbedderModel) -> EmbedderModel:
    return EmbedderModel(average_params(a.trunk, b.trunk), average_params(a.embedder, b.embedder))
