"""Small dense softmax classifier with hand-written backpropagation.

The network is input -> zero or more ReLU hidden layers -> softmax output,
trained by full-batch gradient descent. Everything runs in float64 numpy and
is deterministic given (architecture, seed, data, epochs). Input gradients
come from the same backward pass as parameter gradients, so the attack
crafting code and the trainer share one set of numerics.

The last hidden activation is the feature map used for feature-space
distances and for the collision objective; for a model with no hidden layer
the feature map is the input itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instances import Instance, stack


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]  # (d, hidden..., K)

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("architecture needs at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def feature_dim(self) -> int:
        return self.layer_sizes[-2]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 0.1
    hidden: tuple[int, ...] = (16,)
    n_classes: int = 2


@dataclass(frozen=True)
class TrainMeta:
    epochs_run: int
    final_loss: float
    seed: int
    loss_history: tuple[float, ...] = ()


@dataclass(frozen=True)
class ModelState:
    params: np.ndarray  # flat parameter vector, treated as immutable
    arch: Architecture
    train_meta: TrainMeta | None = None


@dataclass(frozen=True)
class Prediction:
    class_scores: np.ndarray
    predicted: int
    confidence: float


@dataclass(frozen=True)
class LossWrtLabel:
    """Cross-entropy loss of the model output against a fixed class."""

    label: int


@dataclass(frozen=True)
class FeatureMatch:
    """Squared L2 distance between the feature map and a target feature vector."""

    target_features: np.ndarray


def param_count(arch: Architecture) -> int:
    sizes = arch.layer_sizes
    return sum(fi * fo + fo for fi, fo in zip(sizes, sizes[1:]))


def init_params(arch: Architecture, rng: np.random.Generator) -> np.ndarray:
    """Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero."""
    parts = []
    for fan_in, fan_out in zip(arch.layer_sizes, arch.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def _unpack(params: np.ndarray, arch: Architecture):
    layers = []
    off = 0
    sizes = arch.layer_sizes
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        w = params[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off:off + fan_out]
        off += fan_out
        layers.append((w, b))
    return layers


def _forward(params: np.ndarray, arch: Architecture, X: np.ndarray):
    """Returns (pre-activations per layer, activations with act[0] = X)."""
    layers = _unpack(params, arch)
    pre, act = [], [X]
    a = X
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        act.append(a)
    return pre, act


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_param_gradient(params, arch, X, y):
    """Mean cross-entropy over the batch and its gradient w.r.t. params."""
    layers = _unpack(params, arch)
    pre, act = _forward(params, arch, X)
    logits = act[-1]
    n = X.shape[0]
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(n), y]))

    delta = _softmax(logits)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (act[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w.T) * (pre[i - 1] > 0)
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return loss, flat


def train(labeled_set, config: TrainConfig, seed: int) -> ModelState:
    """Fit by full-batch gradient descent from a fresh seeded initialization.

    labeled_set is a list of (Instance, class) pairs. Raises on an empty set
    and raises "diverged" if the loss leaves the finite range (learning rate
    too high for the data).
    """
    if not labeled_set:
        raise ValueError("empty training set")
    X = stack([inst for inst, _ in labeled_set])
    y = np.array([label for _, label in labeled_set], dtype=np.intp)
    if y.min() < 0 or y.max() >= config.n_classes:
        raise ValueError(f"labels must lie in [0, {config.n_classes})")
    arch = Architecture((X.shape[1], *config.hidden, config.n_classes))
    rng = np.random.default_rng(seed)
    params = init_params(arch, rng)

    losses = []
    for _ in range(config.epochs):
        loss, grad = loss_and_param_gradient(params, arch, X, y)
        if not np.isfinite(loss):
            raise ValueError("diverged")
        losses.append(loss)
        params = params - config.learning_rate * grad
    final_loss, _ = loss_and_param_gradient(params, arch, X, y)
    if not np.isfinite(final_loss):
        raise ValueError("diverged")
    losses.append(final_loss)

    params.setflags(write=False)
    meta = TrainMeta(config.epochs, final_loss, seed, tuple(losses))
    return ModelState(params, arch, meta)


def _check_dim(model: ModelState, x: Instance):
    if x.dim != model.arch.input_dim:
        raise ValueError(
            f"dimension mismatch: instance has {x.dim}, model expects "
            f"{model.arch.input_dim}"
        )


def predict_batch(model: ModelState, X: np.ndarray) -> np.ndarray:
    """Softmax scores for an (N, d) matrix."""
    _, act = _forward(model.params, model.arch, X)
    return _softmax(act[-1])


def predict(model: ModelState, x: Instance) -> Prediction:
    _check_dim(model, x)
    scores = predict_batch(model, x.x[None, :])[0]
    predicted = int(np.argmax(scores))  # first max = lowest index on ties
    return Prediction(scores, predicted, float(scores[predicted]))


def features(model: ModelState, x: Instance) -> np.ndarray:
    """Activation of the layer feeding the output layer."""
    _check_dim(model, x)
    _, act = _forward(model.params, model.arch, x.x[None, :])
    return act[-2][0].copy()


def features_batch(model: ModelState, X: np.ndarray) -> np.ndarray:
    _, act = _forward(model.params, model.arch, X)
    return act[-2].copy()


def input_gradient(model: ModelState, x: Instance, objective) -> np.ndarray:
    """Gradient of the objective w.r.t. the input vector."""
    _check_dim(model, x)
    layers = _unpack(model.params, model.arch)
    pre, act = _forward(model.params, model.arch, x.x[None, :])
    n_layers = len(layers)

    if isinstance(objective, LossWrtLabel):
        if not 0 <= objective.label < model.arch.n_classes:
            raise ValueError("label out of range")
        delta = _softmax(act[-1]).copy()
        delta[0, objective.label] -= 1.0
        i = n_layers - 1
    elif isinstance(objective, FeatureMatch):
        phi = np.asarray(objective.target_features, dtype=np.float64)
        if phi.shape != (model.arch.feature_dim,):
            raise ValueError("target feature vector has wrong length")
        dact = 2.0 * (act[n_layers - 1] - phi[None, :])
        if n_layers == 1:  # features are the raw input
            return dact[0]
        delta = dact * (pre[n_layers - 2] > 0)
        i = n_layers - 2
    else:
        raise TypeError(f"unknown objective {objective!r}")

    while i > 0:
        delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0)
        i -= 1
    return (delta @ layers[0][0].T)[0]


def logit_jacobian(model: ModelState, x: Instance) -> np.ndarray:
    """(K, d) Jacobian of the output logits w.r.t. the input."""
    _check_dim(model, x)
    layers = _unpack(model.params, model.arch)
    pre, _ = _forward(model.params, model.arch, x.x[None, :])
    delta = np.eye(model.arch.n_classes)
    for i in range(len(layers) - 1, 0, -1):
        delta = (delta @ layers[i][0].T) * (pre[i - 1][0] > 0)
    return delta @ layers[0][0].T


def logits(model: ModelState, x: Instance) -> np.ndarray:
    _check_dim(model, x)
    _, act = _forward(model.params, model.arch, x.x[None, :])
    return act[-1][0].copy()


def accuracy(model: ModelState, labeled_set) -> float:
    """Fraction of (Instance, class) pairs the model classifies correctly."""
    if not labeled_set:
        raise ValueError("empty evaluation set")
    X = stack([inst for inst, _ in labeled_set])
    if X.shape[1] != model.arch.input_dim:
        raise ValueError("dimension mismatch")
    y = np.array([label for _, label in labeled_set])
    scores = predict_batch(model, X)
    return float(np.mean(scores.argmax(axis=1) == y))
