"""Local model training and evaluation.

Models are softmax regression or a small MLP (tanh hidden layers, softmax
output) trained by mini-batch RMSProp or SGD on mean categorical
cross-entropy, stopping once the epoch loss plateaus. Evaluation reports
loss, macro one-vs-rest AUC, macro F1, and accuracy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ModelArch:
    """Layer sizes: input -> hidden... -> n_classes. Empty hidden = softmax regression."""

    input_dim: int
    n_classes: int
    hidden: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.n_classes < 2:
            raise ValueError("need input_dim >= 1 and n_classes >= 2")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, self.n_classes]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims)


@dataclass
class ModelParams:
    """Weight matrices (fan_in, fan_out) and bias vectors per layer."""

    arch: ModelArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flatten(self) -> np.ndarray:
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(w.ravel())
            chunks.append(b)
        return np.concatenate(chunks)

    @classmethod
    def unflatten(cls, arch: ModelArch, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {flat.shape}")
        weights, biases = [], []
        offset = 0
        for fan_in, fan_out in arch.layer_dims:
            weights.append(
                flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            )
            offset += fan_in * fan_out
            biases.append(flat[offset : offset + fan_out].copy())
            offset += fan_out
        return cls(arch=arch, weights=weights, biases=biases)

    def copy(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


def init_model(arch: ModelArch, seed: int) -> ModelParams:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in arch.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(arch=arch, weights=weights, biases=biases)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _forward_pass(params: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    """Activations per layer; the last entry holds class probabilities."""
    activations = [np.asarray(x, dtype=np.float64)]
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = activations[-1] @ w + b
        activations.append(_softmax(z) if i == n_layers - 1 else np.tanh(z))
    return activations


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per example."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.arch.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != model dim {params.arch.input_dim}")
    return _forward_pass(params, x)[-1]


def loss_and_grad(
    params: ModelParams, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient as a flat vector."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    activations = _forward_pass(params, x)
    probs = activations[-1]
    loss = float(-np.log(np.clip(probs[np.arange(n), y], 1e-300, None)).mean())

    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads_w: list[np.ndarray] = [None] * len(params.weights)
    grads_b: list[np.ndarray] = [None] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        grads_w[i] = activations[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (1.0 - activations[i] ** 2)
    flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(grads_w, grads_b)])
    return loss, flat


def mean_loss(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    probs = forward(params, x)
    y = np.asarray(y, dtype=np.int64)
    return float(-np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None)).mean())


@dataclass
class TrainConfig:
    """Optimizer settings and the plateau stopping rule."""

    optimizer: str = "rmsprop"
    learning_rate: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    tol: float = 1e-4
    patience: int = 3

    def __post_init__(self) -> None:
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be positive")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")


@dataclass
class TrainOutcome:
    params: ModelParams
    loss_trace: list[float] = field(default_factory=list)
    converged: bool = False


def train_until_converged(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
) -> TrainOutcome:
    """Mini-batch training until the epoch loss moves less than tol for
    `patience` consecutive epochs, or max_epochs is hit.

    The epoch loss is the mean of its batch losses; the input params are not
    mutated.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y) or len(x) == 0:
        raise ValueError("need equally many feature rows and labels")
    model = params.copy()
    flat = model.flatten()
    rms_state = np.zeros_like(flat)
    trace: list[float] = []
    streak = 0
    for _ in range(config.max_epochs):
        order = rng.permutation(len(x))
        batch_losses = []
        for start in range(0, len(x), config.batch_size):
            batch = order[start : start + config.batch_size]
            model = ModelParams.unflatten(model.arch, flat)
            loss, grad = loss_and_grad(model, x[batch], y[batch])
            batch_losses.append(loss)
            if config.optimizer == "rmsprop":
                rms_state = config.rho * rms_state + (1.0 - config.rho) * grad**2
                flat = flat - config.learning_rate * grad / np.sqrt(rms_state + config.eps)
            else:
                flat = flat - config.learning_rate * grad
        trace.append(float(np.mean(batch_losses)))
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < config.tol:
            streak += 1
            if streak >= config.patience:
                return TrainOutcome(ModelParams.unflatten(model.arch, flat), trace, True)
        else:
            streak = 0
    return TrainOutcome(ModelParams.unflatten(model.arch, flat), trace, False)


@dataclass
class Metrics:
    """Evaluation summary; rates lie in [0, 1]."""

    loss: float
    auc: float
    fscore: float
    accuracy: float

    def __post_init__(self) -> None:
        for name in ("auc", "fscore", "accuracy"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if not np.isfinite(self.loss) or self.loss < 0:
            raise ValueError(f"loss={self.loss} invalid")


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def binary_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Probability a positive outscores a negative, ties counting half."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative examples")
    ranks = _midranks(np.asarray(scores, dtype=np.float64))
    pos_rank_sum = ranks[labels].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(y: np.ndarray, probs: np.ndarray) -> float:
    """One-vs-rest AUC averaged over the classes present on both sides.

    Returns 0.5 when no class has both positives and negatives.
    """
    y = np.asarray(y, dtype=np.int64)
    per_class = []
    for c in range(probs.shape[1]):
        positives = y == c
        if positives.all() or not positives.any():
            continue
        per_class.append(binary_auc(positives, probs[:, c]))
    return float(np.mean(per_class)) if per_class else 0.5


def macro_f1(y: np.ndarray, predictions: np.ndarray, n_classes: int) -> float:
    """Mean per-class F1 over all classes; empty classes score zero."""
    y = np.asarray(y, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    scores = []
    for c in range(n_classes):
        tp = int(((predictions == c) & (y == c)).sum())
        fp = int(((predictions == c) & (y != c)).sum())
        fn = int(((predictions != c) & (y == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def evaluate(params: ModelParams, x: np.ndarray, y: np.ndarray) -> Metrics:
    """Loss, macro AUC, macro F1, and accuracy on a labeled set."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y) or len(x) == 0:
        raise ValueError("need a non-empty labeled set")
    probs = forward(params, x)
    predictions = probs.argmax(axis=1)
    loss = float(-np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None)).mean())
    return Metrics(
        loss=loss,
        auc=macro_auc(y, probs),
        fscore=macro_f1(y, predictions, params.arch.n_classes),
        accuracy=float((predictions == y).mean()),
    )


def params_to_bytes(params: ModelParams) -> bytes:
    """Big-endian wire form: layer sizes then the flat float64 vector."""
    arch = params.arch
    out = bytearray(struct.pack(">IIB", arch.input_dim, arch.n_classes, len(arch.hidden)))
    for h in arch.hidden:
        out += struct.pack(">I", h)
    flat = params.flatten()
    out += struct.pack(">I", len(flat))
    out += flat.astype(">f8").tobytes()
    return bytes(out)


def params_from_bytes(data: bytes) -> ModelParams:
    try:
        input_dim, n_classes, n_hidden = struct.unpack_from(">IIB", data, 0)
        offset = 9
        hidden = []
        for _ in range(n_hidden):
            (h,) = struct.unpack_from(">I", data, offset)
            hidden.append(h)
            offset += 4
        (n_params,) = struct.unpack_from(">I", data, offset)
        offset += 4
    except struct.error as exc:
        raise ValueError(f"model bytes truncated: {exc}") from None
    arch = ModelArch(input_dim=input_dim, n_classes=n_classes, hidden=tuple(hidden))
    expected = offset + 8 * n_params
    if len(data) != expected:
        raise ValueError(f"model bytes: expected {expected} bytes, got {len(data)}")
    flat = np.frombuffer(data, dtype=">f8", count=n_params, offset=offset).astype(np.float64)
    return ModelParams.unflatten(arch, flat)
