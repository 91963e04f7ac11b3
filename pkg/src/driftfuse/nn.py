"""Minimal neural stack over numpy: MLP forward/backward, losses, optimizers.

The MLP uses rectified-linear hidden activations, a linear final layer and
inverted dropout (scaling at train time only, so eval needs no rescaling).
All gradients are exact analytic expressions; the test-suite checks them
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MlpParams",
    "MlpGrads",
    "MlpCache",
    "LossValue",
    "mlp_init",
    "mlp_forward",
    "mlp_backward",
    "softmax",
    "softmax_ce",
    "gce_loss",
    "Adam",
    "Sgd",
    "make_optimizer",
    "clip_global_norm",
]


@dataclass
class MlpParams:
    """Stacked affine layers; weights[i] has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_rate: float = 0.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases length mismatch")
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ValueError(f"layer {i} output width does not feed layer {i + 1}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.dropout_rate,
        )


@dataclass
class MlpGrads:
    """Shape-congruent gradient holder for :class:`MlpParams`."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "MlpGrads":
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
        )

    def arrays(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def add_scaled(self, other: "MlpGrads", scale: float = 1.0) -> None:
        for mine, theirs in zip(self.arrays(), other.arrays()):
            mine += scale * theirs


@dataclass
class MlpCache:
    """Activation record from one forward pass, sufficient for backprop."""

    inputs: list[np.ndarray]      # input to each layer
    pre_acts: list[np.ndarray]    # pre-activation of each hidden layer
    drop_masks: list              # per hidden layer: scaled mask or None


@dataclass
class LossValue:
    value: float
    per_sample: np.ndarray


def mlp_init(sizes: list[int], rng: np.random.Generator, dropout_rate: float = 0.0) -> MlpParams:
    """Kaiming-style uniform fan-in init; biases start at zero."""
    if len(sizes) < 2:
        raise ValueError("need at least one layer")
    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / d_in)
        weights.append(rng.uniform(-limit, limit, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return MlpParams(weights, biases, dropout_rate)


def mlp_forward(
    params: MlpParams,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, MlpCache]:
    """Forward pass; returns output and the cache needed for backprop."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"input width {x.shape} does not match {params.input_dim}")
    drop = mode == "train" and params.dropout_rate > 0.0
    if drop and rng is None:
        raise ValueError("train-mode dropout needs an rng")

    inputs, pre_acts, masks = [x], [], []
    h = x
    last = params.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i == last:
            return z, MlpCache(inputs, pre_acts, masks)
        pre_acts.append(z)
        h = np.maximum(z, 0.0)
        if drop:
            keep = 1.0 - params.dropout_rate
            mask = (rng.random(h.shape) >= params.dropout_rate) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
        inputs.append(h)
    raise AssertionError("unreachable")


def mlp_backward(
    params: MlpParams, cache: MlpCache, grad_out: np.ndarray
) -> tuple[MlpGrads, np.ndarray]:
    """Exact backprop through the cached forward pass.

    grad_out is dLoss/d(output); returns parameter grads and dLoss/d(input).
    """
    grads = MlpGrads.zeros_like(params)
    g = np.asarray(grad_out, dtype=np.float64)
    for i in range(params.num_layers - 1, -1, -1):
        grads.weights[i][...] = cache.inputs[i].T @ g
        grads.biases[i][...] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            mask = cache.drop_masks[i - 1]
            if mask is not None:
                g = g * mask
            g = g * (cache.pre_acts[i - 1] > 0.0)
    return grads, g


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError("labels must be one class index per row")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    return labels.astype(np.int64)


def softmax_ce(
    logits: np.ndarray,
    labels: np.ndarray,
    sample_weights: np.ndarray | None = None,
) -> tuple[LossValue, np.ndarray]:
    """Cross entropy; loss is the (optionally weighted) batch mean.

    Returned gradient is w.r.t. the logits of that mean: per sample
    weight * (softmax - onehot) / batch.
    """
    labels = _check_labels(logits, labels)
    n, c = logits.shape
    p = softmax(logits)
    # log-softmax computed stably rather than log(p)
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    per_sample = -log_p[np.arange(n), labels]
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= w[:, None] / n
    return LossValue(float(np.mean(w * per_sample)), per_sample), grad


def gce_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    q: float,
    sample_weights: np.ndarray | None = None,
) -> tuple[LossValue, np.ndarray]:
    """Generalized cross entropy (1 - p_y^q) / q, mean over the batch.

    Analytic logit gradient: p_y^q * (softmax - onehot) / batch, which
    recovers the CE gradient as q -> 0 and (1 - p_y)'s as q = 1.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    labels = _check_labels(logits, labels)
    n, c = logits.shape
    p = softmax(logits)
    p_y = p[np.arange(n), labels]
    per_sample = (1.0 - p_y**q) / q
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (w * p_y**q)[:, None] / n
    return LossValue(float(np.mean(w * per_sample)), per_sample), grad


class Adam:
    """Adam over a flat list of parameter arrays, updated in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(arrays) != len(grads):
            raise ValueError("params/grads length mismatch")
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            if a.shape != g.shape:
                raise ValueError(f"grad shape {g.shape} does not match param {a.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            a -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(x) for x in state["m"]] if state["m"] is not None else None
        self.v = [np.array(x) for x in state["v"]] if state["v"] is not None else None


class Sgd:
    """Plain SGD, in place."""

    def __init__(self, lr: float = 1e-3):
        self.lr = lr

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(arrays) != len(grads):
            raise ValueError("params/grads length mismatch")
        for a, g in zip(arrays, grads):
            if a.shape != g.shape:
                raise ValueError(f"grad shape {g.shape} does not match param {a.shape}")
            a -= self.lr * g

    def state_dict(self) -> dict:
        return {}

    def load_state(self, state: dict) -> None:
        pass


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr=lr)
    if name == "sgd":
        return Sgd(lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0.0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return float(total)
