"""Two-stream disentangled model: blocked classification, difficulty
weighting, counterfactual feature swapping, and the training objectives.

The intrinsic encoder is optimized only through the intrinsic classifier
and the domain encoder only through the domain classifier; each classifier
reads the concatenated latent pair but backpropagates into a single half.
The per-sample difficulty weight is treated as a constant during
differentiation, as is any donor feature used for swapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    MlpCache,
    MlpGrads,
    MlpParams,
    gce_loss,
    mlp_backward,
    mlp_forward,
    mlp_init,
    softmax_ce,
)

__all__ = [
    "TwoStreamModel",
    "ModelGrads",
    "EncodedBatch",
    "EncodeCache",
    "SwapPairing",
    "build_model",
    "encode",
    "classify_blocked",
    "infer_logits",
    "difficulty_weight",
    "disentangle_loss",
    "swap_features",
    "swap_loss",
    "plain_ce_loss",
    "total_loss",
]

S_EPS = 1e-12  # below this combined loss the difficulty ratio is undefined


@dataclass
class TwoStreamModel:
    """Intrinsic/domain encoder pair with linear heads over [x_i; x_d]."""

    encoder_i: MlpParams
    encoder_d: MlpParams
    classifier_i_w: np.ndarray
    classifier_i_b: np.ndarray
    classifier_d_w: np.ndarray
    classifier_d_b: np.ndarray
    latent_dim: int

    def __post_init__(self):
        d = self.latent_dim
        if self.encoder_i.output_dim != d or self.encoder_d.output_dim != d:
            raise ValueError("both encoders must output latent_dim")
        if self.classifier_i_w.shape[0] != 2 * d or self.classifier_d_w.shape[0] != 2 * d:
            raise ValueError("classifiers must take the concatenated 2*latent_dim input")

    @property
    def input_dim(self) -> int:
        return self.encoder_i.input_dim

    @property
    def num_classes(self) -> int:
        return self.classifier_i_w.shape[1]

    def parameter_arrays(self) -> list[np.ndarray]:
        return (
            self.encoder_i.arrays()
            + self.encoder_d.arrays()
            + [self.classifier_i_w, self.classifier_i_b, self.classifier_d_w, self.classifier_d_b]
        )

    def copy(self) -> "TwoStreamModel":
        return TwoStreamModel(
            self.encoder_i.copy(),
            self.encoder_d.copy(),
            self.classifier_i_w.copy(),
            self.classifier_i_b.copy(),
            self.classifier_d_w.copy(),
            self.classifier_d_b.copy(),
            self.latent_dim,
        )


@dataclass
class ModelGrads:
    """Gradient holder congruent with TwoStreamModel.parameter_arrays()."""

    enc_i: MlpGrads
    enc_d: MlpGrads
    ci_w: np.ndarray
    ci_b: np.ndarray
    cd_w: np.ndarray
    cd_b: np.ndarray

    @classmethod
    def zeros_like(cls, model: TwoStreamModel) -> "ModelGrads":
        return cls(
            MlpGrads.zeros_like(model.encoder_i),
            MlpGrads.zeros_like(model.encoder_d),
            np.zeros_like(model.classifier_i_w),
            np.zeros_like(model.classifier_i_b),
            np.zeros_like(model.classifier_d_w),
            np.zeros_like(model.classifier_d_b),
        )

    def arrays(self) -> list[np.ndarray]:
        return (
            self.enc_i.arrays()
            + self.enc_d.arrays()
            + [self.ci_w, self.ci_b, self.cd_w, self.cd_b]
        )

    def add_scaled(self, other: "ModelGrads", scale: float = 1.0) -> None:
        for mine, theirs in zip(self.arrays(), other.arrays()):
            mine += scale * theirs


@dataclass
class EncodedBatch:
    intrinsic: np.ndarray
    domain: np.ndarray
    labels: np.ndarray | None = None
    domain_ids: np.ndarray | None = None

    def __post_init__(self):
        n = self.intrinsic.shape[0]
        for arr in (self.domain, self.labels, self.domain_ids):
            if arr is not None and arr.shape[0] != n:
                raise ValueError("row counts differ across encoded fields")


@dataclass
class EncodeCache:
    cache_i: MlpCache
    cache_d: MlpCache


@dataclass
class SwapPairing:
    """Donor assignment for the counterfactual swap.

    partner_index points into the donor pool (reservoir entries, or rows of
    the current batch for the first-task fallback).
    """

    partner_index: np.ndarray
    donor_domain_feature: np.ndarray
    donor_label: np.ndarray
    from_reservoir: bool


def build_model(
    input_dim: int,
    latent_dim: int,
    hidden_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    num_layers: int = 3,
    dropout_rate: float = 0.1,
) -> TwoStreamModel:
    """Fresh model: two MLP encoders plus the two linear heads."""
    sizes = [input_dim] + [hidden_dim] * (num_layers - 1) + [latent_dim]
    enc_i = mlp_init(sizes, rng, dropout_rate)
    enc_d = mlp_init(sizes, rng, dropout_rate)
    limit = np.sqrt(6.0 / (2 * latent_dim))
    ci_w = rng.uniform(-limit, limit, size=(2 * latent_dim, num_classes))
    cd_w = rng.uniform(-limit, limit, size=(2 * latent_dim, num_classes))
    return TwoStreamModel(
        enc_i, enc_d, ci_w, np.zeros(num_classes), cd_w, np.zeros(num_classes), latent_dim
    )


def encode(
    model: TwoStreamModel,
    h: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    labels: np.ndarray | None = None,
    domain_ids: np.ndarray | None = None,
) -> tuple[EncodedBatch, EncodeCache]:
    """Project backbone features through both encoders."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.input_dim:
        raise ValueError(f"feature width {h.shape} does not match encoder input {model.input_dim}")
    x_i, cache_i = mlp_forward(model.encoder_i, h, mode, rng)
    x_d, cache_d = mlp_forward(model.encoder_d, h, mode, rng)
    return EncodedBatch(x_i, x_d, labels, domain_ids), EncodeCache(cache_i, cache_d)


def _head_forward(w: np.ndarray, b: np.ndarray, concat: np.ndarray) -> np.ndarray:
    return concat @ w + b


def _head_backward(
    w: np.ndarray, concat: np.ndarray, grad_logits: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return concat.T @ grad_logits, grad_logits.sum(axis=0), grad_logits @ w.T


def classify_blocked(model: TwoStreamModel, enc: EncodedBatch) -> tuple[np.ndarray, np.ndarray]:
    """Logits of both heads over the concatenated latents.

    The gradient routing (each head's loss reaching only its own encoder)
    is realized by the loss functions below, which backpropagate a single
    half of the concatenation per head.
    """
    concat = np.concatenate([enc.intrinsic, enc.domain], axis=1)
    logits_i = _head_forward(model.classifier_i_w, model.classifier_i_b, concat)
    logits_d = _head_forward(model.classifier_d_w, model.classifier_d_b, concat)
    return logits_i, logits_d


def infer_logits(model: TwoStreamModel, h: np.ndarray) -> np.ndarray:
    """Inference head: C_i over the concatenated eval-mode latents."""
    enc, _ = encode(model, h, mode="eval")
    concat = np.concatenate([enc.intrinsic, enc.domain], axis=1)
    return _head_forward(model.classifier_i_w, model.classifier_i_b, concat)


def difficulty_weight(ce_d: np.ndarray, ce_i: np.ndarray) -> np.ndarray:
    """Per-sample weight ce_d / (ce_i + ce_d), neutral 0.5 when both vanish."""
    ce_d = np.asarray(ce_d, dtype=np.float64)
    ce_i = np.asarray(ce_i, dtype=np.float64)
    if ce_d.shape != ce_i.shape:
        raise ValueError("loss vectors must have equal length")
    if np.any(ce_d < 0.0) or np.any(ce_i < 0.0):
        raise ValueError("losses must be non-negative")
    total = ce_i + ce_d
    safe = np.where(total < S_EPS, 1.0, total)
    return np.where(total < S_EPS, 0.5, ce_d / safe)


def disentangle_loss(
    model: TwoStreamModel,
    enc: EncodedBatch,
    cache: EncodeCache,
    q: float,
    intrinsic_term: bool = True,
    domain_term: bool = True,
) -> tuple[float, ModelGrads, np.ndarray]:
    """Difficulty-weighted CE on the intrinsic head plus GCE on the domain
    head; returns (loss, grads, per-sample weights S).

    S is detached: no gradient flows through the weight itself. The term
    flags exist for diagnosing the gradient routing and default to the full
    objective.
    """
    if enc.labels is None:
        raise ValueError("encoded batch carries no labels")
    y = enc.labels
    concat = np.concatenate([enc.intrinsic, enc.domain], axis=1)
    logits_i = _head_forward(model.classifier_i_w, model.classifier_i_b, concat)
    logits_d = _head_forward(model.classifier_d_w, model.classifier_d_b, concat)

    ce_i, _ = softmax_ce(logits_i, y)
    ce_d, _ = softmax_ce(logits_d, y)
    s = difficulty_weight(ce_d.per_sample, ce_i.per_sample)

    d = model.latent_dim
    grads = ModelGrads.zeros_like(model)
    loss = 0.0

    if intrinsic_term:
        ce_w, grad_logits_i = softmax_ce(logits_i, y, sample_weights=s)
        loss += ce_w.value
        dw, db, dconcat = _head_backward(model.classifier_i_w, concat, grad_logits_i)
        grads.ci_w += dw
        grads.ci_b += db
        enc_i_grads, _ = mlp_backward(model.encoder_i, cache.cache_i, dconcat[:, :d])
        grads.enc_i.add_scaled(enc_i_grads)

    if domain_term:
        gce, grad_logits_d = gce_loss(logits_d, y, q)
        loss += gce.value
        dw, db, dconcat = _head_backward(model.classifier_d_w, concat, grad_logits_d)
        grads.cd_w += dw
        grads.cd_b += db
        enc_d_grads, _ = mlp_backward(model.encoder_d, cache.cache_d, dconcat[:, d:])
        grads.enc_d.add_scaled(enc_d_grads)

    return loss, grads, s


def swap_features(enc: EncodedBatch, reservoir, rng: np.random.Generator) -> SwapPairing | None:
    """Assign each row a donor (x~_d, y~).

    Donors come uniformly from the previous-task reservoir when it has
    entries; otherwise uniformly from the current batch excluding the row
    itself. Returns None when no donor pool exists (batch of one, empty
    reservoir), signalling the step to skip swapping.
    """
    n = enc.intrinsic.shape[0]
    if reservoir is not None and len(reservoir) > 0:
        idx = rng.integers(0, len(reservoir), size=n)
        return SwapPairing(idx, reservoir.features[idx].copy(), reservoir.labels[idx].copy(), True)
    if n < 2:
        return None
    if enc.labels is None:
        raise ValueError("within-batch swapping needs labels")
    # uniform over the other n-1 rows: draw in [0, n-1) and skip self
    idx = rng.integers(0, n - 1, size=n)
    idx = idx + (idx >= np.arange(n))
    return SwapPairing(idx, enc.domain[idx].copy(), enc.labels[idx].copy(), False)


def swap_loss(
    model: TwoStreamModel,
    enc: EncodedBatch,
    cache: EncodeCache,
    pairing: SwapPairing,
    q: float,
    s_weights: np.ndarray | None = None,
) -> tuple[float, ModelGrads]:
    """Objective on the counterfactual batch [x_i; x~_d].

    The intrinsic head must still predict the true label (weighted by the
    unswapped difficulty weight); the domain head must predict the donor's
    label. Donor features are constants: no gradient reaches the encoder
    that produced them, and the intrinsic half is blocked for the domain
    head as usual, so the domain encoder receives no gradient from this
    loss at all.
    """
    if enc.labels is None:
        raise ValueError("encoded batch carries no labels")
    y = enc.labels
    if s_weights is None:
        logits_i0, logits_d0 = classify_blocked(model, enc)
        ce_i, _ = softmax_ce(logits_i0, y)
        ce_d, _ = softmax_ce(logits_d0, y)
        s_weights = difficulty_weight(ce_d.per_sample, ce_i.per_sample)

    concat_sp = np.concatenate([enc.intrinsic, pairing.donor_domain_feature], axis=1)
    logits_i = _head_forward(model.classifier_i_w, model.classifier_i_b, concat_sp)
    logits_d = _head_forward(model.classifier_d_w, model.classifier_d_b, concat_sp)

    d = model.latent_dim
    grads = ModelGrads.zeros_like(model)

    ce_w, grad_logits_i = softmax_ce(logits_i, y, sample_weights=s_weights)
    dw, db, dconcat = _head_backward(model.classifier_i_w, concat_sp, grad_logits_i)
    grads.ci_w += dw
    grads.ci_b += db
    enc_i_grads, _ = mlp_backward(model.encoder_i, cache.cache_i, dconcat[:, :d])
    grads.enc_i.add_scaled(enc_i_grads)

    gce, grad_logits_d = gce_loss(logits_d, pairing.donor_label, q)
    dw, db, _ = _head_backward(model.classifier_d_w, concat_sp, grad_logits_d)
    grads.cd_w += dw
    grads.cd_b += db

    return ce_w.value + gce.value, grads


def plain_ce_loss(
    model: TwoStreamModel, enc: EncodedBatch, cache: EncodeCache
) -> tuple[float, ModelGrads]:
    """Naive baseline: unweighted CE on the intrinsic head, no blocking.

    Gradients flow through both halves of the concatenation into both
    encoders: a single-stream fine-tuning model over the same parameters.
    """
    if enc.labels is None:
        raise ValueError("encoded batch carries no labels")
    concat = np.concatenate([enc.intrinsic, enc.domain], axis=1)
    logits = _head_forward(model.classifier_i_w, model.classifier_i_b, concat)
    ce, grad_logits = softmax_ce(logits, enc.labels)

    d = model.latent_dim
    grads = ModelGrads.zeros_like(model)
    dw, db, dconcat = _head_backward(model.classifier_i_w, concat, grad_logits)
    grads.ci_w += dw
    grads.ci_b += db
    enc_i_grads, _ = mlp_backward(model.encoder_i, cache.cache_i, dconcat[:, :d])
    grads.enc_i.add_scaled(enc_i_grads)
    enc_d_grads, _ = mlp_backward(model.encoder_d, cache.cache_d, dconcat[:, d:])
    grads.enc_d.add_scaled(enc_d_grads)
    return ce.value, grads


def total_loss(l_dis: float, l_sp: float, lam: float, swap_active: bool) -> float:
    """Combined objective: L_dis plus lam * L_sp while swapping is active."""
    if lam < 0.0:
        raise ValueError("lam must be non-negative")
    return l_dis + lam * l_sp if swap_active else l_dis
