"""Task-boundary weight fusion for the intrinsic encoder.

At the end of a task the encoder's weight matrices are QR-captured; at the
start of the next task each layer is re-drawn and blended with the old
weights under a mask built from the discrepancy between the fresh draw's
projection onto the old orthogonal basis and the old structural
coefficients. Small discrepancy keeps the old weights, saturated
discrepancy hands the entry to the fresh draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix, clamp01, frobenius_diff, max_abs, qr_decompose
from .nn import MlpParams
from .disentangle import TwoStreamModel

__all__ = [
    "FusionConfig",
    "FusionSnapshot",
    "capture_structure",
    "fusion_mask",
    "fuse_weights",
    "fuse_encoder",
]


@dataclass
class FusionConfig:
    beta: float = 0.1
    mask_mode: str = "elementwise"  # "elementwise" | "scalar"
    fuse_biases: bool = False
    init_mode: str = "kaiming"      # "kaiming" | "prev" (testing hook)
    force_mask: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.mask_mode not in ("elementwise", "scalar"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.init_mode not in ("kaiming", "prev"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")


@dataclass
class FusionSnapshot:
    """Per-layer (Q, R) of the intrinsic encoder's weights at task end."""

    qs: list[np.ndarray]
    rs: list[np.ndarray]
    captured_task: int
    bias_qs: list[np.ndarray] | None = None
    bias_rs: list[np.ndarray] | None = None


def capture_structure(
    encoder_i: MlpParams, captured_task: int = 0, include_biases: bool = False
) -> FusionSnapshot:
    """QR-decompose every weight matrix of the encoder (biases optional)."""
    qs, rs = [], []
    for w in encoder_i.weights:
        q, r = qr_decompose(w)
        qs.append(q)
        rs.append(r)
    bias_qs = bias_rs = None
    if include_biases:
        bias_qs, bias_rs = [], []
        for b in encoder_i.biases:
            q, r = qr_decompose(b.reshape(-1, 1))
            bias_qs.append(q)
            bias_rs.append(r)
    return FusionSnapshot(qs, rs, captured_task, bias_qs, bias_rs)


def fusion_mask(q: np.ndarray, r: np.ndarray, w_init, cfg: FusionConfig) -> np.ndarray:
    """Adaptive mask from the projection discrepancy.

    Elementwise mode (default): clamp01(|P - R| / max|R| + beta) per entry
    with P = Q^T W_init. Scalar mode collapses |P - R| to its Frobenius
    norm and returns a 1x1 matrix. A zero previous weight (max|R| = 0)
    yields an all-ones mask: nothing to preserve.
    """
    w_init = as_matrix(w_init, "W_init")
    if q.shape[1] != w_init.shape[0] or r.shape != w_init.shape:
        raise ValueError("snapshot shapes inconsistent with W_init")
    p = q.T @ w_init
    denom = max_abs(r)
    if denom == 0.0:
        if cfg.mask_mode == "scalar":
            return np.ones((1, 1))
        return np.ones_like(w_init)
    if cfg.mask_mode == "scalar":
        val = clamp01(frobenius_diff(p, r, mode="scalar") / denom + cfg.beta)
        return np.array([[val]])
    return clamp01(frobenius_diff(p, r, mode="elementwise") / denom + cfg.beta)


def fuse_weights(w_prev: np.ndarray, w_init: np.ndarray, m) -> np.ndarray:
    """(1 - M) * W_prev + M * W_init, elementwise (M broadcasts).

    Evaluated so the boundary identities are exact: M=0 returns W_prev
    bit-for-bit, M=1 returns W_init, and equal operands pass through
    unchanged for any M.
    """
    if w_prev.shape != w_init.shape:
        raise ValueError("operand shapes differ")
    m = np.asarray(m, dtype=np.float64)
    blended = w_prev + m * (w_init - w_prev)
    return np.where(m >= 1.0, w_init, np.where(m <= 0.0, w_prev, blended))


def fuse_encoder(
    prev_model: TwoStreamModel,
    snapshot: FusionSnapshot,
    rng: np.random.Generator,
    cfg: FusionConfig,
) -> TwoStreamModel:
    """Model for the next task: masked-fused intrinsic encoder weights,
    everything else carried over unchanged."""
    model = prev_model.copy()
    enc = model.encoder_i
    if len(snapshot.qs) != enc.num_layers:
        raise ValueError("snapshot layer count does not match the encoder")
    for i, w_prev in enumerate(enc.weights):
        w_init = _draw_init(w_prev, rng, cfg)
        mask = _layer_mask(snapshot.qs[i], snapshot.rs[i], w_init, cfg)
        enc.weights[i] = fuse_weights(w_prev, w_init, mask)
    if cfg.fuse_biases:
        if snapshot.bias_qs is None:
            raise ValueError("snapshot was captured without biases")
        for i, b_prev in enumerate(enc.biases):
            col_prev = b_prev.reshape(-1, 1)
            col_init = _draw_init(col_prev, rng, cfg)
            mask = _layer_mask(snapshot.bias_qs[i], snapshot.bias_rs[i], col_init, cfg)
            enc.biases[i] = fuse_weights(col_prev, col_init, mask).reshape(-1)
    # biases (when not fused) and all other components keep previous values
    return model


def _draw_init(w_prev: np.ndarray, rng: np.random.Generator, cfg: FusionConfig) -> np.ndarray:
    if cfg.init_mode == "prev":
        return w_prev.copy()
    limit = np.sqrt(6.0 / w_prev.shape[0])
    return rng.uniform(-limit, limit, size=w_prev.shape)


def _layer_mask(q, r, w_init, cfg: FusionConfig) -> np.ndarray:
    if cfg.force_mask is not None:
        return np.full_like(w_init, clamp01(cfg.force_mask))
    return fusion_mask(q, r, w_init, cfg)
