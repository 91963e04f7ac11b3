"""Dense float64 matrix kernel: validation, full QR, norms, clamping.

Everything here operates on plain 2-D ``numpy`` arrays and is pure; the
heavier modules (fusion, nn) build on these primitives.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_matrix",
    "qr_decompose",
    "frobenius_diff",
    "max_abs",
    "clamp01",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise ValueError(f"{name} must be nonempty, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def qr_decompose(w) -> tuple[np.ndarray, np.ndarray]:
    """Full Householder QR of an m-by-n matrix.

    Returns (Q, R) with Q m-by-m orthogonal and R m-by-n upper triangular.
    The sign convention fixes diag(R) >= 0, which makes the decomposition
    deterministic; entries below the diagonal of R are set to exact zeros.
    """
    w = as_matrix(w, "W")
    m, n = w.shape
    q = np.eye(m)
    r = w.copy()
    for k in range(min(m, n)):
        x = r[k:, k]
        norm_x = float(np.linalg.norm(x))
        if norm_x == 0.0:
            continue
        v = x.copy()
        v[0] += np.copysign(norm_x, x[0] if x[0] != 0.0 else 1.0)
        vtv = float(v @ v)
        if vtv == 0.0:
            continue
        # H = I - 2 v v^T / (v^T v), applied as rank-1 updates
        u = 2.0 * v / vtv
        r[k:, k:] -= np.outer(u, v @ r[k:, k:])
        q[:, k:] -= np.outer(q[:, k:] @ v, u)
    # deterministic sign: non-negative diagonal of R
    for k in range(min(m, n)):
        if r[k, k] < 0.0:
            r[k, :] = -r[k, :]
            q[:, k] = -q[:, k]
    # upper triangular by construction
    tri = np.tril_indices(m, k=-1, m=n)
    r[tri] = 0.0
    return q, r


def frobenius_diff(a, b, mode: str = "scalar"):
    """Discrepancy between equal-shaped matrices.

    scalar mode: sqrt(sum((A-B)^2)) as a float.
    elementwise mode: |A_ij - B_ij| as a same-shape array.
    """
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    if mode == "scalar":
        return float(np.sqrt(np.sum(diff * diff)))
    if mode == "elementwise":
        return np.abs(diff)
    raise ValueError(f"unknown mode {mode!r}")


def max_abs(a) -> float:
    """Largest absolute entry of a nonempty matrix."""
    a = as_matrix(a, "A")
    return float(np.max(np.abs(a)))


def clamp01(x):
    """Clamp a finite scalar or array into [0, 1]."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("clamp01 requires finite input")
    clipped = np.clip(arr, 0.0, 1.0)
    if np.isscalar(x) or arr.ndim == 0:
        return float(clipped)
    return clipped
