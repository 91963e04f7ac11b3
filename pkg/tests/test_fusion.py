import numpy as np
import pytest

from driftfuse.disentangle import build_model
from driftfuse.fusion import (
    FusionConfig,
    capture_structure,
    fuse_encoder,
    fuse_weights,
    fusion_mask,
)
from driftfuse.linalg import clamp01, frobenius_diff, max_abs
from driftfuse.nn import MlpParams


def identity_encoder(d=4, layers=3):
    return MlpParams([np.eye(d) for _ in range(layers)], [np.zeros(d) for _ in range(layers)])


def toy_model(seed=0):
    return build_model(6, 3, 5, 4, np.random.default_rng(seed))


def test_capture_identity_layers():
    snap = capture_structure(identity_encoder(), captured_task=2)
    assert snap.captured_task == 2
    for q, r in zip(snap.qs, snap.rs):
        np.testing.assert_array_equal(q, np.eye(4))
        np.testing.assert_array_equal(r, np.eye(4))


def test_capture_reconstructs_weights():
    model = toy_model(1)
    snap = capture_structure(model.encoder_i)
    for q, r, w in zip(snap.qs, snap.rs, model.encoder_i.weights):
        rel = np.linalg.norm(q @ r - w) / np.linalg.norm(w)
        assert rel < 1e-10
        assert np.linalg.norm(q.T @ q - np.eye(q.shape[0])) < 1e-10


def test_capture_deterministic():
    model = toy_model(2)
    a = capture_structure(model.encoder_i)
    b = capture_structure(model.encoder_i)
    for qa, qb in zip(a.qs, b.qs):
        np.testing.assert_array_equal(qa, qb)
    for ra, rb in zip(a.rs, b.rs):
        np.testing.assert_array_equal(ra, rb)


def test_mask_identity_init_gives_exact_beta():
    # a positive-diagonal W has an exactly representable QR (Q = I), so the
    # identity-init mask equals beta bit-for-bit
    w = np.diag([1.0, 2.0, 0.5])
    q, r = np.eye(3), w.copy()
    cfg = FusionConfig(beta=0.25)
    m = fusion_mask(q, r, w, cfg)
    np.testing.assert_array_equal(m, np.full((3, 3), 0.25))


def test_mask_identity_init_near_beta_for_random_weights():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((8, 5))
    from driftfuse.linalg import qr_decompose

    q, r = qr_decompose(w)
    cfg = FusionConfig(beta=0.1)
    m = fusion_mask(q, r, w, cfg)
    np.testing.assert_allclose(m, 0.1, atol=1e-12)


def test_mask_worked_example():
    q, r = np.eye(2), np.eye(2)
    w_init = np.array([[1.2, 0.0], [0.0, 1.2]])
    m = fusion_mask(q, r, w_init, FusionConfig(beta=0.1))
    np.testing.assert_allclose(m, [[0.3, 0.1], [0.1, 0.3]], atol=1e-12)


def test_mask_saturates():
    q, r = np.eye(2), np.eye(2) * 0.01
    w_init = np.array([[5.0, 0.0], [0.0, 0.0]])
    m = fusion_mask(q, r, w_init, FusionConfig(beta=0.0))
    assert m[0, 0] == 1.0


def test_mask_zero_previous_weights():
    q = np.eye(3)
    r = np.zeros((3, 3))
    m = fusion_mask(q, r, np.random.default_rng(4).standard_normal((3, 3)), FusionConfig())
    np.testing.assert_array_equal(m, 1.0)


def test_mask_scalar_mode():
    rng = np.random.default_rng(5)
    w_prev = rng.standard_normal((6, 4))
    from driftfuse.linalg import qr_decompose

    q, r = qr_decompose(w_prev)
    w_init = rng.standard_normal((6, 4))
    cfg = FusionConfig(beta=0.05, mask_mode="scalar")
    m = fusion_mask(q, r, w_init, cfg)
    assert m.shape == (1, 1)
    p = q.T @ w_init
    expected = clamp01(frobenius_diff(p, r, "scalar") / max_abs(r) + 0.05)
    assert m[0, 0] == expected


def test_mask_range_and_beta_monotonicity():
    rng = np.random.default_rng(6)
    from driftfuse.linalg import qr_decompose

    w_prev = rng.standard_normal((7, 7))
    q, r = qr_decompose(w_prev)
    w_init = rng.standard_normal((7, 7))
    prev = None
    for beta in (0.0, 0.2, 0.5, 1.0):
        m = fusion_mask(q, r, w_init, FusionConfig(beta=beta))
        assert np.all(m >= 0.0) and np.all(m <= 1.0)
        if prev is not None:
            assert np.all(m >= prev)
        prev = m


def test_fuse_weights_boundary_identities():
    rng = np.random.default_rng(7)
    w_prev = rng.standard_normal((5, 4))
    w_init = rng.standard_normal((5, 4))
    np.testing.assert_array_equal(fuse_weights(w_prev, w_init, np.zeros((5, 4))), w_prev)
    np.testing.assert_array_equal(fuse_weights(w_prev, w_init, np.ones((5, 4))), w_init)
    half = fuse_weights(w_prev, w_init, np.full((5, 4), 0.5))
    np.testing.assert_allclose(half, (w_prev + w_init) / 2, atol=1e-15)


def test_fuse_weights_equal_operands_pass_through():
    rng = np.random.default_rng(8)
    w = rng.standard_normal((6, 6))
    for m in (np.zeros((6, 6)), np.full((6, 6), 0.37), np.ones((6, 6)), rng.random((6, 6))):
        np.testing.assert_array_equal(fuse_weights(w, w.copy(), m), w)


def test_fuse_weights_scalar_mask_broadcasts():
    rng = np.random.default_rng(9)
    w_prev = rng.standard_normal((3, 3))
    w_init = rng.standard_normal((3, 3))
    out = fuse_weights(w_prev, w_init, np.array([[1.0]]))
    np.testing.assert_array_equal(out, w_init)


def test_fuse_encoder_identity_when_beta_zero_and_prev_init():
    model = toy_model(10)
    snap = capture_structure(model.encoder_i)
    cfg = FusionConfig(beta=0.0, init_mode="prev")
    fused = fuse_encoder(model, snap, np.random.default_rng(0), cfg)
    for a, b in zip(fused.encoder_i.weights, model.encoder_i.weights):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(fused.encoder_i.biases, model.encoder_i.biases):
        np.testing.assert_array_equal(a, b)


def test_fuse_encoder_forced_full_plasticity_takes_fresh_init():
    model = toy_model(11)
    snap = capture_structure(model.encoder_i)
    cfg = FusionConfig(force_mask=1.0)
    fused = fuse_encoder(model, snap, np.random.default_rng(123), cfg)
    # replay the same draw order to recover the fresh init
    rng = np.random.default_rng(123)
    for w_prev, w_new in zip(model.encoder_i.weights, fused.encoder_i.weights):
        limit = np.sqrt(6.0 / w_prev.shape[0])
        expected = rng.uniform(-limit, limit, size=w_prev.shape)
        np.testing.assert_array_equal(w_new, expected)


def test_fuse_encoder_leaves_other_components_bit_identical():
    model = toy_model(12)
    snap = capture_structure(model.encoder_i)
    fused = fuse_encoder(model, snap, np.random.default_rng(1), FusionConfig(beta=0.1))
    for a, b in zip(fused.encoder_d.arrays(), model.encoder_d.arrays()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(fused.classifier_i_w, model.classifier_i_w)
    np.testing.assert_array_equal(fused.classifier_i_b, model.classifier_i_b)
    np.testing.assert_array_equal(fused.classifier_d_w, model.classifier_d_w)
    np.testing.assert_array_equal(fused.classifier_d_b, model.classifier_d_b)
    # intrinsic-encoder biases are copied, not fused
    for a, b in zip(fused.encoder_i.biases, model.encoder_i.biases):
        np.testing.assert_array_equal(a, b)


def test_fuse_encoder_deterministic():
    model = toy_model(13)
    snap = capture_structure(model.encoder_i)
    a = fuse_encoder(model, snap, np.random.default_rng(7), FusionConfig())
    b = fuse_encoder(model, snap, np.random.default_rng(7), FusionConfig())
    for wa, wb in zip(a.encoder_i.weights, b.encoder_i.weights):
        np.testing.assert_array_equal(wa, wb)


def test_fuse_encoder_with_biases():
    model = toy_model(14)
    model.encoder_i.biases = [b + 0.5 for b in model.encoder_i.biases]
    snap = capture_structure(model.encoder_i, include_biases=True)
    assert snap.bias_qs is not None
    cfg = FusionConfig(beta=0.0, fuse_biases=True, init_mode="prev")
    fused = fuse_encoder(model, snap, np.random.default_rng(2), cfg)
    for a, b in zip(fused.encoder_i.biases, model.encoder_i.biases):
        np.testing.assert_array_equal(a, b)
    # without a bias capture the flag is an error
    snap2 = capture_structure(model.encoder_i)
    with pytest.raises(ValueError):
        fuse_encoder(model, snap2, np.random.default_rng(2), cfg)


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(beta=1.5)
    with pytest.raises(ValueError):
        FusionConfig(mask_mode="rowwise")
    with pytest.raises(ValueError):
        FusionConfig(init_mode="zeros")
