import numpy as np
import pytest

from driftfuse.nn import (
    Adam,
    MlpParams,
    Sgd,
    clip_global_norm,
    gce_loss,
    make_optimizer,
    mlp_backward,
    mlp_forward,
    mlp_init,
    softmax,
    softmax_ce,
)
from helpers import central_diff, logits_for_probs, max_rel_error

LN2 = 0.6931471805599453
NEG_LN_07 = 0.35667494393873245
# oracle: mpmath, (1 - 0.5**0.7) / 0.7 at 40 digits
GCE_Q07_P05 = 0.5491825618964884


def small_mlp(rng, sizes=(5, 4, 3), dropout=0.0):
    return mlp_init(list(sizes), rng, dropout)


def test_forward_zero_params_gives_zero():
    params = MlpParams([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
    y, _ = mlp_forward(params, np.random.default_rng(0).standard_normal((6, 3)))
    np.testing.assert_array_equal(y, np.zeros((6, 2)))


def test_forward_identity_layer():
    params = MlpParams([np.eye(4)], [np.zeros(4)])
    x = np.random.default_rng(1).standard_normal((5, 4))
    y, _ = mlp_forward(params, x)
    np.testing.assert_array_equal(y, x)


def test_forward_eval_deterministic():
    rng = np.random.default_rng(2)
    params = small_mlp(rng, dropout=0.5)
    x = rng.standard_normal((4, 5))
    y1, _ = mlp_forward(params, x, mode="eval")
    y2, _ = mlp_forward(params, x, mode="eval")
    np.testing.assert_array_equal(y1, y2)


def test_forward_width_mismatch():
    params = small_mlp(np.random.default_rng(0))
    with pytest.raises(ValueError):
        mlp_forward(params, np.zeros((2, 7)))


def test_dropout_reproducible_bit_for_bit():
    rng = np.random.default_rng(3)
    params = small_mlp(rng, sizes=(6, 8, 8, 4), dropout=0.3)
    x = rng.standard_normal((10, 6))
    y1, _ = mlp_forward(params, x, mode="train", rng=np.random.default_rng(99))
    y2, _ = mlp_forward(params, x, mode="train", rng=np.random.default_rng(99))
    np.testing.assert_array_equal(y1, y2)
    y3, _ = mlp_forward(params, x, mode="train", rng=np.random.default_rng(100))
    assert not np.array_equal(y1, y3)


def test_dropout_requires_rng():
    params = small_mlp(np.random.default_rng(0), dropout=0.2)
    with pytest.raises(ValueError):
        mlp_forward(params, np.zeros((2, 5)), mode="train")


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(4)
    p = softmax(rng.standard_normal((32, 9)) * 20)
    np.testing.assert_allclose(p.sum(axis=1), np.ones(32), atol=1e-12)


def test_ce_uniform_logits():
    loss, _ = softmax_ce(np.zeros((3, 4)), np.array([0, 1, 3]))
    np.testing.assert_allclose(loss.per_sample, np.full(3, np.log(4.0)), atol=1e-12)
    assert loss.value == pytest.approx(np.log(4.0), abs=1e-12)


def test_ce_confident_limit():
    logits = np.array([[50.0, 0.0, 0.0]])
    loss, _ = softmax_ce(logits, np.array([0]))
    assert loss.value < 1e-12


def test_ce_known_probability():
    logits = logits_for_probs([[0.7, 0.3]])
    loss, _ = softmax_ce(logits, np.array([0]))
    assert loss.value == pytest.approx(NEG_LN_07, abs=1e-12)


def test_ce_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((6, 4))
    y = rng.integers(0, 4, size=6)
    _, grad = softmax_ce(logits, y)
    expect = softmax(logits)
    expect[np.arange(6), y] -= 1.0
    np.testing.assert_allclose(grad, expect / 6, atol=1e-12)


def test_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        softmax_ce(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        softmax_ce(np.zeros((2, 3)), np.array([-1, 0]))


def test_gce_q1_is_one_minus_p():
    rng = np.random.default_rng(6)
    probs = rng.dirichlet(np.ones(5), size=8)
    y = rng.integers(0, 5, size=8)
    loss, _ = gce_loss(logits_for_probs(probs), y, q=1.0)
    p = softmax(logits_for_probs(probs))
    np.testing.assert_allclose(loss.per_sample, 1.0 - p[np.arange(8), y], atol=1e-12)


def test_gce_small_q_matches_ce():
    for p in np.arange(0.1, 0.95, 0.1):
        logits = logits_for_probs([[p, 1.0 - p]])
        y = np.array([0])
        gce, _ = gce_loss(logits, y, q=1e-4)
        ce, _ = softmax_ce(logits, y)
        assert abs(gce.value - ce.value) < 1e-3


def test_gce_frozen_value():
    loss, _ = gce_loss(logits_for_probs([[0.5, 0.5]]), np.array([0]), q=0.7)
    assert loss.value == pytest.approx(GCE_Q07_P05, abs=1e-12)


def test_gce_range():
    rng = np.random.default_rng(7)
    for q in (0.1, 0.5, 0.7, 1.0):
        logits = rng.standard_normal((16, 6)) * 5
        y = rng.integers(0, 6, size=16)
        loss, _ = gce_loss(logits, y, q)
        assert np.all(loss.per_sample >= 0.0)
        assert np.all(loss.per_sample <= 1.0 / q + 1e-12)


def test_gce_rejects_bad_q():
    for q in (0.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            gce_loss(np.zeros((1, 2)), np.array([0]), q)


@pytest.mark.parametrize("q", [0.3, 0.7, 1.0])
def test_gce_gradient_finite_difference(q):
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, size=5)
    _, grad = gce_loss(logits, y, q)
    numeric = central_diff(lambda: gce_loss(logits, y, q)[0].value, [logits])
    assert max_rel_error([grad], numeric) < 1e-4


def test_mlp_ce_gradient_finite_difference():
    rng = np.random.default_rng(9)
    params = mlp_init([6, 5, 4], rng)
    x = rng.standard_normal((7, 6)) + 0.1
    y = rng.integers(0, 4, size=7)

    def loss_fn():
        out, _ = mlp_forward(params, x)
        return softmax_ce(out, y)[0].value

    out, cache = mlp_forward(params, x)
    _, grad_logits = softmax_ce(out, y)
    grads, _ = mlp_backward(params, cache, grad_logits)
    numeric = central_diff(loss_fn, params.arrays())
    assert max_rel_error(grads.arrays(), numeric) < 1e-4


def test_mlp_input_gradient():
    rng = np.random.default_rng(10)
    params = mlp_init([4, 4, 3], rng)
    x = rng.standard_normal((3, 4))
    y = rng.integers(0, 3, size=3)
    out, cache = mlp_forward(params, x)
    _, grad_logits = softmax_ce(out, y)
    _, grad_x = mlp_backward(params, cache, grad_logits)

    def loss_fn():
        out2, _ = mlp_forward(params, x)
        return softmax_ce(out2, y)[0].value

    numeric = central_diff(loss_fn, [x])
    assert max_rel_error([grad_x], numeric) < 1e-4


def test_adam_zero_gradient_keeps_params():
    rng = np.random.default_rng(11)
    arrays = [rng.standard_normal((3, 3)), rng.standard_normal(3)]
    before = [a.copy() for a in arrays]
    opt = Adam(lr=0.1)
    opt.step(arrays, [np.zeros_like(a) for a in arrays])
    for a, b in zip(arrays, before):
        np.testing.assert_array_equal(a, b)


def test_sgd_unit_learning_rate():
    arrays = [np.array([1.0, 2.0])]
    g = [np.array([0.25, -0.5])]
    Sgd(lr=1.0).step(arrays, g)
    np.testing.assert_array_equal(arrays[0], [0.75, 2.5])


def test_adam_first_step_magnitude():
    # closed form: first update is lr * g / (|g| + eps) ~= lr * sign(g)
    arrays = [np.array([0.0, 0.0])]
    g = [np.array([0.3, -2.0])]
    opt = Adam(lr=1e-3)
    opt.step(arrays, g)
    np.testing.assert_allclose(np.abs(arrays[0]), [1e-3, 1e-3], rtol=1e-6)
    assert arrays[0][0] < 0 and arrays[0][1] > 0


def test_make_optimizer_names():
    assert isinstance(make_optimizer("adam", 0.1), Adam)
    assert isinstance(make_optimizer("sgd", 0.1), Sgd)
    with pytest.raises(ValueError):
        make_optimizer("lbfgs", 0.1)


def test_optimizer_shape_mismatch():
    with pytest.raises(ValueError):
        Adam().step([np.zeros((2, 2))], [np.zeros((3, 2))])


def test_clip_global_norm():
    g = [np.array([3.0, 0.0]), np.array([[0.0, 4.0]])]
    norm = clip_global_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum(float(np.sum(x * x)) for x in g))
    assert total == pytest.approx(1.0)
    # below the threshold nothing changes
    g2 = [np.array([0.3, 0.4])]
    clip_global_norm(g2, 1.0)
    np.testing.assert_array_equal(g2[0], [0.3, 0.4])
