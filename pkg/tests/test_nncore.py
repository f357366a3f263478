import numpy as np
import pytest

from hybrid_debias import losses
from hybrid_debias.datagen import FormatError
from hybrid_debias.nncore import (AdamState, DimensionError, Mlp, adam_step, backward, forward, grad_check,
                                  hidden_features, load_model, save_model, softmax)


def numeric_grads(model, loss_of_logits, x, h=1e-4):
    """Central differences over every parameter, independent of backward()."""
    out = []
    for p in model.params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_of_logits(forward(model, x))
            flat[j] = orig - h
            down = loss_of_logits(forward(model, x))
            flat[j] = orig
            gflat[j] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_zero_model_gives_zero_logits():
    m = Mlp.zeros([5, 4, 3])
    assert np.array_equal(forward(m, np.ones((2, 5))), np.zeros((2, 3)))


def test_single_layer_affine_map():
    m = Mlp([1, 1], [np.array([[2.5]])], [np.array([-1.0])])
    assert forward(m, np.array([[3.0], [0.0]])).ravel().tolist() == [6.5, -1.0]


def test_batched_forward_equals_stacked_rows():
    m = Mlp.init([6, 8, 8, 3], seed=1)
    x = np.random.default_rng(0).random((7, 6))
    stacked = np.vstack([forward(m, x[i:i + 1]) for i in range(7)])
    np.testing.assert_allclose(forward(m, x), stacked, rtol=1e-12, atol=1e-14)
    perm = np.random.default_rng(1).permutation(7)
    np.testing.assert_allclose(forward(m, x[perm]), forward(m, x)[perm], rtol=1e-12, atol=1e-14)


def test_forward_shape_mismatch():
    with pytest.raises(DimensionError):
        forward(Mlp.init([4, 3], 0), np.zeros((2, 5)))


def test_init_is_seeded_and_bounded():
    a, b = Mlp.init([432, 100, 100, 100, 10], 7), Mlp.init([432, 100, 100, 100, 10], 7)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert np.abs(a.weights[0]).max() <= 1 / np.sqrt(432)
    assert a.num_params() == 432 * 100 + 100 + 2 * (100 * 100 + 100) + 100 * 10 + 10


@pytest.mark.parametrize("logits,expected", [([0.0, 0.0], [0.5, 0.5]), ([np.log(2), 0.0], [2 / 3, 1 / 3])])
def test_softmax_closed_forms(logits, expected):
    np.testing.assert_allclose(softmax(np.array(logits)), expected, atol=1e-12)


def test_softmax_shift_invariance_and_stability():
    z = np.array([[1.0, -2.0, 0.5], [1000.0, 999.0, 990.0]])
    np.testing.assert_allclose(softmax(z + 123.4), softmax(z), atol=1e-12)
    p = softmax(z)
    assert np.all(p > 0) and np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        softmax(np.array([np.nan, 0.0]))


def test_backward_zero_upstream():
    m = Mlp.init([4, 5, 3], 0)
    dws, dbs = backward(m, np.ones((2, 4)), np.zeros((2, 3)))
    assert all(not g.any() for g in [*dws, *dbs])


def test_backward_is_linear_in_upstream():
    m = Mlp.init([4, 5, 3], 0)
    x = np.random.default_rng(2).random((3, 4))
    g = np.random.default_rng(3).normal(size=(3, 3))
    one = backward(m, x, g)
    two = backward(m, x, 2 * g)
    for a, b in zip([*one[0], *one[1]], [*two[0], *two[1]]):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12)


def test_backward_shape_mismatch():
    with pytest.raises(DimensionError):
        backward(Mlp.init([4, 3], 0), np.ones((2, 4)), np.zeros((3, 3)))


@pytest.mark.parametrize("kind", ["ce", "gce"])
@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_full_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    m = Mlp.init([5, 6, 4, 3], seed)
    x = rng.random((4, 5))
    y = rng.integers(0, 3, 4)
    fn = losses.ce_loss_fn(y) if kind == "ce" else losses.gce_loss_fn(y, 0.7)
    _, g = fn(forward(m, x))
    dws, dbs = backward(m, x, g)
    num = numeric_grads(m, lambda z: fn(z)[0], x)
    for a, n in zip([*dws, *dbs], num):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        assert (np.abs(a - n) / denom).max() < 1e-4


def test_adam_zero_gradient_leaves_params():
    m = Mlp.init([3, 2], 0)
    before = [p.copy() for p in m.params]
    st = AdamState.for_model(m)
    adam_step(m, ([np.zeros((3, 2))], [np.zeros(2)]), st)
    assert all(np.array_equal(a, b) for a, b in zip(before, m.params))
    assert st.step == 1


def test_adam_first_step_is_lr_times_sign():
    m = Mlp.zeros([3, 2])
    g = np.array([[0.5, -2.0], [1e-3, 3.0], [-0.1, 0.2]])
    st = AdamState.for_model(m, lr=1e-3)
    adam_step(m, ([g], [np.zeros(2)]), st)
    # bias correction makes m_hat = g and v_hat = g**2 after one step
    np.testing.assert_allclose(m.weights[0], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(m.weights[0], -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_two_steps_move_against_gradient():
    m = Mlp.zeros([2, 2])
    g = np.array([[1.0, -1.0], [2.0, -0.5]])
    st = AdamState.for_model(m)
    adam_step(m, ([g], [np.zeros(2)]), st)
    w1 = m.weights[0].copy()
    adam_step(m, ([g], [np.zeros(2)]), st)
    assert np.all(np.sign(w1) == -np.sign(g))
    assert np.all(np.abs(m.weights[0]) > np.abs(w1))
    assert st.step == 2


def test_adam_rejects_bad_gradients():
    m = Mlp.init([3, 2], 0)
    st = AdamState.for_model(m)
    with pytest.raises(DimensionError):
        adam_step(m, ([np.zeros((2, 2))], [np.zeros(2)]), st)
    with pytest.raises(FloatingPointError):
        adam_step(m, ([np.full((3, 2), np.nan)], [np.zeros(2)]), st)


@pytest.mark.parametrize("seed", range(5))
def test_grad_check_ce_and_gce(seed):
    rng = np.random.default_rng(100 + seed)
    m = Mlp.init([12, 10, 10, 4], seed)
    x = rng.random((8, 12))
    y = rng.integers(0, 4, 8)
    assert grad_check(m, losses.ce_loss_fn(y), x, seed=seed) < 1e-4
    assert grad_check(m, losses.gce_loss_fn(y, 0.7), x, seed=seed) < 1e-4


def test_grad_check_linear_quadratic_is_tight():
    rng = np.random.default_rng(0)
    m = Mlp.init([3, 2], 1)
    x = rng.random((5, 3))
    target = rng.random((5, 2))

    def quad(z):
        r = z - target
        return 0.5 * float((r ** 2).sum()), r

    assert grad_check(m, quad, x, n_samples=8) < 1e-6


def test_grad_check_detects_wrong_gradient():
    m = Mlp.init([3, 4, 2], 0)
    x = np.random.default_rng(0).random((4, 3))
    y = np.array([0, 1, 0, 1])
    ok = losses.ce_loss_fn(y)

    def wrong(z):
        loss, g = ok(z)
        return loss, 3 * g

    assert grad_check(m, wrong, x) > 0.5


def test_checkpoint_round_trip(tmp_path):
    m = Mlp.init([7, 5, 3], 4)
    save_model(m, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.layer_dims == [7, 5, 3]
    for a, b in zip(m.params, back.params):
        np.testing.assert_array_equal(b, a.astype(np.float32).astype(np.float64))
    raw = (tmp_path / "m").read_bytes()
    assert raw[:4] == b"DBMW"
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_model(tmp_path / "short")


def test_hidden_features_width():
    m = Mlp.init([4, 6, 5, 2], 0)
    assert hidden_features(m, np.zeros((3, 4))).shape == (3, 5)
