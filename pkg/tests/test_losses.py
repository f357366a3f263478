import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybrid_debias.losses import LossConfig, ReweightVector, cross_entropy, gce, gce_logit_grad, reweighting_factor
from hybrid_debias.nncore import softmax

LN10 = 2.302585092994046
LN2 = 0.6931471805599453
# (1 - 0.5**0.7) / 0.7 evaluated with mpmath at 30 digits
GCE_Q07_HALF = 0.549182561896488368


def test_ce_closed_forms():
    assert cross_entropy(np.full(10, 0.1), 3) == pytest.approx(LN10, abs=1e-6)
    assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0
    assert cross_entropy(np.array([0.5, 0.5]), 0) == pytest.approx(LN2, abs=1e-6)


def test_ce_clamps_zero_probability():
    assert cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(-np.log(1e-12))


def test_ce_vectorized_and_label_range():
    p = np.array([[0.5, 0.5], [0.25, 0.75]])
    np.testing.assert_allclose(cross_entropy(p, np.array([0, 1])), [LN2, -np.log(0.75)])
    with pytest.raises(ValueError):
        cross_entropy(p, np.array([0, 2]))


def test_gce_closed_forms():
    assert gce(np.array([0.0, 1.0]), 1, q=0.3) == 0.0
    assert gce(np.array([0.75, 0.25]), 1, q=1.0) == pytest.approx(0.75, abs=1e-12)
    assert gce(np.array([0.5, 0.5]), 0, q=0.7) == pytest.approx(GCE_Q07_HALF, abs=1e-12)


@pytest.mark.parametrize("q", [0.0, -0.1, 1.5])
def test_gce_rejects_bad_q(q):
    with pytest.raises(ValueError):
        gce(np.array([0.5, 0.5]), 0, q)
    with pytest.raises(ValueError):
        LossConfig(q=q)


@given(p=st.floats(1e-9, 1.0), q=st.floats(0.01, 1.0))
def test_gce_bounded(p, q):
    v = gce(np.array([p, 1 - p]), 0, q)
    assert -1e-12 <= v <= 1 / q + 1e-12


@given(p1=st.floats(1e-6, 1.0), p2=st.floats(1e-6, 1.0), q=st.floats(0.05, 1.0))
def test_gce_decreasing_in_label_prob(p1, p2, q):
    lo, hi = sorted([p1, p2])
    assert gce(np.array([hi, 1 - hi]), 0, q) <= gce(np.array([lo, 1 - lo]), 0, q) + 1e-12


@pytest.mark.parametrize("p", np.round(np.arange(0.05, 1.0, 0.05), 2))
def test_gce_tends_to_ce_as_q_vanishes(p):
    probs = np.array([p, 1 - p])
    assert abs(gce(probs, 0, 1e-4) - cross_entropy(probs, 0)) < 1e-3


@pytest.mark.parametrize("p,q", [(0.3, 0.7), (0.8, 0.7), (0.5, 0.2), (0.9, 1.0)])
def test_gce_derivative_in_label_prob(p, q):
    h = 1e-6
    fd = (gce(np.array([p + h, 1 - p - h]), 0, q) - gce(np.array([p - h, 1 - p + h]), 0, q)) / (2 * h)
    assert fd == pytest.approx(-p ** (q - 1), rel=1e-6)


def test_gce_logit_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 5))
    y = np.array([0, 3, 2, 4])
    g = gce_logit_grad(softmax(z), y, 0.7)
    h = 1e-6
    for i in range(4):
        for j in range(5):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += h
            zm[i, j] -= h
            fd = (gce(softmax(zp[i]), y[i], 0.7) - gce(softmax(zm[i]), y[i], 0.7)) / (2 * h)
            assert g[i, j] == pytest.approx(fd, abs=1e-8)


@pytest.mark.parametrize("lb,ld,r", [(2.0, 2.0, 0.5), (0.0, 1.0, 0.0), (3.0, 1.0, 0.75), (0.0, 0.0, 0.5)])
def test_reweighting_factor_examples(lb, ld, r):
    assert reweighting_factor(lb, ld) == pytest.approx(r, abs=1e-12)


def test_reweighting_factor_rejects_negative():
    with pytest.raises(ValueError):
        reweighting_factor(-1.0, 1.0)


@given(lb=st.floats(0, 1e6), ld=st.floats(0, 1e6))
def test_reweighting_factor_complement_and_range(lb, ld):
    r = reweighting_factor(lb, ld)
    assert 0.0 <= r <= 1.0
    if lb + ld >= 1e-12:
        assert r + reweighting_factor(ld, lb) == pytest.approx(1.0, abs=1e-12)


@given(lb=st.floats(1e-6, 100), ld=st.floats(1e-6, 100), d=st.floats(1e-3, 10))
def test_reweighting_factor_monotone(lb, ld, d):
    assert reweighting_factor(lb + d, ld) >= reweighting_factor(lb, ld)
    assert reweighting_factor(lb, ld + d) <= reweighting_factor(lb, ld)


def test_reweight_vector():
    rv = ReweightVector.from_losses([3.0, 0.0], [1.0, 0.0])
    np.testing.assert_allclose(rv.r, [0.75, 0.5])
    with pytest.raises(ValueError):
        ReweightVector(np.zeros(2), np.zeros(3), np.zeros(2))
