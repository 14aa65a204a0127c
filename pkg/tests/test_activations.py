from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsemax_sae.activations import (
    JumpReluParams,
    activate,
    activate_backward,
    batch_topk,
    jumprelu,
    relu,
    softmax,
    softmax_vjp,
    sparsemax,
    sparsemax_oracle,
    sparsemax_rows,
    sparsemax_vjp,
    topk,
)
from sparsemax_sae.numeric import NumericError, ShapeError

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def vectors(min_size=1, max_size=16):
    return st.integers(min_size, max_size).flatmap(lambda m: arrays(np.float64, m, elements=finite))


# --------------------------------------------------------------------------
# sparsemax examples
# --------------------------------------------------------------------------


@pytest.mark.parametrize(
    "z, p, tau, k",
    [
        ([0.0, 0.0], [0.5, 0.5], -0.5, 2),
        ([2.0, 0.5], [1.0, 0.0], 1.0, 1),
        # hand-worked: tau = (0.6 + 0.5 + 0.1 - 1) / 3
        ([0.6, 0.5, 0.1], [0.8 / 1.5, 0.65 / 1.5, 0.05 / 1.5], 0.2 / 3, 3),
        ([1.5, 0.3, 0.2], [1.0, 0.0, 0.0], 0.5, 1),
    ],
)
def test_sparsemax_examples(z, p, tau, k):
    code = sparsemax(z)
    assert np.allclose(code.values, p, rtol=0, atol=1e-12)
    assert code.threshold == pytest.approx(tau, abs=1e-12)
    assert code.support_size == k
    oracle = sparsemax_oracle(z)
    assert np.allclose(oracle.values, p, rtol=0, atol=1e-12)
    assert oracle.support_size == k


def test_sparsemax_rows_matches_vector_form():
    z = np.random.default_rng(0).normal(size=(5, 7))
    p, tau, k = sparsemax_rows(z)
    for i in range(5):
        code = sparsemax(z[i])
        assert np.array_equal(p[i], code.values)
        assert tau[i] == code.threshold
        assert k[i] == code.support_size


def test_sparsemax_rejects_bad_input():
    with pytest.raises(ShapeError):
        sparsemax(np.zeros(0))
    with pytest.raises(NumericError):
        sparsemax([1.0, np.nan])
    with pytest.raises(ShapeError):
        sparsemax(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        sparsemax_oracle(np.zeros(17))


def test_oracle_agrees_on_random_vectors():
    rng = np.random.default_rng(1)
    for m in range(2, 17):
        for _ in range(20):
            z = rng.normal(size=m) * rng.uniform(0.1, 5)
            assert np.max(np.abs(sparsemax(z).values - sparsemax_oracle(z).values)) <= 1e-9


# --------------------------------------------------------------------------
# sparsemax invariants
# --------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(vectors(), st.floats(-100, 100))
def test_translation_invariance(z, c):
    a, b = sparsemax(z), sparsemax(z + c)
    # exact support equality only holds away from ties at tau, which shifting can flip
    assume(np.min(np.abs(z - a.threshold)) > 1e-9)
    assert np.array_equal(a.support, b.support)
    assert np.allclose(a.values, b.values, rtol=0, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(vectors(), st.randoms(use_true_random=False))
def test_permutation_equivariance(z, rnd):
    perm = np.array(rnd.sample(range(z.size), z.size), dtype=int)
    a, b = sparsemax(z), sparsemax(z[perm])
    assert np.allclose(a.values[perm], b.values, rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vectors(max_size=64))
def test_simplex_output(z):
    code = sparsemax(z)
    assert abs(code.values.sum() - 1.0) <= 1e-9
    assert np.all(code.values >= 0)
    assert code.support_size >= 1
    # on the support, p = z - tau exactly
    assert np.array_equal(code.values[code.support], z[code.support] - code.threshold)


def test_simplex_output_large_m():
    rng = np.random.default_rng(2)
    for m in (100, 1000, 4096):
        z = rng.normal(size=(10, m)) * 3
        p, _, k = sparsemax_rows(z)
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9)
        assert np.all(p >= 0) and np.all(k >= 1)


@settings(max_examples=200, deadline=None)
@given(vectors(min_size=2), st.floats(1.0, 50.0))
def test_scaling_never_grows_support(z, t):
    assert sparsemax(z * t).support_size <= sparsemax(z).support_size


def test_large_scale_gives_one_hot():
    z = np.array([0.3, 0.9, 0.85, -1.0])
    code = sparsemax(z * 1e3)
    assert np.array_equal(code.values, [0.0, 1.0, 0.0, 0.0])


def exact_gap(base: float, gap: float) -> float:
    """Smallest float whose real distance above ``base`` is at least ``gap``."""
    top = base + gap
    while Fraction(top) - Fraction(base) < Fraction(gap):
        top = np.nextafter(top, np.inf)
    return top


@settings(max_examples=100, deadline=None)
@given(vectors(min_size=2), st.floats(1.0, 20.0))
def test_one_hot_margin(z, gap):
    i = int(np.argmax(z))
    z = z.copy()
    z[i] = exact_gap(np.max(np.delete(z, i)), gap)
    assert sparsemax(z).support_size == 1


def test_unit_margin_with_tied_runners_up():
    z = np.full(5, 1.72284263)
    z[0] = exact_gap(z[1], 1.0)
    code = sparsemax(z)
    assert code.support_size == 1
    assert np.array_equal(code.values[1:], np.zeros(4))


def test_tied_scores_share_membership():
    code = sparsemax(np.array([0.5, 0.2, 0.2, 0.2, -3.0]))
    assert list(code.support) == [0, 1, 2, 3]


# --------------------------------------------------------------------------
# sparsemax gradient
# --------------------------------------------------------------------------


def test_vjp_constant_upstream_full_support():
    code = sparsemax([0.1, 0.2, 0.15])
    assert code.support_size == 3
    assert np.allclose(sparsemax_vjp(code, np.full(3, 2.5)), 0.0, atol=1e-15)


def test_vjp_off_support_upstream():
    code = sparsemax([2.0, 0.1, 0.0])
    up = np.array([0.0, 3.0, -1.0])
    assert np.array_equal(sparsemax_vjp(code, up), np.zeros(3))


def test_vjp_matches_finite_differences():
    rng = np.random.default_rng(4)
    h = 1e-6
    for _ in range(50):
        while True:
            z = rng.normal(size=8)
            code = sparsemax(z)
            if np.min(np.abs(z - code.threshold)) >= 1e-3:
                break
        up = rng.normal(size=8)
        fd = np.array([
            (sparsemax(z + h * e).values @ up - sparsemax(z - h * e).values @ up) / (2 * h)
            for e in np.eye(8)
        ])
        assert np.max(np.abs(sparsemax_vjp(code, up) - fd)) <= 1e-5


# --------------------------------------------------------------------------
# softmax / relu / jumprelu
# --------------------------------------------------------------------------


def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    big = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(big)) and big[0] == 1.0 and big[1] < 1e-300
    assert np.allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_vjp_matches_finite_differences():
    rng = np.random.default_rng(5)
    z, up = rng.normal(size=6), rng.normal(size=6)
    h = 1e-6
    fd = np.array([(softmax(z + h * e) @ up - softmax(z - h * e) @ up) / (2 * h) for e in np.eye(6)])
    assert np.allclose(softmax_vjp(softmax(z), up), fd, atol=1e-8)


def test_relu_examples():
    assert np.array_equal(relu([-1.0, 0.0, 2.0]), [0.0, 0.0, 2.0])
    assert np.array_equal(relu([-3.0, -0.1]), [0.0, 0.0])


def test_relu_gradient_mask():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(3, 5))
    z[np.abs(z) < 1e-3] = 0.5
    up = rng.normal(size=(3, 5))
    _, ctx = activate("relu", z)
    h = 1e-6
    fd = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        e = np.zeros_like(z)
        e[idx] = h
        fd[idx] = (np.sum(relu(z + e) * up) - np.sum(relu(z - e) * up)) / (2 * h)
    assert np.allclose(activate_backward(ctx, up), fd, atol=1e-8)


def test_jumprelu_zero_threshold_is_relu():
    z = np.array([0.3, 1.2, 2.0, 0.0, -1.0])
    out, _ = jumprelu(z, JumpReluParams(np.zeros(5)))
    assert np.array_equal(out, relu(z))


def test_jumprelu_definition():
    out, _ = jumprelu(np.array([0.5, 2.0]), JumpReluParams(np.array([1.0, 1.0])))
    assert np.array_equal(out, [0.0, 2.0])


def test_jumprelu_ste_by_hand():
    # bandwidth 1e-3: the rectangle covers |z - theta| < 5e-4
    z = np.array([0.5, 1.0004, 2.0002])
    theta = np.array([1.0, 1.0, 2.0])
    out, info = jumprelu(z, JumpReluParams(theta, 1e-3))
    assert np.array_equal(out, [0.0, 1.0004, 2.0002])
    assert np.allclose(info.theta_grad_l0, [0.0, -1000.0, -1000.0], rtol=1e-12)
    assert np.allclose(info.theta_grad_out, [0.0, -1000.0, -2000.0], rtol=1e-12)


def test_jumprelu_params_validation():
    with pytest.raises(ValueError):
        JumpReluParams(np.array([-0.1]))
    with pytest.raises(ValueError):
        JumpReluParams(np.array([0.1]), bandwidth=0.0)


# --------------------------------------------------------------------------
# topk / batch_topk
# --------------------------------------------------------------------------


def test_topk_examples():
    assert np.array_equal(topk(np.array([3.0, 1.0, 2.0]), 2), [3.0, 0.0, 2.0])
    z = np.array([0.5, -1.0, 2.0, 0.1])
    assert np.array_equal(topk(z, 4), relu(z))


def test_topk_tie_break_lowest_index():
    assert np.array_equal(topk(np.array([1.0, 1.0, 1.0]), 1), [1.0, 0.0, 0.0])
    assert np.array_equal(topk(np.array([0.0, 2.0, 2.0, 2.0]), 2), [0.0, 2.0, 2.0, 0.0])


def test_topk_bad_k():
    with pytest.raises(ValueError):
        topk(np.ones(3), 0)
    with pytest.raises(ValueError):
        topk(np.ones(3), 4)


def test_batch_topk_example():
    z = np.array([[5.0, 0.1], [4.0, 3.0]])
    out = batch_topk(z, 1)
    assert np.array_equal(out, [[5.0, 0.0], [4.0, 0.0]])
    # sort-all-entries oracle
    cut = np.sort(z.ravel())[-2]
    assert np.array_equal(out, np.where(z >= cut, z, 0.0))


def test_batch_topk_single_row_is_topk():
    z = np.random.default_rng(7).normal(size=(1, 10))
    assert np.array_equal(batch_topk(z, 3), topk(z, 3))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(2, 12), st.data())
def test_topk_support_sizes(n, m, data):
    k = data.draw(st.integers(1, m - 1))
    z = data.draw(arrays(np.float64, (n, m), elements=st.floats(0.01, 10), unique=True))
    assert np.all(np.count_nonzero(topk(z, k), axis=1) == k)
    assert np.count_nonzero(batch_topk(z, k)) == n * k


def test_activate_unknown_kind():
    with pytest.raises(ValueError):
        activate("tanh", np.zeros((1, 2)))
