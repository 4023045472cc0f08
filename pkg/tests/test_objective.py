import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsemask.autodiff import Tensor, sigmoid
from sparsemask.objective import (
    DEFAULT_LAMBDA,
    SparseLossConfig,
    alpha_for_stage,
    l1_loss,
    l_m,
    sparse_loss,
    task_loss,
    total_loss,
)
from sparsemask.oracles import finite_diff, relative_error

EPS = 1e-6


def test_l_m_symmetric_point():
    assert l_m(0.5, 0.5) == pytest.approx(math.log(2))
    assert l_m(0.5, 0.5) == pytest.approx(0.6931, abs=1e-4)


@pytest.mark.parametrize("q", [0.1, 0.37, 0.9])
def test_l_m_endpoints(q):
    assert l_m(1.0, q) == pytest.approx(-math.log(q))
    assert l_m(0.0, q) == pytest.approx(-math.log(1 - q))


def test_l_m_direct_evaluation():
    expect = -0.3 * math.log(0.7) - 0.7 * math.log(0.3)
    assert l_m(0.3, 0.7) == pytest.approx(expect)
    assert l_m(0.3, 0.7) == pytest.approx(0.9498, abs=1e-4)


def test_l_m_clamps_boundaries():
    assert math.isfinite(l_m(1.0, 0.0)) and math.isfinite(l_m(0.0, 1.0))
    assert l_m(1.0, 0.0) == pytest.approx(-math.log(EPS))


def test_l_m_tensor_matches_float():
    q = Tensor(np.array([0.2, 0.5, 0.8]))
    np.testing.assert_allclose(l_m(0.3, q).data, l_m(0.3, q.data))


def test_sparse_loss_symmetric_example():
    assert sparse_loss([0.5, 0.5], 0.5).item() == pytest.approx(2 * math.log(2))
    assert sparse_loss([0.5, 0.5], 0.5).item() == pytest.approx(1.3863, abs=1e-4)


@pytest.mark.parametrize("n,k", [(4, 2), (8, 2), (10, 5)])
def test_sparse_loss_floor_for_binary_gates(n, k):
    alpha = k / n
    w = np.array([EPS] * (n - k) + [1 - EPS] * k)
    floor = -alpha * math.log(alpha) - (1 - alpha) * math.log(1 - alpha)
    value = sparse_loss(w, alpha).item()
    binarize = -(EPS * math.log(EPS) + (1 - EPS) * math.log(1 - EPS))
    assert value == pytest.approx(binarize + l_m(alpha, w.mean()), rel=1e-12)
    assert value == pytest.approx(floor, abs=1e-4)


@pytest.mark.parametrize("w0", [0.05, 0.2, 0.45])
def test_binarizing_term_gradient_pushes_small_gate_down(w0):
    n = 4
    w = Tensor(np.array([w0, 0.7, 0.9, 0.3]), requires_grad=True)
    term = sparse_loss(w, 0.5) - l_m(0.5, w.mean())  # drop the mean term
    term.backward()
    expect = math.log((1 - w0) / w0) / n
    assert w.grad[0] == pytest.approx(expect, rel=1e-9)
    assert w.grad[0] > 0


def test_sparse_loss_empty_raises():
    with pytest.raises(ValueError):
        sparse_loss(np.array([]), 0.5)


def test_alpha_for_stage():
    assert alpha_for_stage(4) == 0.5
    assert alpha_for_stage(2) == 0.5
    assert alpha_for_stage(18) == pytest.approx(1 / 9)
    assert alpha_for_stage(1) == 0.5
    with pytest.raises(ValueError):
        alpha_for_stage(0)


def test_task_loss_confident_and_uniform():
    labels = np.array([[[0, 1], [2, 1]]])
    onehot = np.eye(3)[labels].transpose(0, 3, 1, 2)
    assert task_loss(Tensor(onehot * 100.0), labels).item() < 1e-30 + 1e-12
    assert task_loss(Tensor(np.zeros((1, 3, 2, 2))), labels).item() == pytest.approx(math.log(3))


def test_task_loss_hand_computation(rng):
    z = rng.standard_normal((1, 2, 2, 2))
    y = np.array([[[0, 1], [1, 1]]])
    per_pixel = []
    for i in range(2):
        for j in range(2):
            logits = z[0, :, i, j]
            per_pixel.append(-(logits[y[0, i, j]] - math.log(sum(math.exp(v) for v in logits))))
    assert task_loss(Tensor(z), y).item() == pytest.approx(np.mean(per_pixel), abs=1e-6)


def test_task_loss_ignores_label_255(rng):
    z = rng.standard_normal((1, 2, 2, 2))
    y = np.array([[[0, 255], [1, 255]]])
    ref = task_loss(Tensor(z[:, :, :, :1]), y[:, :, :1]).item()
    assert task_loss(Tensor(z), y).item() == pytest.approx(ref)


def test_task_loss_out_of_range_class():
    with pytest.raises(ValueError, match="class id 3"):
        task_loss(Tensor(np.zeros((1, 3, 1, 2))), np.array([[[0, 3]]]))


def test_total_loss_lambda_zero_is_task():
    task = Tensor(np.array(0.7))
    gates = {1: [Tensor(np.array(0.3))]}
    assert total_loss(task, gates, SparseLossConfig(lam=0.0)).item() == pytest.approx(0.7)


def test_total_loss_composes_sparse_term():
    task = Tensor(np.array(1.25))
    gates = {1: Tensor(np.array([0.5, 0.5]))}
    cfg = SparseLossConfig(lam=0.05, alpha_override={1: 0.5})
    assert total_loss(task, gates, cfg).item() == pytest.approx(1.25 + 0.05 * 2 * math.log(2))


def test_total_loss_defaults():
    assert SparseLossConfig().lam == DEFAULT_LAMBDA == 0.01
    task = Tensor(np.array(0.0))
    w = [0.2, 0.6, 0.1, 0.9]
    expect = 0.01 * sparse_loss(w, alpha_for_stage(4)).item()
    assert total_loss(task, {1: Tensor(np.array(w))}).item() == pytest.approx(expect)


def test_total_loss_sums_over_stages():
    w1, w2 = [0.2, 0.6, 0.1, 0.9], [0.4, 0.7]
    expect = sparse_loss(w1, 0.5).item() + sparse_loss(w2, 0.5).item()
    got = total_loss(Tensor(np.array(0.0)), {1: Tensor(np.array(w1)), 2: Tensor(np.array(w2))},
                     SparseLossConfig(lam=1.0))
    assert got.item() == pytest.approx(expect)


def test_l1_regularizer():
    cfg = SparseLossConfig(lam=0.5, regularizer="l1")
    got = total_loss(Tensor(np.array(1.0)), {1: Tensor(np.array([0.2, 0.3])), 2: Tensor(np.array([0.5]))}, cfg)
    assert got.item() == pytest.approx(1.0 + 0.5 * 1.0)
    assert l1_loss([0.25, 0.5]).item() == pytest.approx(0.75)


def test_config_validation():
    with pytest.raises(ValueError):
        SparseLossConfig(lam=-1)
    with pytest.raises(ValueError):
        SparseLossConfig(clamp_eps=0.01)
    with pytest.raises(ValueError):
        SparseLossConfig(regularizer="l0")


gate_vectors = st.lists(st.floats(1e-4, 1 - 1e-4), min_size=1, max_size=12)


@given(gate_vectors, st.floats(0.01, 0.5))
@settings(max_examples=100, deadline=None)
def test_sparse_loss_non_negative(w, alpha):
    assert sparse_loss(np.array(w), alpha).item() >= 0


@given(st.lists(st.floats(-4, 4), min_size=2, max_size=8), st.floats(0.05, 0.5))
@settings(max_examples=20, deadline=None)
def test_sparse_loss_gradient_matches_finite_differences(theta, alpha):
    th = Tensor(np.array(theta, dtype=np.float64), requires_grad=True)
    sparse_loss(sigmoid(th), alpha).backward()
    fd = finite_diff(lambda: sparse_loss(sigmoid(Tensor(th.data)), alpha).item(), th.data)
    assert relative_error(th.grad, fd) <= 1e-3


@given(gate_vectors)
@settings(max_examples=100, deadline=None)
def test_binarizing_term_maximal_at_half(w):
    w = np.array(w)
    assert np.mean(l_m(w, w)) <= math.log(2) + 1e-12


def test_binarizing_term_vanishes_at_clamped_boundary():
    w = np.array([EPS, 1 - EPS, EPS])
    assert np.mean(l_m(w, w)) < 2e-5


@given(st.floats(0.02, 0.5), st.floats(0.01, 0.99))
@settings(max_examples=100, deadline=None)
def test_ratio_term_minimised_at_alpha(alpha, mu):
    assert l_m(alpha, mu) >= l_m(alpha, alpha) - 1e-12
    derivative = -alpha / alpha + (1 - alpha) / (1 - alpha)
    assert derivative == pytest.approx(0.0)


@given(gate_vectors, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=50, deadline=None)
def test_total_loss_monotone_in_lambda(w, lam_a, lam_b):
    lo, hi = sorted((lam_a, lam_b))
    task = Tensor(np.array(0.3))
    gates = {1: Tensor(np.array(w))}
    a = total_loss(task, gates, SparseLossConfig(lam=lo)).item()
    b = total_loss(task, gates, SparseLossConfig(lam=hi)).item()
    assert b >= a - 1e-12
