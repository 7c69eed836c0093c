import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tripletsv import tensor as T
from tripletsv.errors import ContractError, DimensionError, NormalizationError
from tripletsv.losses import (
    LossWeights,
    TripletBatch,
    cross_entropy,
    euclidean_distance,
    joint_loss,
    maybe_l2_normalize,
    similarity_bce,
    triplet_loss,
)

from oracles import numeric_grad, rel_err


@pytest.mark.parametrize("n", range(2, 65))
def test_ce_uniform_logits_is_log_n(n):
    logits = T.Tensor(np.full((3, n), 0.7))
    assert cross_entropy(logits, [0, 1, n - 1]).item() == pytest.approx(math.log(n), abs=1e-12)


def test_ce_saturated_is_zero_and_label_range():
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 1000.0
    assert cross_entropy(T.Tensor(logits), [1, 3]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractError):
        cross_entropy(T.Tensor(logits), [1, 4])


def test_ce_gradient():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    labels = [0, 3, 2, 2, 1]
    leaf = T.Tensor(x, requires_grad=True)
    T.backward(cross_entropy(leaf, labels))
    num = numeric_grad(lambda: cross_entropy(T.Tensor(x), labels).item(), x)
    assert rel_err(leaf.grad, num) < 1e-6


def test_euclidean_distance():
    assert euclidean_distance(T.Tensor([0.0, 0.0]), T.Tensor([3.0, 4.0])).item() == 5.0
    x = T.Tensor([1.0, -2.0, 3.0])
    assert euclidean_distance(x, x).item() == 0.0
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = rng.normal(size=7), rng.normal(size=7)
        acc = 0.0
        for i in range(7):
            acc += (a[i] - b[i]) ** 2
        assert abs(euclidean_distance(T.Tensor(a), T.Tensor(b)).item() - math.sqrt(acc)) < 1e-12
    with pytest.raises(DimensionError):
        euclidean_distance(T.Tensor(np.ones(2)), T.Tensor(np.ones(3)))


def _batch(a, p, n):
    return TripletBatch(T.Tensor(np.atleast_2d(a)), T.Tensor(np.atleast_2d(p)), T.Tensor(np.atleast_2d(n)))


def test_triplet_equal_distances_gives_margin():
    loss = triplet_loss(_batch([0.0, 0.0], [1.0, 0.0], [0.0, 1.0]), 0.8)
    assert loss.item() == pytest.approx(0.8, abs=1e-15)


def test_triplet_hinge_satisfied_and_hand_case():
    assert triplet_loss(_batch([0.0], [0.1], [2.0]), 0.8).item() == 0.0
    anchor = [0.0, 0.0]
    neg = [math.sqrt(0.3), 0.0]
    assert triplet_loss(_batch(anchor, anchor, neg), 0.8).item() == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ContractError):
        triplet_loss(TripletBatch(T.Tensor(np.zeros((0, 2))), T.Tensor(np.zeros((0, 2))),
                                  T.Tensor(np.zeros((0, 2)))))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-3, 3)),
       arrays(np.float64, (4, 3), elements=st.floats(-3, 3)),
       arrays(np.float64, (4, 3), elements=st.floats(-3, 3)))
def test_triplet_nonnegative_and_zero_iff_margin_met(a, p, n):
    loss = triplet_loss(_batch(a, p, n), 0.8).item()
    assert loss >= 0
    gap = ((a - n) ** 2).sum(1) - ((a - p) ** 2).sum(1)
    assert (loss == 0) == bool(np.all(gap >= 0.8))


def test_similarity_bce():
    assert similarity_bce(T.Tensor([0.0]), [True]).item() == pytest.approx(math.log(2))
    assert similarity_bce(T.Tensor([0.0]), [False]).item() == pytest.approx(math.log(2))
    assert similarity_bce(T.Tensor([1000.0]), [True]).item() == pytest.approx(0.0, abs=1e-12)
    z = np.array([0.3, -1.2, 2.0])
    y = np.array([1.0, 0.0, 1.0])
    leaf = T.Tensor(z, requires_grad=True)
    T.backward(similarity_bce(leaf, y))
    closed = (1 / (1 + np.exp(-z)) - y) / 3
    num = numeric_grad(lambda: similarity_bce(T.Tensor(z), y).item(), z)
    np.testing.assert_allclose(leaf.grad, closed, atol=1e-12)
    assert rel_err(leaf.grad, num) < 1e-6


def test_losses_finite_for_huge_logits():
    big = np.array([[1e4, -1e4, 0.0], [-1e4, 1e4, 5e3]])
    assert np.isfinite(cross_entropy(T.Tensor(big), [1, 0]).item())
    assert np.isfinite(similarity_bce(T.Tensor([1e4, -1e4]), [False, True]).item())


def test_joint_loss_values():
    ce, tr, sim = T.Tensor(2.0), T.Tensor(1.0), T.Tensor(3.0)
    assert joint_loss(ce, tr, sim, LossWeights(1.0, 0.1, 0.3)).item() == pytest.approx(3.0, abs=1e-15)
    assert joint_loss(ce, tr, sim, LossWeights(1.0, 0.0, 0.0)).item() == 2.0


def test_joint_loss_gradient_is_linear():
    rng = np.random.default_rng(2)
    x = rng.normal(size=4)

    def grad_for(w):
        leaf = T.Tensor(x, requires_grad=True)
        ce = T.sum(T.square(leaf))
        tr = T.sum(T.tanh(leaf))
        sim = T.sum(T.exp(leaf))
        T.backward(joint_loss(ce, tr, sim, w))
        return leaf.grad

    g = grad_for(LossWeights(1.0, 0.1, 0.3))
    expected = 2 * x + 0.1 * (1 - np.tanh(x) ** 2) + 0.3 * np.exp(x)
    np.testing.assert_allclose(g, expected, rtol=1e-12)
    g_k = grad_for(LossWeights(1.0, 0.4, 0.3))
    np.testing.assert_allclose(g_k - g, 0.3 * (1 - np.tanh(x) ** 2), rtol=1e-9)


def test_loss_weight_validation():
    with pytest.raises(ContractError):
        LossWeights(beta=-1.0)
    with pytest.raises(ContractError):
        LossWeights(margin_a=0.0)


def test_l2_normalize():
    np.testing.assert_allclose(maybe_l2_normalize(T.Tensor([3.0, 4.0]), True).data, [0.6, 0.8])
    x = T.Tensor([3.0, 4.0])
    assert maybe_l2_normalize(x, False) is x
    rng = np.random.default_rng(3)
    v = rng.normal(size=(100, 9))
    norms = np.linalg.norm(maybe_l2_normalize(T.Tensor(v), True).data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
    with pytest.raises(NormalizationError):
        maybe_l2_normalize(T.Tensor(np.zeros(3)), True)
