import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiest import autodiff as ad
from hiest.autodiff import Tensor
from hiest.checks import toy_problem
from hiest.losses import (
    bce_recon_loss,
    mae_loss,
    orthogonal_loss,
    reconstruct_adjacency,
    total_objective,
)
from hiest.model import HierState
from hiest.training import objective


# --- MAE --------------------------------------------------------------------
def test_mae_examples():
    y = np.arange(6.0).reshape(2, 3)
    assert mae_loss(Tensor(y), y).item() == 0.0
    assert mae_loss(Tensor(y + 1.0), y).item() == 1.0
    assert mae_loss(Tensor([1.0, 2.0]), np.array([0.0, 4.0])).item() == 1.5


def test_mae_mask_and_shape_errors():
    pred, y = Tensor([1.0, 2.0, 10.0]), np.array([0.0, 4.0, 0.0])
    assert mae_loss(pred, y, np.array([1.0, 1.0, 0.0])).item() == 1.5
    assert mae_loss(pred, y, np.zeros(3)).item() == 0.0
    with pytest.raises(ad.ShapeError):
        mae_loss(Tensor([1.0]), np.array([1.0, 2.0]))


# --- reconstruction -----------------------------------------------------------
def test_reconstruction_of_zero_features_is_half():
    a_hat = reconstruct_adjacency(Tensor(np.zeros((2, 4))), np.array([[0.5, 0], [0.5, 0.5], [0, 0.5]]))
    np.testing.assert_array_equal(a_hat.data, np.full((3, 3), 0.5))


def test_reconstruction_of_orthogonal_rows():
    lifted = np.sqrt(20.0) * np.eye(3, 5)
    a_hat = reconstruct_adjacency(Tensor(lifted), np.eye(3)).data
    np.testing.assert_allclose(a_hat[~np.eye(3, dtype=bool)], 0.5)
    np.testing.assert_allclose(np.diag(a_hat), 1.0, atol=1e-8)


def test_reconstruction_is_symmetric():
    rng = np.random.default_rng(0)
    a_hat = reconstruct_adjacency(Tensor(rng.normal(size=(3, 4))), rng.uniform(size=(6, 3))).data
    assert np.array_equal(a_hat, a_hat.T)


def test_reconstruction_shape_error():
    with pytest.raises(ad.ShapeError):
        reconstruct_adjacency(Tensor(np.zeros((2, 4))), np.zeros((3, 3)))


# --- BCE --------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(10))
def test_bce_of_half_matrix_is_ln2(seed):
    a = (np.random.default_rng(seed).random((7, 7)) < 0.4).astype(float)
    assert abs(bce_recon_loss(Tensor(np.full((7, 7), 0.5)), a).item() - math.log(2.0)) < 1e-12


def test_bce_perfect_and_hand_cases():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert bce_recon_loss(Tensor(a), a).item() < 1e-6
    expected = (2 * -math.log(0.8) + 2 * -math.log(0.2)) / 4
    assert bce_recon_loss(Tensor(np.full((2, 2), 0.8)), a).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.916, abs=5e-4)


def test_bce_binarizes_weighted_targets():
    weighted = np.array([[0.0, 0.3], [0.7, 0.0]])
    a_hat = Tensor(np.full((2, 2), 0.8))
    assert bce_recon_loss(a_hat, weighted).item() == bce_recon_loss(a_hat, weighted > 0).item()


# --- orthogonality ------------------------------------------------------------
def test_orthogonal_loss_examples():
    assert abs(orthogonal_loss(Tensor(np.eye(4))).item()) < 1e-12
    assert abs(orthogonal_loss(Tensor(np.tile([1.0, 2.0, -1.0], (5, 1)))).item() - 1.0) < 1e-12
    assert orthogonal_loss(Tensor([[1.0, 0.0], [1.0, 1.0]])).item() == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_orthogonal_loss_zero_rows_contribute_nothing():
    h = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    # pairs: (0,1)->0, (0,2)->1, (1,2)->0
    assert orthogonal_loss(Tensor(h)).item() == pytest.approx(1 / 3, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_orthogonal_loss_ignores_row_scale(seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(5, 3))
    scaled = h * rng.uniform(0.1, 10.0, size=(5, 1))
    assert abs(orthogonal_loss(Tensor(h)).item() - orthogonal_loss(Tensor(scaled)).item()) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_all_terms_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert orthogonal_loss(Tensor(rng.normal(size=(4, 3)))).item() >= 0
    a = (rng.random((5, 5)) < 0.5).astype(float)
    assert bce_recon_loss(Tensor(rng.uniform(size=(5, 5))), a).item() >= 0
    assert mae_loss(Tensor(rng.normal(size=4)), rng.normal(size=4)).item() >= 0


# --- total ------------------------------------------------------------------
def test_total_is_sum_of_terms():
    toy = toy_problem(0)
    parts = objective(toy.model, toy.batch)
    v = parts.values()
    assert abs(v["total"] - (v["l_pre"] + v["l_rec_ro"] + v["l_rec_gr"] + v["l_ort"])) < 1e-12
    assert all(x >= 0 for x in v.values())


def test_perfect_inputs_give_near_zero_total():
    n_o, n_r, n_g = 3, 2, 3
    m_or = np.array([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])
    m_rg = Tensor(np.full((n_r, n_g), 0.5))
    state = HierState(
        h_o=Tensor(np.zeros((1, 1, n_o, n_g))),
        h_r=Tensor(np.full((1, 1, n_r, n_g), 100.0)),
        h_g=Tensor(100.0 * np.eye(n_g)[None, None]),
        m_rg=m_rg,
    )
    y = np.ones((1, 2, n_o, 1))
    parts = total_objective(Tensor(y), y, state, m_or, np.ones((n_o, n_o)), np.ones((n_r, n_r)))
    assert parts.total.item() < 1e-6


def test_theta_gets_gradient_from_auxiliary_terms_only():
    toy = toy_problem(0, eta1=0.0, eta2=0.0, eta3=0.0, eta4=0.0)
    theta = toy.model.params["mapping.theta"]
    parts = objective(toy.model, toy.batch)
    parts.l_pre.backward()
    assert theta.grad is None or not np.any(theta.grad)
    ad.zero_grad(toy.model.parameters())
    parts = objective(toy.model, toy.batch)
    parts.total.backward()
    assert np.any(theta.grad)


def test_loss_weights_scale_terms():
    toy = toy_problem(1)
    base = objective(toy.model, toy.batch).values()
    weighted = objective(toy.model, toy.batch, (1.0, 0.0, 2.0, 0.0)).values()
    assert weighted["total"] == pytest.approx(base["l_pre"] + 2 * base["l_rec_gr"], abs=1e-12)
