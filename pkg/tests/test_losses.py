import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from implyloss import diffmath as dm
from implyloss import losses
from implyloss.losses import (
    BatchBundle,
    Forward,
    forward,
    generalized_xent,
    imply_objective,
    implication_loss,
    implication_value,
    ll_phi,
    ll_theta,
    lumaj_objective,
    noise_tolerant_objective,
)
from helpers import fd_check, random_fixture


def _col(*v):
    return dm.Tensor(np.array(v, dtype=float).reshape(-1, 1), requires_grad=True)


def _batch(n_l=1, n_u=0, y_l=(0,), e_l=(-1,), l_pairs=(), u_pairs=(), rule_labels=(0,), u_majority=None):
    return BatchBundle(np.zeros((n_l, 1)), np.array(y_l), np.array(e_l), np.zeros((n_u, 1)),
                       np.array(l_pairs).reshape(-1, 2), np.array(u_pairs).reshape(-1, 2),
                       np.array(rule_labels), None if u_majority is None else np.array(u_majority))


# -- LL(theta) ----------------------------------------------------------------


def test_ll_theta_examples():
    b = _batch()
    assert ll_theta(Forward(dm.Tensor([[1.0, 0.0]]), None), b).item() == pytest.approx(0.0, abs=1e-12)
    assert ll_theta(Forward(dm.Tensor([[0.5, 0.5]]), None), b).item() == pytest.approx(0.6931, abs=1e-4)
    b2 = _batch(n_l=2, y_l=(0, 1), e_l=(-1, -1))
    assert ll_theta(Forward(dm.Tensor([[0.5, 0.5]] * 2), None), b2).item() == pytest.approx(1.3863, abs=1e-4)


def test_ll_theta_empty_batch_counts_warning():
    before = losses.warnings["empty_l_batch"]
    b = BatchBundle(np.zeros((0, 1)), np.zeros(0), np.zeros(0), np.zeros((1, 1)), np.zeros((0, 2)),
                    np.zeros((0, 2)), np.array([0]))
    assert ll_theta(Forward(None, dm.Tensor([[0.5, 0.5]])), b).item() == 0.0
    assert losses.warnings["empty_l_batch"] == before + 1


# -- generalized cross entropy --------------------------------------------------


def test_gxent_examples():
    assert generalized_xent(0.9, 1.0) == pytest.approx(0.1, abs=1e-12)
    assert generalized_xent(0.9, 0.6) == pytest.approx(0.10210, abs=1e-4)
    assert generalized_xent(0.9, 1e-4) == pytest.approx(0.10536, abs=1e-3)


def test_gxent_literal_form():
    assert generalized_xent(0.9, 0.6, form="literal") == pytest.approx(0.1**0.6 / 0.6)


@pytest.mark.parametrize("q", [0.0, -0.1, 1.5])
def test_gxent_rejects_bad_q(q):
    with pytest.raises(ValueError):
        generalized_xent(0.5, q)


def test_gxent_tensor_matches_scalar():
    p = dm.Tensor([[0.2, 0.9, 1.0]])
    assert np.allclose(losses.gxent(p, 0.6).values, generalized_xent(np.array([0.2, 0.9, 1.0]), 0.6))


# -- LL(phi) --------------------------------------------------------------------------


def test_ll_phi_exemplar_at_one_is_zero():
    b = _batch(e_l=(0,), l_pairs=[(0, 0)])
    assert ll_phi(Forward(None, None, _col(1.0)), b).item() == pytest.approx(0.0, abs=1e-6)


def test_ll_phi_disagreeing_rule():
    b = _batch(y_l=(1,), l_pairs=[(0, 0)], rule_labels=(0,))
    assert ll_phi(Forward(None, None, _col(0.5)), b).item() == pytest.approx(0.6931, abs=1e-4)


def test_ll_phi_agreeing_non_exemplar():
    b = _batch(y_l=(0,), l_pairs=[(0, 0)], rule_labels=(0,))
    assert ll_phi(Forward(None, None, _col(0.9)), b, q=0.6).item() == pytest.approx(0.10210, abs=1e-4)


def test_ll_phi_exemplar_term_ablation():
    # one exemplar pair, one agreeing pair
    b = _batch(n_l=2, y_l=(0, 0), e_l=(0, -1), l_pairs=[(0, 0), (1, 0)])
    fwd = Forward(None, None, _col(0.7, 0.9))
    full = ll_phi(fwd, b).item()
    ablated = ll_phi(fwd, b, exemplar_term=False).item()
    assert full - ablated == pytest.approx(-np.log(0.7), abs=1e-12)
    assert ablated == pytest.approx(generalized_xent(0.9, 0.6), abs=1e-12)


# -- implication loss ------------------------------------------------------------------


def test_implication_examples():
    assert implication_value(0.0, 0.3) == 0.0
    assert implication_value(1.0, 1.0) == 0.0
    assert implication_value(0.5, 0.2) == pytest.approx(0.5108, abs=1e-4)
    b = _batch(n_l=0, y_l=(), e_l=(), n_u=1, u_pairs=[(0, 0)])
    fwd = Forward(None, dm.Tensor([[0.2, 0.8]]), None, _col(0.5))
    assert implication_loss(fwd, b).item() == pytest.approx(0.5108, abs=1e-4)


def test_implication_surface_grid():
    g = np.linspace(0.0, 1.0, 101)
    pr, py = np.meshgrid(g, g, indexing="ij")
    v = implication_value(pr, py)
    assert np.all(v[0, :] == 0.0)
    assert np.all(v[:, -1] == 0.0)
    assert np.all(np.diff(v[:, :-1], axis=0) > 0)  # increasing in P_r for P_y < 1
    assert np.all(np.diff(v[1:, :], axis=1) < 0)  # decreasing in P_y for P_r > 0
    assert np.all(v >= 0)


def test_withdrawal_gradient_vanishes():
    grads = []
    for p_r in (1e-1, 1e-3, 1e-6):
        py = dm.Tensor([[0.3, 0.7]], requires_grad=True)
        b = _batch(n_l=0, y_l=(), e_l=(), n_u=1, u_pairs=[(0, 0)])
        dm.backward(implication_loss(Forward(None, py, None, _col(p_r)), b))
        grads.append(np.abs(py.grad).max())
    assert grads[0] > grads[1] > grads[2] and grads[2] < 1e-5


# -- imply objective and baselines -------------------------------------------------------------


def test_imply_gamma_zero_equals_components():
    params, batch, _ = random_fixture(0)
    fwd = forward(params, batch)
    direct = imply_objective(fwd, batch, 0.0).item()
    assert direct == ll_theta(fwd, batch).item() + ll_phi(fwd, batch).item()


def test_imply_component_sum_fixture():
    params, batch, _ = random_fixture(1)
    fwd = forward(params, batch)
    total = imply_objective(fwd, batch, 0.3).item()
    # independent numpy recomputation of each component
    p_l, p_u, r_l, r_u = (t.values for t in (fwd.p_l, fwd.p_u, fwd.r_l, fwd.r_u))
    l_term = -np.log(p_l[np.arange(batch.n_l), batch.y_l]).sum()
    phi = 0.0
    for (i, j), pr in zip(batch.l_pairs, r_l[:, 0]):
        if batch.e_l[i] == j:
            phi -= np.log(pr)
        elif batch.y_l[i] != batch.rule_labels[j]:
            phi -= np.log(1 - pr)
        else:
            phi += (1 - pr**0.6) / 0.6
    imp = sum(implication_value(pr, p_u[i, batch.rule_labels[j]]) for (i, j), pr in zip(batch.u_pairs, r_u[:, 0]))
    assert total == pytest.approx(l_term + phi + 0.3 * imp, abs=1e-10)


def test_lumaj_examples():
    b = _batch(n_u=1, u_majority=[0])
    fwd = Forward(dm.Tensor([[0.5, 0.5]]), dm.Tensor([[0.5, 0.5]]))
    base = ll_theta(fwd, b).item()
    assert lumaj_objective(fwd, b, 1.0).item() == pytest.approx(base + 0.6931, abs=1e-4)
    assert lumaj_objective(fwd, b, 1.0, majority_labels=np.array([-1])).item() == base
    assert lumaj_objective(fwd, b, 1.0, majority_labels=np.zeros(0)).item() == base


def test_noise_tolerant_examples():
    b = _batch(n_u=1, u_majority=[0])
    fwd = Forward(dm.Tensor([[0.5, 0.5]]), dm.Tensor([[0.9, 0.1]]))
    base = ll_theta(fwd, b).item()
    assert noise_tolerant_objective(fwd, b, 0.5, q=1.0).item() == pytest.approx(base + 0.05, abs=1e-12)
    assert noise_tolerant_objective(fwd, b, 0.0).item() == base
    assert noise_tolerant_objective(fwd, b, 2.0, q=0.6).item() == pytest.approx(base + 0.20420, abs=1e-4)


def test_negative_gamma_rejected():
    params, batch, _ = random_fixture(2)
    with pytest.raises(ValueError):
        imply_objective(forward(params, batch), batch, -1.0)


OBJECTIVES = {
    "ll_theta": lambda f, b: ll_theta(f, b),
    "ll_phi": lambda f, b: ll_phi(f, b),
    "ll_phi_literal": lambda f, b: ll_phi(f, b, gce_form="literal"),
    "implication": lambda f, b: implication_loss(f, b),
    "imply": lambda f, b: imply_objective(f, b, 0.7),
    "lumaj": lambda f, b: lumaj_objective(f, b, 0.5),
    "noise_tolerant": lambda f, b: noise_tolerant_objective(f, b, 0.5, q=0.6),
}


@pytest.mark.parametrize("name", list(OBJECTIVES))
def test_objective_gradients_finite_differences(name):
    for seed in range(3):
        params, batch, _ = random_fixture(seed)
        fn = OBJECTIVES[name]
        assert fd_check(lambda: fn(forward(params, batch), batch), params.parameters) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.0, 2.0), st.floats(0.05, 1.0))
def test_objectives_non_negative(seed, gamma, q):
    params, batch, _ = random_fixture(seed)
    fwd = forward(params, batch)
    for value in (
        imply_objective(fwd, batch, gamma, q),
        lumaj_objective(fwd, batch, gamma),
        noise_tolerant_objective(fwd, batch, gamma, q),
        ll_phi(fwd, batch, q, exemplar_term=False),
    ):
        assert value.item() >= 0.0


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(0.0, 1.0), st.floats(1e-6, 1.0))
def test_implication_monotone_pointwise(p_r, p_y, step):
    if p_y < 1.0:
        assert implication_value(min(1.0, p_r + step), p_y) >= implication_value(p_r, p_y)
    assert implication_value(p_r, min(1.0, p_y + step)) <= implication_value(p_r, p_y)
