import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from implyloss import diffmath as dm
from implyloss.losses import forward, ll_phi, ll_theta
from implyloss.prreg import (
    batch_q,
    oracle_marginals,
    pr_update_objective,
    q_joint_oracle,
    q_marginal_r,
    q_marginal_y,
    q_marginals_batch,
)
from helpers import fd_check, random_fixture


def test_hand_fixture():
    table = q_joint_oracle([0.6, 0.4], [0.7], [0], lam=1.0)
    z = 0.42 + 0.18 + 0.4 * 0.7 * np.exp(-1.0) + 0.12
    assert z == pytest.approx(0.82301, abs=1e-5)
    assert table[0, 1] == pytest.approx(0.42 / z)
    assert table[1, 1] == pytest.approx(0.10301 / z, abs=1e-5)
    assert q_marginal_y([0.6, 0.4], [0.7], [0], 1.0)[0] == pytest.approx(0.72903, abs=1e-5)
    assert q_marginal_r([0.6, 0.4], [0.7], [0], 1.0, 0) == pytest.approx(0.63548, abs=1e-5)


def test_lambda_zero_factorizes():
    pt, pr = np.array([0.2, 0.5, 0.3]), np.array([0.9, 0.4])
    table = q_joint_oracle(pt, pr, [0, 2], 0.0)
    qy, qr = oracle_marginals(table)
    assert np.allclose(qy, pt) and np.allclose(qr, pr)
    assert np.allclose(q_marginal_y(pt, pr, [0, 2], 0.0), pt)
    assert q_marginal_r(pt, pr, [0, 2], 0.0, 1) == pytest.approx(0.4)


def test_no_rules_keeps_p_theta():
    assert np.allclose(q_marginal_y([0.3, 0.7], [], [], 2.0), [0.3, 0.7])


def test_certain_label_leaves_rule_alone():
    assert q_marginal_r([1.0, 0.0], [0.35], [0], 5.0, 0) == pytest.approx(0.35)


def test_large_lambda_kills_violations():
    table = q_joint_oracle([0.5, 0.5], [0.8], [0], 50.0)
    assert table[1, 1] < 1e-20


def test_invalid_rule_position():
    with pytest.raises(ValueError):
        q_marginal_r([0.5, 0.5], [0.5], [0], 1.0, 1)


def test_oracle_limit():
    with pytest.raises(ValueError):
        q_joint_oracle([0.5, 0.5], [0.5] * 13, [0] * 13, 1.0)


def _random_case(rng):
    k, m = rng.integers(2, 5), rng.integers(0, 5)
    pt = rng.dirichlet(np.ones(k))
    pr = rng.uniform(0.01, 0.99, size=m)
    labels = rng.integers(0, k, size=m)
    return pt, pr, labels


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 5.0])
def test_closed_form_matches_oracle(lam):
    rng = np.random.default_rng(int(lam * 10))
    for _ in range(40):
        pt, pr, labels = _random_case(rng)
        qy, qr = oracle_marginals(q_joint_oracle(pt, pr, labels, lam))
        assert np.abs(q_marginal_y(pt, pr, labels, lam) - qy).max() <= 1e-8
        for j in range(len(pr)):
            assert abs(q_marginal_r(pt, pr, labels, lam, j) - qr[j]) <= 1e-8


def test_batch_marginals_match_scalar():
    rng = np.random.default_rng(3)
    pt = rng.dirichlet(np.ones(3), size=4)
    pairs = np.array([(0, 0), (0, 1), (2, 1), (3, 0), (3, 2), (3, 1)])
    pr = rng.uniform(0.05, 0.95, size=len(pairs))
    labels = np.array([0, 2, 1])
    qy, qr = q_marginals_batch(pt, pairs[:, 0], pairs[:, 1], pr, labels, 1.5)
    for i in range(4):
        sel = pairs[:, 0] == i
        assert np.allclose(qy[i], q_marginal_y(pt[i], pr[sel], labels[pairs[sel, 1]], 1.5), atol=1e-12)
        for pos, k in enumerate(np.flatnonzero(sel)):
            assert qr[k] == pytest.approx(q_marginal_r(pt[i], pr[sel], labels[pairs[sel, 1]], 1.5, pos), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1_000_000), st.sampled_from([0.0, 0.5, 1.0, 5.0]))
def test_q_normalized(seed, lam):
    pt, pr, labels = _random_case(np.random.default_rng(seed))
    assert abs(q_marginal_y(pt, pr, labels, lam).sum() - 1.0) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1_000_000), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_violation_mass_monotone_in_lambda(seed, a, b):
    pt, pr, labels = _random_case(np.random.default_rng(seed))
    lo, hi = sorted((a, b))
    for j, lj in enumerate(labels):
        masses = []
        for lam in (lo, hi):
            t = q_joint_oracle(pt, pr, labels, lam)
            t = np.moveaxis(t, j + 1, 1)[:, 1]  # r_j = 1
            masses.append(sum(t[y].sum() for y in range(len(pt)) if y != lj))
        assert masses[1] <= masses[0] + 1e-12


def test_update_objective_gamma_zero():
    params, batch, _ = random_fixture(5)
    fwd = forward(params, batch)
    qy, qr = batch_q(fwd, batch, 1.0)
    value = pr_update_objective(fwd, batch, qy, qr, 0.0).item()
    assert value == ll_theta(fwd, batch).item() + ll_phi(fwd, batch).item()


def test_update_objective_component_sum():
    params, batch, _ = random_fixture(6)
    fwd = forward(params, batch)
    qy, qr = batch_q(fwd, batch, 1.0)
    value = pr_update_objective(fwd, batch, qy, qr, 0.4).item()
    base = ll_theta(fwd, batch).item() + ll_phi(fwd, batch).item()
    p_u, r_u = fwd.p_u.values, fwd.r_u.values[:, 0]
    u = -(qy * np.log(p_u)).sum() - (qr * np.log(r_u) + (1 - qr) * np.log(1 - r_u)).sum()
    assert value == pytest.approx(base + 0.4 * u, abs=1e-10)


def test_one_hot_q_gives_cross_entropy():
    params, batch, _ = random_fixture(7, with_rules=False)
    fwd = forward(params, batch, use_rules=False)
    gold = np.arange(batch.n_u) % fwd.p_u.shape[1]
    qy = np.eye(fwd.p_u.shape[1])[gold]
    value = pr_update_objective(fwd, batch, qy, np.zeros(0), 1.0).item()
    ce = -np.log(fwd.p_u.values[np.arange(batch.n_u), gold]).sum()
    assert value == pytest.approx(ll_theta(fwd, batch).item() + ce, abs=1e-10)


def test_update_objective_gradients():
    for seed in range(3):
        params, batch, _ = random_fixture(seed)
        qy, qr = batch_q(forward(params, batch), batch, 1.0)  # Q is frozen during the step
        assert fd_check(lambda: pr_update_objective(forward(params, batch), batch, qy, qr, 0.5),
                        params.parameters) < 1e-4
