"""Shared oracles for the test suite."""

import numpy as np

from implyloss import diffmath as dm


def fd_check(loss_fn, params, h=1e-5):
    """Max relative error between backprop and central differences over all ``params``.

    ``loss_fn()`` must rebuild the graph from the current parameter values.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    dm.backward(loss)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        base = p.values.copy()
        for idx in np.ndindex(base.shape):
            up, down = base.copy(), base.copy()
            up[idx] += h
            down[idx] -= h
            p.set_values(up)
            f_up = loss_fn().item()
            p.set_values(down)
            f_down = loss_fn().item()
            p.set_values(base)
            num = (f_up - f_down) / (2 * h)
            err = abs(num - g[idx]) / max(1.0, abs(num), abs(g[idx]))
            worst = max(worst, err)
    return worst


def random_fixture(seed, with_rules=True):
    """Small random networks and a batch (d <= 8, hidden <= 8, K <= 4, m <= 4) with exemplars."""
    from implyloss.losses import BatchBundle
    from implyloss.nets import init_params

    rng = np.random.default_rng(seed)
    d, h, k, m = rng.integers(2, 9), rng.integers(2, 9), rng.integers(2, 5), rng.integers(1, 5)
    n_l, n_u = rng.integers(2, 6), rng.integers(2, 7)
    params = init_params(int(seed), [d, h, k], [d + m, h, 1] if with_rules else None, keep_prob=1.0)
    rule_labels = rng.integers(0, k, size=m)
    y_l = rng.integers(0, k, size=n_l)
    l_pairs = {(i, j) for i in range(n_l) for j in range(m) if rng.random() < 0.6}
    u_pairs = {(i, j) for i in range(n_u) for j in range(m) if rng.random() < 0.6}
    # make L row 0 an exemplar of rule 0
    y_l[0] = rule_labels[0]
    l_pairs.add((0, 0))
    e_l = np.full(n_l, -1)
    e_l[0] = 0
    u_maj = rng.integers(-1, k, size=n_u)
    batch = BatchBundle(
        x_l=rng.normal(size=(n_l, d)),
        y_l=y_l,
        e_l=e_l,
        x_u=rng.normal(size=(n_u, d)),
        l_pairs=np.array(sorted(l_pairs)),
        u_pairs=np.array(sorted(u_pairs)).reshape(-1, 2),
        rule_labels=rule_labels,
        u_majority=u_maj,
    )
    return params, batch, rng
