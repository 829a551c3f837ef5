"""Posterior-regularization training: constrained Q marginals and the alternating update.

Q(y, r | x) is proportional to P_theta(y|x) * prod_j P_phi(r_j|x) * exp(-lam * [y != l_j and r_j = 1]).
Its singleton marginals factor per rule, so they are computed in closed form in
log space.  :func:`q_joint_oracle` enumerates the full table and exists to check
the closed form.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import logsumexp

from . import diffmath as dm
from . import losses
from .trainers import train

ORACLE_MAX_RULES = 12
_TINY = 1e-300


def _penalty(lam):
    return max(np.exp(-lam), _TINY)


def q_joint_oracle(p_theta, p_rules, rule_labels, lam):
    """Brute-force normalized table with axes (y, r_1, ..., r_m)."""
    p_theta = np.asarray(p_theta, dtype=np.float64)
    p_rules = np.asarray(p_rules, dtype=np.float64)
    rule_labels = np.asarray(rule_labels)
    m, k = len(p_rules), len(p_theta)
    if m > ORACLE_MAX_RULES:
        raise ValueError(f"oracle limited to {ORACLE_MAX_RULES} covering rules, got {m}")
    table = np.zeros((k,) + (2,) * m)
    for y in range(k):
        for r in itertools.product((0, 1), repeat=m):
            val = p_theta[y]
            for j, rj in enumerate(r):
                val *= p_rules[j] if rj else 1.0 - p_rules[j]
                if rj and y != rule_labels[j]:
                    val *= np.exp(-lam)
            table[(y,) + r] = val
    return table / table.sum()


def oracle_marginals(table):
    """(Q(y), [Q(r_j = 1)]) from a joint table."""
    m = table.ndim - 1
    qy = table.sum(axis=tuple(range(1, m + 1)))
    qr = []
    for j in range(m):
        axes = tuple(a for a in range(m + 1) if a != j + 1)
        qr.append(table.sum(axis=axes)[1])
    return qy, np.array(qr)


def _log_factors(p_rules, rule_labels, k, lam):
    """log(P_j(1) e^{-lam [y != l_j]} + P_j(0)) with shape (m, k)."""
    p = np.asarray(p_rules, dtype=np.float64).reshape(-1, 1)
    mismatch = np.arange(k)[None, :] != np.asarray(rule_labels).reshape(-1, 1)
    f = np.where(mismatch, p * _penalty(lam), p) + (1.0 - p)
    return np.log(np.maximum(f, _TINY))


def q_marginal_y(p_theta, p_rules, rule_labels, lam):
    p_theta = np.asarray(p_theta, dtype=np.float64)
    k = len(p_theta)
    logq = np.log(np.maximum(p_theta, _TINY)) + _log_factors(p_rules, rule_labels, k, lam).sum(axis=0)
    return np.exp(logq - logsumexp(logq))


def q_marginal_r(p_theta, p_rules, rule_labels, lam, k_rule):
    """Q(r_k = 1 | x) for the ``k_rule``-th covering rule."""
    p_rules = np.asarray(p_rules, dtype=np.float64)
    if not 0 <= k_rule < len(p_rules):
        raise ValueError(f"rule position {k_rule} does not cover this instance")
    p_theta = np.asarray(p_theta, dtype=np.float64)
    k = len(p_theta)
    logf = _log_factors(p_rules, rule_labels, k, lam)
    base = np.log(np.maximum(p_theta, _TINY)) + logf.sum(axis=0)
    log_z = logsumexp(base)
    if p_rules[k_rule] <= 0:
        return 0.0
    mismatch = np.arange(k) != np.asarray(rule_labels)[k_rule]
    rest = base - logf[k_rule] + np.where(mismatch, np.log(_penalty(lam)), 0.0)
    return float(np.exp(np.log(p_rules[k_rule]) + logsumexp(rest) - log_z))


def q_marginals_batch(p_theta, rows, rules, p_r, rule_labels, lam):
    """Vectorized Q(y|x) for every row of ``p_theta`` and Q(r=1|x) for every (row, rule) pair."""
    p_theta = np.asarray(p_theta, dtype=np.float64)
    n, k = p_theta.shape
    p_r = np.asarray(p_r, dtype=np.float64).reshape(-1)
    labels = np.asarray(rule_labels)[rules]
    logf = _log_factors(p_r, labels, k, lam)
    acc = np.zeros((n, k))
    np.add.at(acc, rows, logf)
    base = np.log(np.maximum(p_theta, _TINY)) + acc
    log_z = logsumexp(base, axis=1, keepdims=True)
    qy = np.exp(base - log_z)
    if len(rows) == 0:
        return qy, np.zeros(0)
    mismatch = np.arange(k)[None, :] != labels[:, None]
    log_pen = np.log(_penalty(lam))
    rest = base[rows] - logf + np.where(mismatch, log_pen, 0.0)
    with np.errstate(divide="ignore"):
        log_p = np.log(p_r)
    qr = np.exp(log_p + logsumexp(rest, axis=1) - log_z[rows, 0])
    return qy, np.clip(qr, 0.0, 1.0)


def batch_q(fwd, batch, lam):
    """Q marginals for the U rows of a batch from the (detached) forward values."""
    if fwd.p_u is None or batch.n_u == 0:
        return np.zeros((0, 0)), np.zeros(0)
    rows, rules = batch.u_pairs[:, 0], batch.u_pairs[:, 1]
    p_r = fwd.r_u.values[:, 0] if fwd.r_u is not None else np.zeros(0)
    return q_marginals_batch(fwd.p_u.values, rows, rules, p_r, batch.rule_labels, lam)


def pr_update_objective(fwd, batch, qy, qr, gamma, q=0.6, gce_form="zhang", exemplar_term=True):
    """-LL(theta) - LL(phi) - gamma * (Q-weighted log-likelihood of U labels and coverages)."""
    loss = dm.add(losses.ll_theta(fwd, batch), losses.ll_phi(fwd, batch, q, gce_form, exemplar_term))
    if gamma == 0:
        return loss
    u_term = q_weighted_terms(fwd, qy, qr)
    if u_term is None:
        return loss
    return dm.add(loss, dm.scale(u_term, gamma))


def q_weighted_terms(fwd, qy, qr):
    """-(sum_y Q(y) log P_theta(y) + sum_pairs sum_r Q(r) log P_phi(r)); None when empty."""
    terms = []
    if fwd.p_u is not None and fwd.p_u.shape[0]:
        logp = dm.log(dm.clip(fwd.p_u, losses.EPS, 1.0))
        terms.append(dm.total(dm.mul(dm.Tensor(qy), logp)))
    if fwd.r_u is not None and fwd.r_u.shape[0]:
        qr = np.asarray(qr).reshape(-1, 1)
        log1 = dm.log(dm.clip(fwd.r_u, losses.EPS, 1.0))
        log0 = dm.log(dm.clip(dm.rsub_scalar(1.0, fwd.r_u), losses.EPS, 1.0))
        terms.append(dm.total(dm.add(dm.mul(dm.Tensor(qr), log1), dm.mul(dm.Tensor(1.0 - qr), log0))))
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = dm.add(out, t)
    return dm.scale(out, -1.0)


def pr_train(dataset, rules, coverage, config, seed=0, **kw):
    """Alternate Q computation and one Adam step per batch (see :func:`implyloss.trainers.train`)."""
    cfg = config if config.method == "posterior_reg" else config.updated(method="posterior_reg")
    return train(dataset, rules, coverage, cfg, seed, **kw)

