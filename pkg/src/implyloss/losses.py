"""Training objectives for ImplyLoss and the baselines.

All objectives are sums (not means) over the batch and are built from
:mod:`implyloss.diffmath` ops so gradients reach both networks.  Probabilities
are clamped to ``[EPS, 1]`` before any log.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .nets import classify_proba, rule_proba

logger = logging.getLogger(__name__)

EPS = 1e-7
GCE_FORMS = ("zhang", "literal")

warnings = Counter()


@dataclass
class BatchBundle:
    """One training batch.

    ``l_pairs``/``u_pairs`` are (row, rule) arrays of coverage restricted to the
    batch, with rows indexing ``x_l``/``x_u`` respectively.  ``u_majority`` holds
    the rule-majority label per U row (-1 = abstain); only the baselines use it.
    """

    x_l: np.ndarray
    y_l: np.ndarray
    e_l: np.ndarray
    x_u: np.ndarray
    l_pairs: np.ndarray
    u_pairs: np.ndarray
    rule_labels: np.ndarray
    u_majority: np.ndarray | None = None
    l_index: np.ndarray | None = None
    u_index: np.ndarray | None = None

    def __post_init__(self):
        self.y_l = np.asarray(self.y_l, dtype=np.intp).reshape(-1)
        self.e_l = np.asarray(self.e_l, dtype=np.intp).reshape(-1)
        self.l_pairs = np.asarray(self.l_pairs, dtype=np.intp).reshape(-1, 2)
        self.u_pairs = np.asarray(self.u_pairs, dtype=np.intp).reshape(-1, 2)
        self.rule_labels = np.asarray(self.rule_labels, dtype=np.intp).reshape(-1)
        m = len(self.rule_labels)
        for pairs in (self.l_pairs, self.u_pairs):
            if pairs.size and pairs[:, 1].max() >= m:
                raise ValueError(f"coverage references rule {pairs[:, 1].max()} but only {m} rules exist")
        if np.any(self.y_l < 0):
            raise ValueError("every L instance needs a gold label")

    @property
    def n_l(self):
        return len(self.y_l)

    @property
    def n_u(self):
        return len(self.x_u)


@dataclass
class Forward:
    """Network outputs for one batch."""

    p_l: dm.Tensor | None
    p_u: dm.Tensor | None
    r_l: dm.Tensor | None = None
    r_u: dm.Tensor | None = None
    extras: dict = field(default_factory=dict)


def forward(params, batch, train=False, rng=None, use_u=True, use_rules=True):
    """Run both networks over the batch.

    One classifier pass over the stacked L and U rows, then one rule-net pass
    over the stacked L and U coverage pairs, so the random stream consumed by
    dropout depends only on the batch shape.
    """
    n_l = batch.n_l
    xs = batch.x_l if not use_u else np.vstack([batch.x_l, batch.x_u])
    p_l = p_u = None
    if len(xs):
        p_all = classify_proba(params, xs, train, rng)
        p_l = dm.take_rows(p_all, np.arange(n_l))
        if use_u:
            p_u = dm.take_rows(p_all, np.arange(n_l, len(xs)))
    r_l = r_u = None
    if use_rules and params.rules is not None:
        lp, up = batch.l_pairs, batch.u_pairs if use_u else np.zeros((0, 2), dtype=np.intp)
        rows = np.vstack([batch.x_l[lp[:, 0]], batch.x_u[up[:, 0]]]) if use_u else batch.x_l[lp[:, 0]]
        ids = np.concatenate([lp[:, 1], up[:, 1]])
        if len(ids):
            r_all = rule_proba(params, rows, ids, train, rng)
            r_l = dm.take_rows(r_all, np.arange(len(lp)))
            r_u = dm.take_rows(r_all, np.arange(len(lp), len(ids)))
    return Forward(p_l, p_u, r_l, r_u)


# -- scalar helpers ----------------------------------------------------------


def _check_q(q):
    if not q > 0 or q > 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")


def generalized_xent(p, q, form="zhang"):
    """Noise-tolerant loss for target probability ``p`` (numpy / float version)."""
    _check_q(q)
    p = np.asarray(p, dtype=np.float64)
    if form == "zhang":
        out = (1.0 - p**q) / q
    elif form == "literal":
        out = (1.0 - p) ** q / q
    else:
        raise ValueError(f"unknown gce form {form!r}")
    return float(out) if out.ndim == 0 else out


def gxent(p, q, form="zhang"):
    """Elementwise generalized cross entropy on a probability Tensor (clamped)."""
    _check_q(q)
    p = dm.clip(p, EPS, 1.0)
    if form == "zhang":
        return dm.scale(dm.rsub_scalar(1.0, dm.power(p, q)), 1.0 / q)
    if form == "literal":
        # (1 - p)^q is non-differentiable at p = 1; keep the base away from zero
        return dm.scale(dm.power(dm.clip(dm.rsub_scalar(1.0, p), EPS, 1.0), q), 1.0 / q)
    raise ValueError(f"unknown gce form {form!r}")


def nll(p):
    """-sum(log p) with p clamped to [EPS, 1]."""
    return dm.scale(dm.total(dm.log(dm.clip(p, EPS, 1.0))), -1.0)


def implication_terms(p_r, p_y):
    """Per-pair -log(1 - P(r=1) * (1 - P(y=l_j))), elementwise."""
    arg = dm.rsub_scalar(1.0, dm.mul(p_r, dm.rsub_scalar(1.0, p_y)))
    return dm.scale(dm.log(dm.clip(arg, EPS, 1.0)), -1.0)


def implication_value(p_r, p_y):
    """Float/numpy evaluation of the per-pair implication loss."""
    arg = np.clip(1.0 - np.asarray(p_r) * (1.0 - np.asarray(p_y)), EPS, 1.0)
    return -np.log(arg)


# -- objectives --------------------------------------------------------------


def ll_theta(fwd, batch):
    """-LL(theta): negative log-likelihood of the gold labels of the L rows."""
    if batch.n_l == 0 or fwd.p_l is None:
        warnings["empty_l_batch"] += 1
        return dm.zero()
    return nll(dm.pick(fwd.p_l, np.arange(batch.n_l), batch.y_l))


def phi_pair_roles(batch):
    """Split L coverage pairs into (exemplar, disagreeing, agreeing-non-exemplar) masks."""
    rows, rules = batch.l_pairs[:, 0], batch.l_pairs[:, 1]
    exemplar = batch.e_l[rows] == rules
    disagree = batch.y_l[rows] != batch.rule_labels[rules]
    agree = ~disagree & ~exemplar
    return exemplar, disagree & ~exemplar, agree


def ll_phi(fwd, batch, q=0.6, gce_form="zhang", exemplar_term=True):
    """-LL(phi) over L coverage pairs.

    Exemplar pairs get a hard r=1 log term, disagreeing pairs a hard r=0 term,
    remaining agreeing pairs the generalized cross entropy toward r=1.
    ``exemplar_term=False`` drops only the exemplar log term.
    """
    if fwd.r_l is None or len(batch.l_pairs) == 0:
        return dm.zero()
    exemplar, disagree, agree = phi_pair_roles(batch)
    loss = dm.zero()
    if exemplar_term and exemplar.any():
        loss = dm.add(loss, nll(dm.take_rows(fwd.r_l, np.flatnonzero(exemplar))))
    if disagree.any():
        loss = dm.add(loss, nll(dm.rsub_scalar(1.0, dm.take_rows(fwd.r_l, np.flatnonzero(disagree)))))
    if agree.any():
        loss = dm.add(loss, dm.total(gxent(dm.take_rows(fwd.r_l, np.flatnonzero(agree)), q, gce_form)))
    return loss


def implication_loss(fwd, batch):
    """Negative implication loss summed over covered U pairs."""
    if fwd.r_u is None or len(batch.u_pairs) == 0:
        return dm.zero()
    rows, rules = batch.u_pairs[:, 0], batch.u_pairs[:, 1]
    p_y = dm.pick(fwd.p_u, rows, batch.rule_labels[rules])
    return dm.total(implication_terms(fwd.r_u, p_y))


def imply_objective(fwd, batch, gamma, q=0.6, gce_form="zhang", exemplar_term=True):
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    loss = dm.add(ll_theta(fwd, batch), ll_phi(fwd, batch, q, gce_form, exemplar_term))
    if gamma == 0:
        return loss
    return dm.add(loss, dm.scale(implication_loss(fwd, batch), gamma))


def _majority_rows(batch, majority_labels):
    maj = batch.u_majority if majority_labels is None else majority_labels
    if maj is None:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    maj = np.asarray(maj, dtype=np.intp)
    rows = np.flatnonzero(maj >= 0)
    return rows, maj[rows]


def lumaj_objective(fwd, batch, gamma, majority_labels=None):
    """L+Umaj: cross entropy on L plus gamma-weighted cross entropy on majority-labeled U."""
    loss = ll_theta(fwd, batch)
    rows, labels = _majority_rows(batch, majority_labels)
    if len(rows) == 0 or gamma == 0:
        return loss
    return dm.add(loss, dm.scale(nll(dm.pick(fwd.p_u, rows, labels)), gamma))


def noise_tolerant_objective(fwd, batch, gamma, q=0.6, majority_labels=None, gce_form="zhang"):
    """Cross entropy on L plus gamma-weighted generalized cross entropy on majority-labeled U."""
    loss = ll_theta(fwd, batch)
    rows, labels = _majority_rows(batch, majority_labels)
    if len(rows) == 0 or gamma == 0:
        return loss
    return dm.add(loss, dm.scale(dm.total(gxent(dm.pick(fwd.p_u, rows, labels), q, gce_form)), gamma))
