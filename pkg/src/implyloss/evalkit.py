"""Joint inference, metrics, rule-denoising diagnostics and experiment sweeps."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .nets import classify_proba, rule_proba
from .rulekit import ABSTAIN, filter_rules, majority_labels, rule_labels

logger = logging.getLogger(__name__)

ACTIVE_THRESHOLD = 0.5


@dataclass
class InferenceResult:
    p_theta: np.ndarray
    pairs: np.ndarray  # (row, rule) coverage pairs, rows index the evaluated instances
    p_rule: np.ndarray  # P_phi(r=1|x) per pair
    active: np.ndarray  # bool per pair: rule is in G
    scores: np.ndarray
    pred: np.ndarray

    def active_rules(self, row):
        sel = (self.pairs[:, 0] == row) & self.active
        return self.pairs[sel, 1]


def joint_scores(p_theta, pairs, p_rule, rule_label_array):
    """Soft-vote scores: P_theta plus the average vote of active rules (P_phi(1|x) > 0.5).

    Rows with no active rule keep P_theta.
    """
    p_theta = np.asarray(p_theta, dtype=np.float64)
    n, k = p_theta.shape
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    p_rule = np.asarray(p_rule, dtype=np.float64).reshape(-1)
    active = p_rule > ACTIVE_THRESHOLD
    votes = np.zeros((n, k))
    counts = np.zeros(n)
    if active.any():
        rows, rules, p = pairs[active, 0], pairs[active, 1], p_rule[active]
        agree = np.arange(k)[None, :] == np.asarray(rule_label_array)[rules][:, None]
        np.add.at(votes, rows, np.where(agree, p[:, None], 1.0 - p[:, None]))
        np.add.at(counts, rows, 1.0)
    scores = p_theta.copy()
    has = counts > 0
    scores[has] += votes[has] / counts[has, None]
    return scores, active


def joint_infer(params, x, pairs, rule_label_array):
    """Eval-mode joint inference for the rows of ``x``; ``pairs`` index those rows."""
    p_theta = classify_proba(params, x).values
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if len(pairs) and params.rules is not None:
        p_rule = rule_proba(params, np.asarray(x)[pairs[:, 0]], pairs[:, 1]).values[:, 0]
    else:
        pairs, p_rule = np.zeros((0, 2), dtype=np.intp), np.zeros(0)
    scores, active = joint_scores(p_theta, pairs, p_rule, rule_label_array)
    return InferenceResult(p_theta, pairs, p_rule, active, scores, np.argmax(scores, axis=1))


def predict(params, x, rows, coverage, rule_label_array, joint=True):
    """Class predictions for dataset ``rows`` (features ``x``)."""
    if not joint or coverage is None or params.rules is None:
        return np.argmax(classify_proba(params, x).values, axis=1)
    return joint_infer(params, x, coverage.restrict(rows), rule_label_array).pred


# -- metrics ------------------------------------------------------------------


def _prf(pred, gold, c):
    tp = np.sum((pred == c) & (gold == c))
    fp = np.sum((pred == c) & (gold != c))
    fn = np.sum((pred != c) & (gold == c))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return float(p), float(r), float(f)


def precision_recall_f1(pred, gold, positive_class=1):
    return _prf(np.asarray(pred), np.asarray(gold), positive_class)


def metrics(pred, gold, kind="accuracy", positive_class=1):
    pred, gold = np.asarray(pred), np.asarray(gold)
    if len(pred) == 0:
        raise ValueError("empty prediction set")
    if pred.shape != gold.shape:
        raise ValueError(f"{len(pred)} predictions for {len(gold)} gold labels")
    if kind == "accuracy":
        return float(np.mean(pred == gold))
    if kind == "f1_binary":
        return _prf(pred, gold, positive_class)[2]
    if kind == "f1_macro":
        classes = np.unique(np.concatenate([gold, pred[pred >= 0]]))
        return float(np.mean([_prf(pred, gold, c)[2] for c in classes]))
    raise ValueError(f"unknown metric {kind!r}")


def majority_predictions(coverage, rule_label_array, rows, default_class=None):
    """Majority-vote baseline; uncovered rows abstain (-1) unless a default class is set."""
    pred = majority_labels(coverage, rule_label_array, rows, default_class)
    if default_class is not None:
        pred = np.where(pred == ABSTAIN, default_class, pred)
    return pred


def evaluate_split(params, dataset, coverage, rules, config, split="test", joint=True):
    rows = dataset.idx(split)
    rl = rule_labels(rules) if rules else np.zeros(0, dtype=np.intp)
    pred = predict(params, dataset.features[rows], rows, coverage, rl, joint=joint)
    return metrics(pred, dataset.labels[rows], config.metric, config.positive_class)


# -- diagnostics -----------------------------------------------------------------


@dataclass
class RuleDiagnostics:
    rule_id: int
    firings: int
    orig_precision: float
    denoised_precision: float  # NaN when every firing was suppressed
    suppressed_frac: float


@dataclass
class DiagnosticsReport:
    rules: list
    firings: int
    orig_precision: float
    denoised_precision: float
    suppressed_frac: float
    suppressed_pairs: np.ndarray  # (instance, rule) pairs with P_phi(1|x) <= 0.5

    def to_rows(self):
        rows = [(r.rule_id, r.orig_precision, r.denoised_precision, r.suppressed_frac) for r in self.rules]
        rows.append(("all", self.orig_precision, self.denoised_precision, self.suppressed_frac))
        return rows


def _precision(correct):
    return float(np.mean(correct)) if len(correct) else math.nan


def diagnostics_from_probs(pairs, p_rule, gold, rule_label_array, n_rules):
    """Original vs. retained-firing precision given per-pair P_phi(r=1|x)."""
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    p_rule = np.asarray(p_rule).reshape(-1)
    correct = np.asarray(gold)[pairs[:, 0]] == np.asarray(rule_label_array)[pairs[:, 1]]
    kept = p_rule > ACTIVE_THRESHOLD
    per_rule = []
    for j in range(n_rules):
        sel = pairs[:, 1] == j
        n = int(sel.sum())
        per_rule.append(RuleDiagnostics(
            j, n, _precision(correct[sel]), _precision(correct[sel & kept]),
            float(np.mean(~kept[sel])) if n else math.nan,
        ))
    return DiagnosticsReport(
        per_rule,
        len(pairs),
        _precision(correct),
        _precision(correct[kept]),
        float(np.mean(~kept)) if len(pairs) else math.nan,
        pairs[~kept],
    )


def denoise_diagnostics(params, coverage, dataset, rules, split="test"):
    """Precision of rule firings on ``split`` before and after suppression by the rule network."""
    rows = dataset.idx(split)
    gold = dataset.labels[rows]
    if np.any(gold < 0):
        raise ValueError(f"diagnostics need gold labels on every {split} instance")
    local = coverage.restrict(rows)
    if len(local):
        p = rule_proba(params, dataset.features[rows][local[:, 0]], local[:, 1]).values[:, 0]
    else:
        p = np.zeros(0)
    report = diagnostics_from_probs(local, p, gold, rule_labels(rules), coverage.n_rules)
    if len(report.suppressed_pairs):
        report.suppressed_pairs = np.stack([rows[report.suppressed_pairs[:, 0]], report.suppressed_pairs[:, 1]], 1)
    return report


def write_diagnostics_csv(path, report):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rule_id", "orig_precision", "denoised_precision", "suppressed_frac"])
        for row in report.to_rows():
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])


def _fmt(v):
    return "undefined" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def write_results_csv(path, rows):
    """rows: iterable of (method, seed, metric, value)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "seed", "metric", "value"])
        for method, seed, metric, value in rows:
            w.writerow([method, seed, metric, repr(float(value))])


# -- sweeps -------------------------------------------------------------------------


def subsample_labeled(dataset, size, seed=0):
    """Copy of ``dataset`` keeping ``size`` L instances (exemplars first); the rest move to U."""
    from copy import deepcopy

    ds = deepcopy(dataset)
    l_idx = ds.idx("L")
    if size > len(l_idx):
        raise ValueError(f"labeled size {size} exceeds |L| = {len(l_idx)}")
    ex = l_idx[ds.exemplars[l_idx] >= 0]
    others = np.random.default_rng(seed).permutation(l_idx[ds.exemplars[l_idx] < 0])
    keep = np.concatenate([ex, others])[:size]
    moved = np.setdiff1d(l_idx, keep)
    ds.split[moved] = "U"
    ds.exemplars[moved] = -1
    return ds


def sweep(experiment, grid, dataset, rules, coverage, config, jobs=1):
    """One replicated run per grid point.

    ``labeled_size``: grid of |L| sizes.  ``rule_precision``: grid of thresholds;
    rules whose precision on gold-labeled non-test firings exceeds the threshold
    are removed (a threshold below 0 removes every rule).
    Returns rows ``(experiment, grid_value, method, metric, mean, std)``.
    """
    from .trainers import replicate

    rows = []
    for g in grid:
        ds, rs, cov = dataset, rules, coverage
        if experiment == "labeled_size":
            ds = subsample_labeled(dataset, int(g))
        elif experiment == "rule_precision":
            from copy import deepcopy

            ds = deepcopy(dataset)
            gold = np.where(ds.split == "test", -1, ds.labels)
            if g < 0:
                rs, cov, kept = filter_rules(rules, coverage, ("all", None))
            else:
                rs, cov, kept = filter_rules(rules, coverage, ("precision_above", float(g)), gold=gold)
            ds.remap_exemplars(kept)
        else:
            raise ValueError(f"unknown sweep experiment {experiment!r}")
        _, summary = replicate(ds, rs, cov, config, jobs=jobs)
        for metric, (mean, std) in summary.items():
            rows.append((experiment, g, config.method, metric, mean, std))
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["experiment", "grid_value", "method", "metric", "mean", "std"])
        for exp, g, method, metric, mean, std in rows:
            w.writerow([exp, g, method, metric, repr(float(mean)), repr(float(std))])
