"""Labeling rules, coverage matrices, exemplar checks and rule-set statistics.

Regex rules use Python's ``re`` dialect minus backreferences and fire when the
pattern is found anywhere in the text (``re.search``).  Word-list rules fire
when any listed word occurs among the tokens of the lowercased text, split on
non-alphanumerics.  Tabular rules fire when every clause holds.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

ABSTAIN = -1

_TOKEN = re.compile(r"[a-z0-9]+")
_BACKREF = re.compile(r"\\[1-9]|\(\?P=")
COMPARATORS = ("=", "<=", ">")


class RuleError(ValueError):
    pass


def tokenize(text):
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class TabularClause:
    feature: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in COMPARATORS:
            raise RuleError(f"unknown comparator {self.op!r}; expected one of {COMPARATORS}")

    def holds(self, column):
        if self.op == "=":
            return np.asarray(column).astype(str) == str(self.value)
        col = np.asarray(column, dtype=np.float64)
        if self.op == "<=":
            return col <= float(self.value)
        return col > float(self.value)

    def to_json(self):
        return {"feature": self.feature, "op": self.op, "value": self.value}


@dataclass
class Rule:
    id: int
    label: int
    kind: str
    pattern: str | None = None
    words: tuple = ()
    clauses: tuple = ()
    exemplars: tuple = ()
    _regex: re.Pattern | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "regex":
            if self.pattern is None:
                raise RuleError(f"rule {self.id}: regex rule without a pattern")
            if _BACKREF.search(self.pattern):
                raise RuleError(f"rule {self.id}: backreferences are not supported")
            try:
                self._regex = re.compile(self.pattern)
            except re.error as exc:
                raise RuleError(f"rule {self.id}: bad pattern at offset {exc.pos}: {exc.msg}") from exc
        elif self.kind == "wordlist":
            self.words = tuple(w.lower() for w in self.words)
            if not self.words:
                raise RuleError(f"rule {self.id}: empty word list")
        elif self.kind == "tabular":
            self.clauses = tuple(c if isinstance(c, TabularClause) else TabularClause(**c) for c in self.clauses)
            if not self.clauses:
                raise RuleError(f"rule {self.id}: tabular rule without clauses")
        else:
            raise RuleError(f"rule {self.id}: unknown kind {self.kind!r}")
        self.exemplars = tuple(int(i) for i in self.exemplars)

    def fires_text(self, texts):
        if self.kind == "regex":
            return np.array([self._regex.search(t) is not None for t in texts], dtype=bool)
        words = set(self.words)
        return np.array([not words.isdisjoint(tokenize(t)) for t in texts], dtype=bool)

    def fires_table(self, columns, n):
        hit = np.ones(n, dtype=bool)
        for c in self.clauses:
            if c.feature not in columns:
                raise RuleError(f"rule {self.id}: clause references unknown feature {c.feature!r}")
            hit &= c.holds(columns[c.feature])
        return hit

    def to_json(self):
        rec = {"id": self.id, "label": self.label, "kind": self.kind}
        if self.kind == "regex":
            rec["pattern"] = self.pattern
        elif self.kind == "wordlist":
            rec["words"] = list(self.words)
        else:
            rec["clauses"] = [c.to_json() for c in self.clauses]
        rec["exemplar_instance_ids"] = list(self.exemplars)
        return rec

    @classmethod
    def from_json(cls, rec):
        return cls(
            id=int(rec["id"]),
            label=int(rec["label"]),
            kind=rec["kind"],
            pattern=rec.get("pattern"),
            words=tuple(rec.get("words", ())),
            clauses=tuple(rec.get("clauses", ())),
            exemplars=tuple(rec.get("exemplar_instance_ids", ())),
        )


def check_rule_ids(rules, n_classes=None):
    ids = [r.id for r in rules]
    if ids != list(range(len(rules))):
        raise RuleError(f"rule ids must be dense 0..{len(rules) - 1} in order, got {ids}")
    if n_classes is not None:
        for r in rules:
            if not 0 <= r.label < n_classes:
                raise RuleError(f"rule {r.id}: label {r.label} outside [0, {n_classes})")


def load_rules(path):
    with open(path) as f:
        rules = [Rule.from_json(rec) for rec in json.load(f)]
    check_rule_ids(rules)
    return rules


def save_rules(path, rules):
    with open(path, "w") as f:
        json.dump([r.to_json() for r in rules], f, indent=1)
        f.write("\n")


def rule_labels(rules):
    return np.array([r.label for r in rules], dtype=np.intp)


# -- coverage ----------------------------------------------------------------


class CoverageMatrix:
    """Sparse instance x rule firing relation."""

    def __init__(self, pairs, n_instances, n_rules):
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        if len(pairs):
            if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= n_instances:
                raise ValueError("coverage pair references an unknown instance")
            if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= n_rules:
                raise ValueError("coverage pair references an unknown rule")
            pairs = np.unique(pairs, axis=0)
        self.pairs = pairs
        self.n_instances = n_instances
        self.n_rules = n_rules
        self.matrix = np.zeros((n_instances, n_rules), dtype=bool)
        self.matrix[pairs[:, 0], pairs[:, 1]] = True

    def __eq__(self, other):
        return (
            isinstance(other, CoverageMatrix)
            and self.n_instances == other.n_instances
            and self.n_rules == other.n_rules
            and np.array_equal(self.pairs, other.pairs)
        )

    def __len__(self):
        return len(self.pairs)

    def __contains__(self, pair):
        i, j = pair
        return bool(self.matrix[i, j])

    def cover_set(self, j):
        """H_j as sorted instance ids."""
        return np.flatnonzero(self.matrix[:, j])

    def rules_of(self, i):
        return np.flatnonzero(self.matrix[i])

    def cover_lists(self):
        return [self.cover_set(j) for j in range(self.n_rules)]

    def instance_lists(self):
        return [self.rules_of(i) for i in range(self.n_instances)]

    def restrict(self, rows):
        """Pairs whose instance is in ``rows``, re-indexed to positions in ``rows``."""
        rows = np.asarray(rows, dtype=np.intp)
        sub = self.matrix[rows]
        r, j = np.nonzero(sub)
        return np.stack([r, j], axis=1).astype(np.intp)

    def select_rules(self, keep):
        keep = np.asarray(keep, dtype=np.intp)
        sub = self.matrix[:, keep]
        i, j = np.nonzero(sub)
        return CoverageMatrix(np.stack([i, j], axis=1), self.n_instances, len(keep))


def apply_rules(rules, dataset):
    """Coverage of ``rules`` over every instance of ``dataset`` (all splits)."""
    n = dataset.n
    pairs = []
    for r in rules:
        if r.kind == "tabular":
            if dataset.columns is None:
                raise RuleError(f"rule {r.id}: tabular rules need named columns in the dataset")
            hit = r.fires_table(dataset.columns, n)
        else:
            if dataset.texts is None:
                raise RuleError(f"rule {r.id}: text rules need raw texts in the dataset")
            hit = r.fires_text(dataset.texts)
        for i in np.flatnonzero(hit):
            pairs.append((i, r.id))
    return CoverageMatrix(np.array(pairs, dtype=np.intp).reshape(-1, 2), n, len(rules))


# -- exemplars ---------------------------------------------------------------


@dataclass(frozen=True)
class ExemplarIssue:
    instance: int
    rule: int
    problem: str


def exemplar_links(rules):
    """(instance, rule) exemplar pairs listed in the rule records."""
    return [(i, r.id) for r in rules for i in r.exemplars]


def validate_exemplars(links, coverage, labels, rule_label_array):
    """Return one issue per exemplar that its rule does not cover or whose label disagrees."""
    report = []
    for i, j in links:
        if i < 0 or i >= coverage.n_instances or j < 0 or j >= coverage.n_rules:
            report.append(ExemplarIssue(i, j, "unknown instance or rule"))
            continue
        if (i, j) not in coverage:
            report.append(ExemplarIssue(i, j, "uncovered exemplar"))
        if labels[i] != rule_label_array[j]:
            report.append(ExemplarIssue(i, j, "label mismatch"))
    return report


# -- statistics ----------------------------------------------------------------


@dataclass
class CoverageStats:
    percent_cover: float
    micro_precision: float | None
    percent_conflict: float
    avg_cover_size: float
    rules_per_covered_instance: float

    def table_row(self):
        prec = "-" if self.micro_precision is None else f"{self.micro_precision:.1f}"
        return (
            f"{self.percent_cover:.1f}",
            prec,
            f"{self.percent_conflict:.1f}",
            f"{self.avg_cover_size:.1f}",
            f"{self.rules_per_covered_instance:.1f}",
        )


STATS_HEADER = ("%Cover", "Precision", "%Conflict", "Avg|H_j|", "#Rules Per Instance")


def coverage_stats(coverage, rule_label_array, instances, gold=None):
    """Rule statistics over ``instances`` (normally the U split); percentages in [0, 100].

    Precision is computed over firings whose instance has a gold label (>= 0);
    it is None when there are none.
    """
    instances = np.asarray(instances, dtype=np.intp)
    if len(instances) == 0:
        raise ValueError("coverage statistics need a non-empty instance set")
    sub = coverage.matrix[instances]
    per_instance = sub.sum(axis=1)
    covered = per_instance > 0
    n_cov = int(covered.sum())
    rl = np.asarray(rule_label_array)
    conflict = 0
    for row in sub[covered]:
        if len(set(rl[row].tolist())) > 1:
            conflict += 1
    precision = None
    if gold is not None:
        g = np.asarray(gold)[instances]
        i, j = np.nonzero(sub)
        known = g[i] >= 0
        if known.any():
            precision = 100.0 * float(np.mean(rl[j[known]] == g[i[known]]))
    m = coverage.n_rules
    return CoverageStats(
        percent_cover=100.0 * n_cov / len(instances),
        micro_precision=precision,
        percent_conflict=100.0 * conflict / n_cov if n_cov else 0.0,
        avg_cover_size=float(sub.sum()) / m if m else 0.0,
        rules_per_covered_instance=float(per_instance[covered].mean()) if n_cov else 0.0,
    )


def rule_precisions(coverage, rule_label_array, gold, instances=None):
    """Per-rule precision over gold-labeled firings; NaN where a rule has none."""
    mat = coverage.matrix if instances is None else coverage.matrix[instances]
    g = np.asarray(gold) if instances is None else np.asarray(gold)[instances]
    out = np.full(coverage.n_rules, np.nan)
    for j in range(coverage.n_rules):
        hits = g[mat[:, j] & (g >= 0)]
        if len(hits):
            out[j] = float(np.mean(hits == rule_label_array[j]))
    return out


def majority_vote(instance, coverage, rule_label_array, default_class=None):
    """Plurality label of the rules firing on ``instance``; ABSTAIN when none fire.

    Ties go to ``default_class`` when given, else to the lowest tied class id.
    """
    fired = rule_label_array[coverage.rules_of(instance)]
    if len(fired) == 0:
        return ABSTAIN
    counts = np.bincount(fired)
    top = np.flatnonzero(counts == counts.max())
    if len(top) > 1 and default_class is not None:
        return int(default_class)
    return int(top[0])


def majority_labels(coverage, rule_label_array, instances=None, default_class=None):
    idx = range(coverage.n_instances) if instances is None else instances
    return np.array([majority_vote(i, coverage, rule_label_array, default_class) for i in idx], dtype=np.intp)


def filter_rules(rules, coverage, criterion, gold=None, instances=None):
    """Remove rules and re-index the survivors densely.

    ``criterion`` is ``("precision_above", t)`` (drop rules whose precision on
    gold-labeled firings exceeds ``t``) or ``("ids", [..])`` (drop those ids).
    Returns ``(rules, coverage, kept_old_ids)``.
    """
    kind, arg = criterion
    if kind == "precision_above":
        if gold is None:
            raise ValueError("precision filtering needs gold labels")
        prec = rule_precisions(coverage, rule_labels(rules), gold, instances)
        drop = {r.id for r, p in zip(rules, prec) if not np.isnan(p) and p > arg}
    elif kind == "ids":
        drop = set(int(a) for a in arg)
    elif kind == "all":
        drop = {r.id for r in rules}
    else:
        raise ValueError(f"unknown filter criterion {kind!r}")
    kept = [r.id for r in rules if r.id not in drop]
    new_rules = []
    for new_id, old in enumerate(kept):
        r = rules[old]
        new_rules.append(Rule(new_id, r.label, r.kind, r.pattern, r.words, r.clauses, r.exemplars))
    return new_rules, coverage.select_rules(kept), kept
