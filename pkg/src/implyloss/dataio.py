"""Dataset container, plain-text file formats, featurizers and the synthetic 2-D task.

Directory layout written by :func:`save_dataset`::

    features.txt    "N d" header, then N rows of d floats
    labels.txt      "instance_id class_id" (only gold-labeled instances)
    split.txt       "instance_id L|U|valid|test"
    exemplars.txt   "instance_id rule_id"
    coverage.txt    "instance_id rule_id"   (optional)
    rules.json      rule records            (optional)
    columns.tsv     named raw columns for tabular rules (optional)
    texts.txt       one raw text per line, newlines escaped (optional)
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .rulekit import CoverageMatrix, Rule, TabularClause, load_rules, rule_labels, save_rules

SPLITS = ("L", "U", "valid", "test")


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    split: np.ndarray
    labels: np.ndarray | None = None
    exemplars: np.ndarray | None = None
    texts: list[str] | None = None
    columns: dict | None = None
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise FormatError(f"features must be N x d, got shape {self.features.shape}")
        n = len(self.features)
        self.split = np.asarray(self.split, dtype=object)
        if self.split.shape != (n,):
            raise FormatError(f"split has {len(self.split)} entries for {n} instances")
        bad = set(self.split.tolist()) - set(SPLITS)
        if bad:
            raise FormatError(f"unknown split tags {sorted(bad)}")
        self.labels = np.full(n, -1, dtype=np.intp) if self.labels is None else np.asarray(self.labels, dtype=np.intp)
        self.exemplars = (
            np.full(n, -1, dtype=np.intp) if self.exemplars is None else np.asarray(self.exemplars, dtype=np.intp)
        )
        if np.any(self.labels[self.split == "L"] < 0):
            raise FormatError("every L instance needs a gold label")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if np.any(self.labels >= 0) else 0

    @property
    def n(self):
        return len(self.features)

    @property
    def d(self):
        return self.features.shape[1]

    def idx(self, *splits):
        return np.flatnonzero(np.isin(self.split, splits))

    def with_exemplars(self, links):
        ex = np.full(self.n, -1, dtype=np.intp)
        for i, j in links:
            ex[i] = j
        self.exemplars = ex
        return self

    def exemplar_links(self):
        return [(int(i), int(self.exemplars[i])) for i in np.flatnonzero(self.exemplars >= 0)]

    def remap_exemplars(self, kept_rule_ids):
        """Re-index exemplar links after rule filtering; links to dropped rules become -1."""
        old_to_new = {old: new for new, old in enumerate(kept_rule_ids)}
        self.exemplars = np.array([old_to_new.get(int(e), -1) if e >= 0 else -1 for e in self.exemplars], dtype=np.intp)
        return self


# -- plain-text files ---------------------------------------------------------


def load_features(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file, expected 'N d' header at line 1")
    head = lines[0].split()
    try:
        n, d = int(head[0]), int(head[1])
        if len(head) != 2:
            raise ValueError
    except (ValueError, IndexError):
        raise FormatError(f"{path}:1: header must be 'N d', got {lines[0]!r}") from None
    rows = [ln for ln in lines[1:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) < n:
        raise FormatError(f"{path}:{len(rows) + 2}: header declares {n} rows, file has {len(rows)}")
    if len(rows) > n:
        raise FormatError(f"{path}:{n + 2}: header declares {n} rows, file has more")
    out = np.empty((n, d))
    for k, ln in enumerate(rows):
        toks = ln.split()
        if len(toks) != d:
            raise FormatError(f"{path}:{k + 2}: expected {d} values, got {len(toks)}")
        try:
            out[k] = [float(t) for t in toks]
        except ValueError:
            raise FormatError(f"{path}:{k + 2}: non-numeric token in {ln!r}") from None
    return out


def save_features(path, x):
    x = np.asarray(x, dtype=np.float64)
    with open(path, "w") as f:
        f.write(f"{x.shape[0]} {x.shape[1]}\n")
        for row in x:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def _read_pairs(path):
    out = []
    with open(path) as f:
        for k, ln in enumerate(f, 1):
            toks = ln.split()
            if not toks:
                continue
            if len(toks) != 2:
                raise FormatError(f"{path}:{k}: expected two fields, got {ln.strip()!r}")
            out.append((toks[0], toks[1]))
    return out


def _int(tok, path, what):
    try:
        return int(tok)
    except ValueError:
        raise FormatError(f"{path}: {what} {tok!r} is not an integer") from None


def load_labels(path, n):
    labels = np.full(n, -1, dtype=np.intp)
    for a, b in _read_pairs(path):
        labels[_int(a, path, "instance id")] = _int(b, path, "class id")
    return labels


def save_labels(path, labels):
    with open(path, "w") as f:
        for i, y in enumerate(labels):
            if y >= 0:
                f.write(f"{i} {int(y)}\n")


def load_split(path, n):
    split = np.array([None] * n, dtype=object)
    for a, b in _read_pairs(path):
        if b not in SPLITS:
            raise FormatError(f"{path}: unknown split {b!r}")
        split[_int(a, path, "instance id")] = b
    if any(s is None for s in split):
        raise FormatError(f"{path}: split tags must cover every instance")
    return split


def save_split(path, split):
    with open(path, "w") as f:
        for i, s in enumerate(split):
            f.write(f"{i} {s}\n")


def load_pairs(path):
    return np.array([(_int(a, path, "instance id"), _int(b, path, "rule id")) for a, b in _read_pairs(path)],
                    dtype=np.intp).reshape(-1, 2)


def save_pairs(path, pairs):
    with open(path, "w") as f:
        for i, j in pairs:
            f.write(f"{int(i)} {int(j)}\n")


def load_coverage(path, n, m):
    return CoverageMatrix(load_pairs(path), n, m)


def save_coverage(path, coverage):
    save_pairs(path, coverage.pairs)


def _save_columns(path, columns):
    names = list(columns)
    with open(path, "w") as f:
        f.write("\t".join(names) + "\n")
        for row in zip(*(columns[c] for c in names)):
            f.write("\t".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")


def _load_columns(path):
    with open(path) as f:
        lines = f.read().splitlines()
    names = lines[0].split("\t")
    cols = {c: [] for c in names}
    for ln in lines[1:]:
        for c, v in zip(names, ln.split("\t")):
            cols[c].append(v)
    out = {}
    for c, vals in cols.items():
        try:
            out[c] = np.array([float(v) for v in vals])
        except ValueError:
            out[c] = np.array(vals, dtype=object)
    return out


def save_dataset(directory, ds, rules=None, coverage=None):
    os.makedirs(directory, exist_ok=True)
    save_features(os.path.join(directory, "features.txt"), ds.features)
    save_labels(os.path.join(directory, "labels.txt"), ds.labels)
    save_split(os.path.join(directory, "split.txt"), ds.split)
    save_pairs(os.path.join(directory, "exemplars.txt"), ds.exemplar_links())
    if coverage is not None:
        save_coverage(os.path.join(directory, "coverage.txt"), coverage)
    if rules is not None:
        save_rules(os.path.join(directory, "rules.json"), rules)
    if ds.columns is not None:
        _save_columns(os.path.join(directory, "columns.tsv"), ds.columns)
    if ds.texts is not None:
        with open(os.path.join(directory, "texts.txt"), "w", newline="") as f:
            for t in ds.texts:
                f.write(t.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r") + "\n")


def _unescape(line):
    out, k = [], 0
    while k < len(line):
        ch = line[k]
        if ch == "\\" and k + 1 < len(line):
            out.append({"n": "\n", "r": "\r"}.get(line[k + 1], line[k + 1]))
            k += 2
        else:
            out.append(ch)
            k += 1
    return "".join(out)


def load_dataset(directory):
    """Load a dataset directory.  Returns ``(dataset, rules or None, coverage or None)``.

    When ``coverage.txt`` is absent but rules are present, coverage is left to the
    caller (:func:`implyloss.rulekit.apply_rules`).  Exemplar links listed in the
    rule file are merged into the dataset's links.
    """
    p = lambda name: os.path.join(directory, name)  # noqa: E731
    x = load_features(p("features.txt"))
    n = len(x)
    labels = load_labels(p("labels.txt"), n) if os.path.exists(p("labels.txt")) else None
    split = load_split(p("split.txt"), n)
    texts = None
    if os.path.exists(p("texts.txt")):
        with open(p("texts.txt"), newline="") as f:
            texts = [_unescape(ln) for ln in f.read().split("\n")[:n]]
    columns = _load_columns(p("columns.tsv")) if os.path.exists(p("columns.tsv")) else None
    ds = Dataset(x, split, labels, texts=texts, columns=columns)
    links = [tuple(pr) for pr in load_pairs(p("exemplars.txt"))] if os.path.exists(p("exemplars.txt")) else []
    rules = load_rules(p("rules.json")) if os.path.exists(p("rules.json")) else None
    if rules is not None:
        links = sorted(set(links) | {(i, r.id) for r in rules for i in r.exemplars})
        ds.n_classes = max(ds.n_classes, int(rule_labels(rules).max()) + 1 if rules else 0)
    ds.with_exemplars(links)
    coverage = None
    if os.path.exists(p("coverage.txt")):
        m = len(rules) if rules is not None else int(load_pairs(p("coverage.txt"))[:, 1].max()) + 1
        coverage = load_coverage(p("coverage.txt"), n, m)
    return ds, rules, coverage


# -- featurizers ----------------------------------------------------------------


def _ngrams(text):
    from .rulekit import tokenize

    toks = tokenize(text)
    return toks + [f"{a} {b}" for a, b in zip(toks, toks[1:])]


@dataclass
class BowVocabulary:
    terms: list[str]
    index: dict = field(init=False)

    def __post_init__(self):
        self.index = {t: k for k, t in enumerate(self.terms)}

    def transform(self, texts):
        out = np.zeros((len(texts), len(self.terms)))
        for r, t in enumerate(texts):
            for g in _ngrams(t):
                k = self.index.get(g)
                if k is not None:
                    out[r, k] = 1.0
        return out

    def save(self, path):
        with open(path, "w") as f:
            f.write("\n".join(self.terms) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls([ln for ln in f.read().split("\n") if ln])


def fit_bow(texts, vocab_size=2000):
    """Vocabulary of the ``vocab_size`` most frequent uni+bi-grams (document frequency).

    Ties prefer unigrams, then alphabetical order.  Pass only L and U texts.
    """
    if vocab_size <= 0:
        raise ValueError("vocab_size must be positive")
    if not texts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    df = Counter()
    for t in texts:
        df.update(set(_ngrams(t)))
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0].count(" "), kv[0]))
    return BowVocabulary([t for t, _ in ranked[:vocab_size]])


def featurize_bow(texts, vocab_size=2000, vocab=None):
    """Few-hot matrix for ``texts``; returns ``(matrix, vocab)``."""
    vocab = fit_bow(texts, vocab_size) if vocab is None else vocab
    return vocab.transform(texts), vocab


@dataclass
class TabularFeaturizer:
    """One-hot categoricals, z-scored reals, with statistics from the training rows."""

    schema: dict
    categories: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)
    stds: dict = field(default_factory=dict)

    def fit(self, columns, rows):
        rows = np.asarray(rows, dtype=np.intp)
        for name, kind in self.schema.items():
            col = np.asarray(columns[name], dtype=object)[rows]
            if kind == "categorical":
                self.categories[name] = sorted({str(v) for v in col})
            elif kind == "real":
                vals = _as_real(col, name)
                self.means[name] = float(vals.mean())
                std = float(vals.std())
                self.stds[name] = std if std > 0 else 1.0
            else:
                raise ValueError(f"column {name!r}: kind must be 'categorical' or 'real', got {kind!r}")
        return self

    def transform(self, columns):
        blocks = []
        for name, kind in self.schema.items():
            col = np.asarray(columns[name], dtype=object)
            if kind == "categorical":
                cats = {c: k for k, c in enumerate(self.categories[name])}
                block = np.zeros((len(col), len(cats)))
                for r, v in enumerate(col):
                    k = cats.get(str(v))
                    if k is not None:
                        block[r, k] = 1.0
            else:
                block = ((_as_real(col, name) - self.means[name]) / self.stds[name]).reshape(-1, 1)
            blocks.append(block)
        return np.hstack(blocks) if blocks else np.zeros((0, 0))


def _as_real(col, name):
    try:
        return np.array([float(v) for v in col], dtype=np.float64)
    except (TypeError, ValueError):
        raise ValueError(f"column {name!r} is declared real but holds non-numeric values") from None


def featurize_tabular(columns, schema, train_rows):
    """Returns ``(matrix, fitted featurizer)``; ``train_rows`` should be the L and U rows."""
    f = TabularFeaturizer(dict(schema)).fit(columns, train_rows)
    return f.transform(columns), f


# -- synthetic 2-D task -----------------------------------------------------------


@dataclass
class SyntheticConfig:
    n_l: int = 40
    n_u: int = 2000
    n_valid: int = 1000
    n_test: int = 1000
    n_rules: int = 4
    beta: float = 2.0
    boundary: str = "sine"
    amplitude: float = 0.5
    frequency: float = 3.0
    weight: tuple = (1.0, 0.3)
    bias: float = 0.0
    shrink: float = 1.0
    margin_window: tuple = (0.2, 0.4)
    paired: bool = True


@dataclass
class SyntheticTruth:
    config: SyntheticConfig
    true_cover: CoverageMatrix

    def label(self, x):
        return planted_label(x, self.config)


def boundary_value(x, cfg):
    """Signed boundary function; the label is 1 where it is positive."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    if cfg.boundary == "linear":
        return x @ np.asarray(cfg.weight, dtype=np.float64) + cfg.bias
    if cfg.boundary == "sine":
        return x[:, 1] - cfg.amplitude * np.sin(cfg.frequency * x[:, 0]) - cfg.bias
    raise ValueError(f"unknown boundary {cfg.boundary!r}")


def planted_label(x, cfg):
    return (boundary_value(x, cfg) > 0).astype(np.intp)


def box_margin(x, cfg):
    """Largest half-side of an axis-aligned box around each point that stays on its side."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    if cfg.boundary == "linear":
        w = np.asarray(cfg.weight, dtype=np.float64)
        return np.abs(x @ w + cfg.bias) / np.abs(w).sum()
    # L-infinity distance to the curve x1 = a sin(f x0) + b, sampled densely
    t = np.linspace(-3.0, 3.0, 24001)
    curve = np.stack([t, cfg.amplitude * np.sin(cfg.frequency * t) + cfg.bias], axis=1)
    # sampling can overestimate the distance by half a step; stay on the safe side
    slack = 0.5 * np.abs(np.diff(curve, axis=0)).max()
    out = np.empty(len(x))
    for k, p in enumerate(x):
        out[k] = np.abs(curve - p).max(axis=1).min()
    return np.maximum(out - slack, 0.0)


def gen_synthetic_2d(config=None, seed=0):
    """Planted 2-D task with over-generalized box rules.

    Points are uniform on [-1, 1]^2 and labeled by the side of a planted boundary
    (a sine curve by default).  Each rule is an axis-aligned box centered on a
    distinct L exemplar.  At ``beta = 1`` the box half-side is ``shrink`` times
    the largest half-side that stays on the exemplar's side; ``beta`` scales it,
    so large boxes cross the boundary.  A firing is truly correct exactly when
    the point lies on the exemplar's side.

    Returns ``(dataset, rules, coverage, truth)``.
    """
    cfg = SyntheticConfig() if config is None else config
    if cfg.n_rules > cfg.n_l:
        raise ValueError(f"infeasible config: {cfg.n_rules} rules but only {cfg.n_l} labeled instances")
    if cfg.beta < 1:
        raise ValueError("beta must be >= 1")
    rng = np.random.default_rng(seed)
    n = cfg.n_l + cfg.n_u + cfg.n_valid + cfg.n_test
    x = rng.uniform(-1.0, 1.0, size=(n, 2))
    y = planted_label(x, cfg)
    split = np.array(["L"] * cfg.n_l + ["U"] * cfg.n_u + ["valid"] * cfg.n_valid + ["test"] * cfg.n_test,
                     dtype=object)

    # exemplars: distinct L points inside the margin window, alternating classes
    margin = box_margin(x[: cfg.n_l], cfg)
    lo, hi = cfg.margin_window
    order = rng.permutation(cfg.n_l)
    chosen = []
    for k in range(cfg.n_rules):
        want = k % 2
        pool = [i for i in order if i not in chosen and lo <= margin[i] <= hi]
        cands = [i for i in pool if y[i] == want]
        if cfg.paired and k % 2 and cands:
            # partner of the previous exemplar: nearest candidate of the other class
            prev = x[chosen[-1]]
            cands = sorted(cands, key=lambda i: (np.abs(x[i] - prev).max(), i))
        pick = cands[0] if cands else (pool[0] if pool else None)
        if pick is None:
            pick = next(i for i in order if i not in chosen)
        chosen.append(int(pick))

    rules = []
    columns = {"x0": x[:, 0].copy(), "x1": x[:, 1].copy()}
    for j, i in enumerate(chosen):
        half = cfg.shrink * margin[i] * cfg.beta
        clauses = []
        for f, c in (("x0", x[i, 0]), ("x1", x[i, 1])):
            clauses.append(TabularClause(f, ">", float(c - half)))
            clauses.append(TabularClause(f, "<=", float(c + half)))
        rules.append(Rule(j, int(y[i]), "tabular", clauses=tuple(clauses), exemplars=(i,)))

    ds = Dataset(x, split, y, columns=columns, n_classes=2)
    ds.with_exemplars([(i, j) for j, i in enumerate(chosen)])

    from .rulekit import apply_rules

    coverage = apply_rules(rules, ds)
    correct = y[coverage.pairs[:, 0]] == rule_labels(rules)[coverage.pairs[:, 1]]
    truth = SyntheticTruth(cfg, CoverageMatrix(coverage.pairs[correct], n, len(rules)))
    return ds, rules, coverage, truth
