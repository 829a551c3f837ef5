"""Classifier network P_theta(y|x) and the shared rule network P_phi(r_j=1|x)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm


class WidthError(ValueError):
    pass


@dataclass
class MLP:
    """Dense ReLU network; the last layer is linear (no activation)."""

    widths: list[int]
    weights: list[dm.Tensor]
    biases: list[dm.Tensor]
    keep_prob: float = 1.0

    @property
    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def logits(self, x, train=False, rng=None):
        if x.shape[1] != self.widths[0]:
            raise WidthError(f"input width {x.shape[1]} does not match network width {self.widths[0]}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dm.add_bias(dm.matmul(h, w), b)
            if i < last:
                h = dm.relu(h)
                if train and self.keep_prob < 1.0:
                    if rng is None:
                        raise ValueError("train-mode dropout needs an rng")
                    mask = (rng.random(h.shape) < self.keep_prob) / self.keep_prob
                    h = dm.mul(h, dm.Tensor(mask))
        return h


def init_mlp(rng, widths, keep_prob=1.0):
    """Scaled-uniform (Glorot) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(dm.Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(dm.Tensor(np.zeros((1, fan_out)), requires_grad=True))
    return MLP(list(widths), weights, biases, keep_prob)


@dataclass
class ModelParams:
    """theta (classifier) and phi (rule network).  ``rules`` may be None for Only-L."""

    classifier: MLP
    rules: MLP | None = None
    n_rules: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def parameters(self):
        ps = list(self.classifier.parameters)
        if self.rules is not None:
            ps += self.rules.parameters
        return ps

    def snapshot(self):
        return [p.values.copy() for p in self.parameters]

    def restore(self, values):
        for p, v in zip(self.parameters, values):
            p.set_values(v)


def classifier_widths(d, k, hidden=(512, 512)):
    return [d, *hidden, k]


def rule_widths(d, m, hidden=(512, 512)):
    return [d + m, *hidden, 1]


def init_params(seed, widths, rule_net_widths=None, keep_prob=0.8, rule_keep_prob=None):
    """Deterministic per ``seed``; classifier and rule net draw from independent streams."""
    ss = np.random.SeedSequence(seed)
    c_seq, r_seq = ss.spawn(2)
    clf = init_mlp(np.random.default_rng(c_seq), widths, keep_prob)
    rnet = None
    m = 0
    if rule_net_widths is not None:
        m = rule_net_widths[0] - widths[0]
        if m <= 0:
            raise WidthError("rule net input must be feature width plus the number of rules")
        rk = keep_prob if rule_keep_prob is None else rule_keep_prob
        rnet = init_mlp(np.random.default_rng(r_seq), rule_net_widths, rk)
    return ModelParams(clf, rnet, m, seed)


def classify_proba(params, x, train=False, rng=None):
    """Row-wise class distribution P_theta(y|x) as a Tensor."""
    net = params.classifier if isinstance(params, ModelParams) else params
    return dm.softmax(net.logits(dm.as_tensor(x), train, rng))


def rule_inputs(x, rule_ids, n_rules):
    """Stack [x_i, onehot(j)] rows for each (x_i, j) pair."""
    x = np.asarray(x, dtype=np.float64)
    rule_ids = np.asarray(rule_ids, dtype=np.intp).reshape(-1)
    if x.shape[0] != rule_ids.shape[0]:
        raise WidthError(f"{x.shape[0]} instances but {rule_ids.shape[0]} rule ids")
    if rule_ids.size and (rule_ids.min() < 0 or rule_ids.max() >= n_rules):
        raise ValueError(f"rule id outside [0, {n_rules}); the rule set is frozen at training")
    onehot = np.zeros((rule_ids.shape[0], n_rules))
    onehot[np.arange(rule_ids.shape[0]), rule_ids] = 1.0
    return np.hstack([x, onehot])


def rule_proba(params, x, rule_ids, train=False, rng=None):
    """P_phi(r_j=1|x) for paired rows of ``x`` and ``rule_ids``; column Tensor."""
    if params.rules is None:
        raise ValueError("model has no rule network")
    inp = rule_inputs(x, rule_ids, params.n_rules)
    return dm.sigmoid(params.rules.logits(dm.Tensor(inp), train, rng))


# -- checkpoints ------------------------------------------------------------


def _write_mlp(lines, tag, net):
    lines.append(f"{tag} widths {' '.join(map(str, net.widths))} keep {net.keep_prob!r}")
    for p in net.parameters:
        lines.append(" ".join(repr(float(v)) for v in p.values.ravel()))


def save_checkpoint(path, params, mode="eval"):
    lines = [f"implyloss-checkpoint seed {params.seed} mode {mode} rules {params.n_rules}"]
    _write_mlp(lines, "classifier", params.classifier)
    if params.rules is not None:
        _write_mlp(lines, "rulenet", params.rules)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _read_mlp(lines, pos):
    head = lines[pos].split()
    k = head.index("keep")
    widths = [int(w) for w in head[2:k]]
    keep = float(head[k + 1])
    pos += 1
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = np.array([float(t) for t in lines[pos].split()]).reshape(fan_in, fan_out)
        b = np.array([float(t) for t in lines[pos + 1].split()]).reshape(1, fan_out)
        weights.append(dm.Tensor(w, requires_grad=True))
        biases.append(dm.Tensor(b, requires_grad=True))
        pos += 2
    return MLP(widths, weights, biases, keep), pos


def load_checkpoint(path):
    with open(path) as f:
        lines = f.read().splitlines()
    head = lines[0].split()
    if head[0] != "implyloss-checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    seed = int(head[head.index("seed") + 1])
    n_rules = int(head[head.index("rules") + 1])
    clf, pos = _read_mlp(lines, 1)
    rnet = None
    if pos < len(lines) and lines[pos].startswith("rulenet"):
        rnet, pos = _read_mlp(lines, pos)
    return ModelParams(clf, rnet, n_rules, seed)
