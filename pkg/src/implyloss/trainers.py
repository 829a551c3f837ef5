"""Mini-batch training with Adam and early stopping for every method."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import diffmath as dm
from . import losses
from .nets import classifier_widths, init_params, rule_widths
from .rulekit import majority_labels, rule_labels

logger = logging.getLogger(__name__)

METHODS = ("only_l", "l_u_maj", "noise_tolerant", "implyloss", "posterior_reg")
METRICS = ("accuracy", "f1_binary", "f1_macro")
RULE_NET_METHODS = ("implyloss", "posterior_reg")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "implyloss"
    gamma: float = 0.1
    q: float = 0.6
    lam: float = 1.0
    alpha: float | None = None
    learning_rate: float = 0.0003
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    metric: str = "accuracy"
    positive_class: int = 1
    seeds: tuple = tuple(range(10))
    keep_prob: float = 0.8
    rule_dropout: bool = True
    gce_form: str = "zhang"
    exemplar_term: bool = True
    hidden: tuple = (512, 512)
    rule_hidden: tuple | None = None
    joint_validation: bool = False
    default_class: int | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.rule_hidden is not None:
            self.rule_hidden = tuple(int(h) for h in self.rule_hidden)
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be non-negative")
        if not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.gce_form not in losses.GCE_FORMS:
            raise ValueError(f"gce_form must be one of {losses.GCE_FORMS}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")

    @property
    def pr_gamma(self):
        """Weight of the Q-matching terms in posterior regularization (1/alpha when alpha is set)."""
        return self.gamma if self.alpha is None else 1.0 / self.alpha

    def to_dict(self):
        return asdict(self)

    def updated(self, **kw):
        return replace(self, **kw)


# published per-dataset settings; batch size for Only-L is the smaller one.
_PUBLISHED = {
    #            NT     SNT    PR     imply  L+Usn  L+Umaj   q_NT  lr      bs  bs_onlyL
    "question": (0.001, 0.1, 0.001, 0.1, 0.01, 0.001, 0.9, 0.0003, 32, 16),
    "mitr": (0.01, 0.001, 0.01, 0.1, 0.05, 0.01, 0.6, 0.0003, 64, 32),
    "youtube": (0.003, 0.5, 0.1, 0.2, 0.5, 0.003, 0.6, 0.0003, 32, 16),
    "sms": (0.1, 0.1, 0.001, 0.3, 0.5, 0.1, 0.6, 0.0001, 32, 16),
    "census": (0.5, 0.1, 0.001, 0.1, 0.01, 0.5, 0.1, 0.0003, 64, 16),
}
_HIDDEN = {"question": (512, 512), "mitr": (512, 512), "sms": (512, 512), "census": (256, 256), "youtube": ()}


def _build_presets():
    out = {}
    for name, (nt, _snt, pr, imp, _lsn, lmaj, q_nt, lr, bs, bs_l) in _PUBLISHED.items():
        base = dict(learning_rate=lr, batch_size=bs, hidden=_HIDDEN[name])
        if name == "youtube":
            base["rule_hidden"] = (32,)
        out[f"{name}-only_l"] = dict(base, method="only_l", batch_size=bs_l)
        out[f"{name}-l_u_maj"] = dict(base, method="l_u_maj", gamma=lmaj)
        out[f"{name}-noise_tolerant"] = dict(base, method="noise_tolerant", gamma=nt, q=q_nt)
        out[f"{name}-implyloss"] = dict(base, method="implyloss", gamma=imp)
        out[f"{name}-posterior_reg"] = dict(base, method="posterior_reg", gamma=pr)
        if name == "census":
            out[f"{name}-noise_tolerant"]["learning_rate"] = 0.0001
    for name in ("sms",):
        for k in list(out):
            if k.startswith(name):
                out[k]["metric"] = "f1_binary"
    out["mitr-only_l"]["metric"] = "f1_macro"
    for k in ("mitr-l_u_maj", "mitr-noise_tolerant", "mitr-implyloss", "mitr-posterior_reg"):
        out[k]["metric"] = "f1_macro"
    return out


PRESETS = _build_presets()


def preset(name, **overrides):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


def config_keys():
    return [f.name for f in fields(TrainConfig)]


# -- optimizer -----------------------------------------------------------------


def adam_step(value, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; ``state`` is a dict with m, v, t (mutated)."""
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    m = beta1 * state.get("m", 0.0) + (1 - beta1) * grad
    v = beta2 * state.get("v", 0.0) + (1 - beta2) * grad * grad
    state["m"], state["v"] = m, v
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr
        self.states = [{} for _ in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, st in zip(self.params, self.states):
            p.set_values(adam_step(p.values, p.grad, st, self.lr))


# -- metrics (P_theta only; joint inference lives in evalkit) --------------------


def score(pred, gold, kind="accuracy", positive_class=1):
    from .evalkit import metrics

    return metrics(pred, gold, kind, positive_class)


# -- training ---------------------------------------------------------------------


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = 0.0
    batch_losses: list = field(default_factory=list)

    @property
    def best_metric(self):
        return self.val_metric[self.best_epoch] if self.best_epoch >= 0 else float("nan")


@dataclass
class TrainingData:
    """Precomputed arrays shared by every seed of one run."""

    x: np.ndarray
    labels: np.ndarray
    exemplars: np.ndarray
    l_idx: np.ndarray
    u_idx: np.ndarray
    valid_idx: np.ndarray
    coverage: object
    rule_labels: np.ndarray
    u_majority: np.ndarray
    n_classes: int


def prepare(dataset, rules, coverage, config):
    rl = rule_labels(rules) if rules else np.zeros(0, dtype=np.intp)
    if rules and coverage is None:
        raise ValueError("rules given without a coverage matrix")
    if rules:
        from .rulekit import validate_exemplars

        report = validate_exemplars(dataset.exemplar_links(), coverage, dataset.labels, rl)
        if report:
            raise ValueError(f"{len(report)} invalid exemplar links, first: {report[0]}")
    l_idx, u_idx, v_idx = dataset.idx("L"), dataset.idx("U"), dataset.idx("valid")
    if len(v_idx) == 0:
        raise ValueError("training needs a non-empty validation split")
    if len(l_idx) == 0:
        raise ValueError("training needs labeled (L) instances")
    if rules:
        u_maj = majority_labels(coverage, rl, u_idx, config.default_class)
    else:
        u_maj = np.full(len(u_idx), -1, dtype=np.intp)
    return TrainingData(dataset.features, dataset.labels, dataset.exemplars, l_idx, u_idx, v_idx, coverage, rl,
                        u_maj, int(dataset.n_classes))


def _empty_pairs():
    return np.zeros((0, 2), dtype=np.intp)


def make_batch(data, l_rows, u_rows, u_pos):
    """Batch over dataset rows ``l_rows``/``u_rows``; ``u_pos`` indexes ``data.u_majority``."""
    cov = data.coverage
    return losses.BatchBundle(
        x_l=data.x[l_rows],
        y_l=data.labels[l_rows],
        e_l=data.exemplars[l_rows],
        x_u=data.x[u_rows],
        l_pairs=cov.restrict(l_rows) if cov is not None else _empty_pairs(),
        u_pairs=cov.restrict(u_rows) if cov is not None else _empty_pairs(),
        rule_labels=data.rule_labels,
        u_majority=data.u_majority[u_pos],
        l_index=l_rows,
        u_index=u_rows,
    )


def epoch_batches(data, config, rng, use_u):
    """Shuffled batches for one epoch.

    Only-L iterates over L alone.  Otherwise each batch mixes L and U rows in
    proportion to the split sizes; there are ceil((|L|+|U|)/batch_size) batches.
    """
    l_perm = rng.permutation(len(data.l_idx))
    if not use_u:
        n_b = int(np.ceil(len(l_perm) / config.batch_size))
        for chunk in np.array_split(l_perm, n_b):
            yield data.l_idx[chunk], np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
        return
    u_perm = rng.permutation(len(data.u_idx))
    n_b = int(np.ceil((len(l_perm) + len(u_perm)) / config.batch_size))
    for lc, uc in zip(np.array_split(l_perm, n_b), np.array_split(u_perm, n_b)):
        yield data.l_idx[lc], data.u_idx[uc], uc


def build_model(data, config, seed, with_rules):
    d, k, m = data.x.shape[1], data.n_classes, len(data.rule_labels)
    rw = None
    if with_rules:
        rh = config.hidden if config.rule_hidden is None else config.rule_hidden
        rw = rule_widths(d, m, rh)
    params = init_params(seed, classifier_widths(d, k, config.hidden), rw, config.keep_prob,
                         config.keep_prob if config.rule_dropout else 1.0)
    return params


def batch_objective(params, batch, config, rng, train=True):
    """Forward pass plus the method's loss for one batch."""
    method = config.method
    if method == "only_l":
        fwd = losses.forward(params, batch, train, rng, use_u=False, use_rules=False)
        return losses.ll_theta(fwd, batch), fwd
    if method in ("l_u_maj", "noise_tolerant"):
        fwd = losses.forward(params, batch, train, rng, use_u=True, use_rules=False)
        if method == "l_u_maj":
            return losses.lumaj_objective(fwd, batch, config.gamma), fwd
        return losses.noise_tolerant_objective(fwd, batch, config.gamma, config.q, gce_form=config.gce_form), fwd
    fwd = losses.forward(params, batch, train, rng, use_u=True, use_rules=True)
    if method == "implyloss":
        return losses.imply_objective(fwd, batch, config.gamma, config.q, config.gce_form, config.exemplar_term), fwd
    from . import prreg

    qy, qr = prreg.batch_q(fwd, batch, config.lam)
    return prreg.pr_update_objective(fwd, batch, qy, qr, config.pr_gamma, config.q, config.gce_form,
                                     config.exemplar_term), fwd


def validation_score(params, data, config, rules_coverage=None):
    from .evalkit import predict

    pred = predict(params, data.x[data.valid_idx], data.valid_idx, data.coverage, data.rule_labels,
                   joint=config.joint_validation and params.rules is not None)
    return score(pred, data.labels[data.valid_idx], config.metric, config.positive_class)


def train(dataset, rules, coverage, config, seed=0, data=None, record_batches=False):
    """Train one model; returns ``(best params, history)``.

    Rule-based methods with an empty rule set degenerate to Only-L.
    """
    config.validate()
    data = prepare(dataset, rules, coverage, config) if data is None else data
    method = config.method
    if method != "only_l" and len(data.rule_labels) == 0:
        logger.info("no rules: %s degenerates to only_l", method)
        config = config.updated(method="only_l")
        method = "only_l"
    with_rules = method in RULE_NET_METHODS
    use_u = method != "only_l"
    params = build_model(data, config, seed, with_rules)
    opt = Adam(params.parameters, config.learning_rate)
    ss = np.random.SeedSequence([seed, 1])
    batch_rng, drop_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    hist = TrainHistory()
    best = params.snapshot()
    best_metric = -np.inf
    since_best = 0
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        total = 0.0
        for b, (l_rows, u_rows, u_pos) in enumerate(epoch_batches(data, config, batch_rng, use_u)):
            batch = make_batch(data, l_rows, u_rows, u_pos)
            try:
                loss, _ = batch_objective(params, batch, config, drop_rng, train=True)
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError("non-finite loss")
                opt.zero_grad()
                if loss._backward is not None:
                    dm.backward(loss)
                    opt.step()
            except FloatingPointError as exc:
                raise TrainingError(f"{method} seed {seed}: {exc} at epoch {epoch}, batch {b}") from exc
            total += value
            if record_batches:
                hist.batch_losses.append(value)
        metric = validation_score(params, data, config)
        hist.train_loss.append(total)
        hist.val_metric.append(metric)
        logger.info("method %s seed %d epoch %d loss %.6f val %.4f", method, seed, epoch, total, metric)
        if metric > best_metric:
            best_metric, best, since_best = metric, params.snapshot(), 0
            hist.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    params.restore(best)
    params.meta = {"method": method, "seed": seed}
    hist.wall_time = time.perf_counter() - t0
    return params, hist


# -- replication ---------------------------------------------------------------------


def mean_std(values):
    """Mean and population standard deviation; a single value gets std 0."""
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) == 0:
        raise ValueError("no values")
    if len(vals) == 1:
        logger.warning("single seed: standard deviation reported as 0")
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std())


@dataclass
class SeedResult:
    seed: int
    metrics: dict
    history: TrainHistory
    params: object = None


def replicate(dataset, rules, coverage, config, evaluate=None, keep_params=False, jobs=1):
    """Train once per seed in ``config.seeds`` and summarize.

    ``evaluate(params, config) -> dict`` supplies the per-seed metrics (defaults to
    the test-split metric with joint inference for rule-net methods).  Returns
    ``(per-seed results, {metric: (mean, std)})``.
    """
    from .evalkit import evaluate_split

    if len(config.seeds) < 2:
        logger.warning("replicate called with %d seed(s)", len(config.seeds))
    data = prepare(dataset, rules, coverage, config)
    if evaluate is None:
        def evaluate(params, cfg):
            return {cfg.metric: evaluate_split(params, dataset, coverage, rules, cfg, "test")}

    def one(seed):
        params, hist = train(dataset, rules, coverage, config, seed, data=data)
        return SeedResult(seed, evaluate(params, config), hist, params if keep_params else None)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, config.seeds))
    else:
        results = [one(s) for s in config.seeds]
    summary = {}
    for key in results[0].metrics:
        summary[key] = mean_std([r.metrics[key] for r in results])
    return results, summary
