"""Command-line entry point: stats, train, eval, diagnose, sweep, synth-gen, validate.

Every verb that produces files writes into a fresh output directory.  The
directory is assembled under a temporary name and renamed into place, and an
existing directory is only replaced with ``--force``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
from dataclasses import asdict, fields

import numpy as np
import scipy

from . import __version__
from .dataio import FormatError, SyntheticConfig, gen_synthetic_2d, load_dataset, save_dataset
from .evalkit import (
    denoise_diagnostics,
    predict,
    metrics,
    sweep,
    write_diagnostics_csv,
    write_results_csv,
    write_sweep_csv,
)
from .nets import load_checkpoint, save_checkpoint
from .rulekit import STATS_HEADER, RuleError, apply_rules, coverage_stats, rule_labels, validate_exemplars
from .trainers import PRESETS, TrainConfig, TrainingError, replicate

logger = logging.getLogger("implyloss")

EXIT_CONFIG = 2
EXIT_VALIDATION = 3

# flag name -> TrainConfig field
_FLAG_FIELDS = {
    "method": "method",
    "gamma": "gamma",
    "q": "q",
    "lam": "lam",
    "alpha": "alpha",
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "epochs": "max_epochs",
    "patience": "patience",
    "metric": "metric",
    "gce_form": "gce_form",
    "hidden": "hidden",
}


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


class CliError(RuntimeError):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


# -- config resolution ---------------------------------------------------------------


def _field_types():
    return {f.name: f for f in fields(TrainConfig)}


def _parse_int_list(text):
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi)))
    return [int(t) for t in text.replace(",", " ").split()]


def coerce_value(key, raw):
    """Convert a config value (string or JSON value) to the type of TrainConfig field ``key``."""
    known = _field_types()
    if key not in known:
        raise ConfigError(key, "unknown key")
    default = known[key].default
    try:
        if isinstance(raw, str):
            raw = raw.strip()
        if key in ("seeds", "hidden", "rule_hidden"):
            if raw is None or (key == "rule_hidden" and raw in ("", "none", "None")):
                return None if key == "rule_hidden" else ()
            if isinstance(raw, str):
                return tuple(_parse_int_list(raw))
            return tuple(int(v) for v in raw)
        if key in ("alpha", "default_class"):
            if raw is None or raw in ("", "none", "None"):
                return None
            return float(raw) if key == "alpha" else int(raw)
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def read_config_file(path):
    """``key = value`` lines (``#`` comments) or a JSON object; a manifest's ``config`` block is accepted."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<json>", f"{path}: {exc}") from None
        if "config" in obj and isinstance(obj["config"], dict):
            obj = obj["config"]
        return {k: coerce_value(k, v) for k, v in obj.items()}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line.split()[0], f"{path}:{lineno}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key] = coerce_value(key, value)
    return out


def resolve_config(args):
    """Preset, then config file, then individual flags; later sources win."""
    values = {}
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {args.preset!r}")
        values.update(PRESETS[args.preset])
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for flag, key in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = coerce_value(key, v)
    if getattr(args, "seeds", None) is not None:
        values["seeds"] = coerce_value("seeds", args.seeds)
    if getattr(args, "no_exemplar_term", False):
        values["exemplar_term"] = False
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        bad = next((k for k in values if k in str(exc)), "config")
        raise ConfigError(bad, str(exc)) from None


# -- output directories ------------------------------------------------------------------


class OutputDir:
    """Build output in a temp sibling directory, then rename it into place on success."""

    def __init__(self, path, force=False):
        self.path = os.path.abspath(path)
        if os.path.exists(self.path) and not force:
            raise CliError(f"output {path} exists; use --force to replace it")
        self.force = force
        parent = os.path.dirname(self.path)
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".tmp-" + os.path.basename(self.path) + "-", dir=parent)

    def file(self, name):
        return os.path.join(self.tmp, name)

    def commit(self):
        if os.path.exists(self.path):
            shutil.rmtree(self.path)
        os.rename(self.tmp, self.path)

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.commit()
        else:
            self.abort()
        return False


def versions():
    return {
        "implyloss": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def write_manifest(path, verb, argv, config=None, extra=None):
    man = {"verb": verb, "argv": list(argv), "versions": versions()}
    if config is not None:
        man["config"] = config.to_dict()
        man["seeds"] = list(config.seeds)
    if extra:
        man.update(extra)
    with open(path, "w") as f:
        json.dump(man, f, indent=2, sort_keys=True, default=list)
        f.write("\n")


def _load(data_dir):
    try:
        ds, rules, cov = load_dataset(data_dir)
    except FileNotFoundError as exc:
        raise CliError(f"missing input file: {exc.filename}") from None
    if rules is None:
        raise CliError(f"{data_dir} has no rules.json")
    if cov is None:
        cov = apply_rules(rules, ds)
    return ds, rules, cov


class _LogTo:
    """Attach a line-oriented file handler to the package logger for the duration of a run."""

    def __init__(self, path):
        self.handler = logging.FileHandler(path)
        self.handler.setFormatter(logging.Formatter("%(message)s"))

    def __enter__(self):
        logger.addHandler(self.handler)
        self.level = logger.level
        logger.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        logger.removeHandler(self.handler)
        logger.setLevel(self.level)
        self.handler.close()
        return False


# -- verbs ---------------------------------------------------------------------------


def cmd_stats(args):
    ds, rules, cov = _load(args.data)
    rl = rule_labels(rules)
    rows = ds.idx(*args.split) if args.split else np.arange(ds.n)
    gold = np.where(ds.labels >= 0, ds.labels, -1)
    st = coverage_stats(cov, rl, rows, gold)
    print("\t".join(STATS_HEADER))
    print("\t".join(st.table_row()))
    return 0


def cmd_synth_gen(args):
    cfg = SyntheticConfig()
    overrides = {}
    if args.config:
        overrides.update(_read_synth_config(args.config))
    for key in ("n_l", "n_u", "n_rules", "beta"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    cfg = SyntheticConfig(**{**asdict(cfg), **overrides})
    try:
        ds, rules, cov, truth = gen_synthetic_2d(cfg, args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    with OutputDir(args.out, args.force) as out:
        save_dataset(out.tmp, ds, rules, cov)
        with open(out.file("true_coverage.txt"), "w") as f:
            for i, j in truth.true_cover.pairs:
                f.write(f"{i} {j}\n")
        write_manifest(out.file("manifest.json"), "synth-gen", args.argv,
                       extra={"seed": args.seed, "synthetic": asdict(cfg)})
    print(f"wrote {ds.n} instances and {len(rules)} rules to {args.out}")
    return 0


def _read_synth_config(path):
    known = {f.name: f.default for f in fields(SyntheticConfig)}
    out = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (t.strip() for t in line.partition("="))
            if key not in known:
                raise ConfigError(key, "unknown synthetic key")
            default = known[key]
            try:
                if isinstance(default, tuple):
                    out[key] = tuple(float(v) for v in value.replace(",", " ").split())
                elif isinstance(default, int):
                    out[key] = int(value)
                elif isinstance(default, float):
                    out[key] = float(value)
                else:
                    out[key] = value
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
    return out


def cmd_train(args):
    config = resolve_config(args)
    ds, rules, cov = _load(args.data)
    with OutputDir(args.out, args.force) as out:
        write_manifest(out.file("manifest.json"), "train", args.argv, config, {"data": os.path.abspath(args.data)})
        with _LogTo(out.file("train.log")):
            results, summary = replicate(ds, rules, cov, config, keep_params=True, jobs=args.jobs)
        rows = []
        for r in results:
            for metric, value in r.metrics.items():
                rows.append((config.method, r.seed, metric, value))
            save_checkpoint(out.file(f"seed{r.seed}.ckpt"), r.params)
        write_results_csv(out.file("results.csv"), rows)
    for metric, (mean, std) in summary.items():
        print(f"{config.method} {metric} mean {mean:.4f} std {std:.4f} over {len(results)} seeds")
    return 0


def cmd_eval(args):
    ds, rules, cov = _load(args.data)
    params = load_checkpoint(args.checkpoint)
    rows = ds.idx(args.split)
    if len(rows) == 0:
        raise CliError(f"split {args.split} is empty")
    joint = not args.no_joint
    pred = predict(params, ds.features[rows], rows, cov, rule_labels(rules), joint=joint)
    value = metrics(pred, ds.labels[rows], args.metric, args.positive_class)
    print(f"{args.metric} {value:.4f} on {args.split} ({'joint' if joint and params.rules is not None else 'classifier'})")
    return 0


def cmd_diagnose(args):
    ds, rules, cov = _load(args.data)
    params = load_checkpoint(args.checkpoint)
    if params.rules is None:
        raise CliError("checkpoint has no rule network")
    rep = denoise_diagnostics(params, cov, ds, rules, split=args.split)
    with OutputDir(args.out, args.force) as out:
        write_diagnostics_csv(out.file("diagnostics.csv"), rep)
        write_manifest(out.file("manifest.json"), "diagnose", args.argv)
    print(f"precision {rep.orig_precision:.4f} -> {rep.denoised_precision:.4f}, "
          f"suppressed {100 * rep.suppressed_frac:.1f}% of {rep.firings} firings")
    return 0


def cmd_sweep(args):
    config = resolve_config(args)
    ds, rules, cov = _load(args.data)
    grid = [float(g) if args.experiment == "rule_precision" else int(g) for g in args.grid.split(",")]
    with OutputDir(args.out, args.force) as out:
        write_manifest(out.file("manifest.json"), "sweep", args.argv, config,
                       {"data": os.path.abspath(args.data), "experiment": args.experiment, "grid": grid})
        with _LogTo(out.file("train.log")):
            rows = sweep(args.experiment, grid, ds, rules, cov, config, jobs=args.jobs)
        write_sweep_csv(out.file("sweep.csv"), rows)
    for exp, g, method, metric, mean, std in rows:
        print(f"{exp} {g} {method} {metric} {mean:.4f} +- {std:.4f}")
    return 0


def cmd_validate(args):
    ds, rules, cov = _load(args.data)
    issues = validate_exemplars(ds.exemplar_links(), cov, ds.labels, rule_labels(rules))
    if not issues:
        print(f"ok: {len(ds.exemplar_links())} exemplar links")
        return 0
    report = args.report or os.path.join(args.data, "validation_report.txt")
    with open(report, "w") as f:
        for it in issues:
            f.write(f"instance {it.instance} rule {it.rule}: {it.problem}\n")
    raise CliError(f"{len(issues)} exemplar problem(s); report at {report}", EXIT_VALIDATION)


# -- parser ----------------------------------------------------------------------------


def _train_flags(p):
    p.add_argument("--config", help="key = value file, JSON object or manifest.json")
    p.add_argument("--preset", help=f"hyperparameter preset, e.g. question-implyloss ({len(PRESETS)} available)")
    p.add_argument("--method")
    p.add_argument("--gamma")
    p.add_argument("--q")
    p.add_argument("--lambda", dest="lam")
    p.add_argument("--alpha")
    p.add_argument("--lr")
    p.add_argument("--batch-size")
    p.add_argument("--epochs")
    p.add_argument("--patience")
    p.add_argument("--seeds", help="seed list '0,1,2' or half-open range '0..10'")
    p.add_argument("--metric")
    p.add_argument("--gce-form")
    p.add_argument("--hidden", help="hidden layer sizes, e.g. '512,512'")
    p.add_argument("--no-exemplar-term", action="store_true", help="drop the exemplar term of the coverage likelihood")
    p.add_argument("--jobs", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="implyloss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"implyloss {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("stats", help="rule coverage statistics")
    p.add_argument("data")
    p.add_argument("--split", nargs="*", help="restrict to these splits (default: all instances)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth-gen", help="generate the planted 2-D task")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value file of synthetic settings")
    p.add_argument("--n-l", type=int)
    p.add_argument("--n-u", type=int)
    p.add_argument("--n-rules", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train one method over all seeds")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--metric", default="accuracy")
    p.add_argument("--positive-class", type=int, default=1)
    p.add_argument("--no-joint", action="store_true", help="classifier only, no rule votes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="rule precision before and after denoising")
    p.add_argument("data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", help="labeled-size or rule-precision sweep")
    p.add_argument("data")
    p.add_argument("--experiment", required=True, choices=("labeled_size", "rule_precision"))
    p.add_argument("--grid", required=True, help="comma-separated grid values")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="check exemplar links against coverage and labels")
    p.add_argument("data")
    p.add_argument("--report", help="where to write the problem report")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FormatError, RuleError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
