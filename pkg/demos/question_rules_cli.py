"""
From regex rules on questions to a trained model, through the command line
==========================================================================

A toy question-type corpus with three classes.  Regex and word-list rules
label it; some rules are too broad.  The script writes the dataset in the
on-disk format, then drives the ``implyloss`` CLI: stats, validate, train,
eval and diagnose.  The same commands work from a shell.

Run:  python3 demos/question_rules_cli.py
"""

import os
import sys
import tempfile

import numpy as np

from implyloss import cli
from implyloss.dataio import Dataset, featurize_bow, save_dataset
from implyloss.rulekit import Rule, apply_rules

rng = np.random.default_rng(0)
things = ["people", "books", "rivers", "moons", "players", "cities"]
places = ["france", "the city", "the country", "texas", "the museum"]
names = ["hamlet", "the telephone", "penicillin", "the opera", "radium"]
templates = [
    (0, lambda: f"how many {rng.choice(things)} are in {rng.choice(places)}"),
    (0, lambda: f"how many {rng.choice(things)} did they count"),
    (1, lambda: f"who wrote {rng.choice(names)}"),
    (1, lambda: f"who discovered {rng.choice(names)} in {rng.choice(places)}"),
    (2, lambda: f"where is {rng.choice(places)}"),
    (2, lambda: f"what city is {rng.choice(names)} from"),
]
labels, texts = [], []
for _ in range(600):
    y, make = templates[rng.integers(len(templates))]
    labels.append(y)
    texts.append(make())
labels = np.array(labels)
split = np.array(["L"] * 30 + ["U"] * 370 + ["valid"] * 100 + ["test"] * 100, dtype=object)

# bag of uni- and bi-grams, vocabulary from L and U only
train_rows = np.flatnonzero(np.isin(split, ["L", "U"]))
_, vocab = featurize_bow([texts[i] for i in train_rows], vocab_size=200)
x = vocab.transform(texts)

# rule 2 also fires on "how many ... in the city" questions: over-generalized
rules = [
    Rule(0, 0, "regex", pattern=r"^how many"),
    Rule(1, 1, "wordlist", words=("who",)),
    Rule(2, 2, "regex", pattern=r"\b(where|city)\b"),
]
ds = Dataset(x, split, labels, texts=texts, n_classes=3)
cov = apply_rules(rules, ds)

# link one correctly covered L instance to each rule as its exemplar
links = []
for r in rules:
    i = next(i for i, j in cov.pairs if j == r.id and split[i] == "L" and labels[i] == r.label)
    links.append((int(i), r.id))
ds.with_exemplars(links)

work = tempfile.mkdtemp(prefix="implyloss-demo-")
data = os.path.join(work, "questions")
save_dataset(data, ds, rules, cov)
print("dataset written to", data, "->", sorted(os.listdir(data)))


def run(*argv):
    print("\n$ implyloss", " ".join(argv), flush=True)
    code = cli.main(list(argv))
    sys.stdout.flush()
    if code:
        print("exit code", code)
    return code


# %%
run("stats", data, "--split", "U")
run("validate", data)
train_flags = ["--method", "implyloss", "--gamma", "0.01", "--hidden", "32", "--lr", "0.01",
               "--epochs", "30", "--patience", "10", "--seeds", "0..3"]
run("train", data, "--out", os.path.join(work, "imply"), *train_flags)
run("train", data, "--out", os.path.join(work, "only_l"), *train_flags[2:], "--method", "only_l")
ckpt = os.path.join(work, "imply", "seed0.ckpt")
run("eval", data, "--checkpoint", ckpt)
run("eval", data, "--checkpoint", ckpt, "--no-joint")
# On a corpus this easy the classifier is already right everywhere; how many of
# rule 2's wrong "city" firings get switched off depends on gamma and training length.
run("diagnose", data, "--checkpoint", ckpt, "--split", "U", "--out", os.path.join(work, "diag"))
with open(os.path.join(work, "diag", "diagnostics.csv")) as f:
    print(f.read())

# the manifest records the resolved config; re-running from it reproduces results.csv
run("train", data, "--out", os.path.join(work, "imply2"), "--config", os.path.join(work, "imply", "manifest.json"))
same = open(os.path.join(work, "imply", "results.csv"), "rb").read() == open(os.path.join(work, "imply2", "results.csv"), "rb").read()
print("results.csv identical on re-run:", same)

# an existing output directory is refused unless --force is given
run("train", data, "--out", os.path.join(work, "imply"), *train_flags)
