"""
Denoising over-generalized rules on a planted 2-D task
=======================================================

Four box rules are centered on labeled exemplars and then stretched until they
cross the true decision boundary.  We train a plain classifier on the 40
labeled points, then train the coupled classifier + rule network, and look at
how many wrong rule firings the rule network learned to switch off.

Run:  python3 demos/synthetic_denoising.py   (about a minute on one CPU)
"""

import numpy as np

from implyloss.dataio import SyntheticConfig, gen_synthetic_2d
from implyloss.evalkit import denoise_diagnostics, evaluate_split, joint_infer
from implyloss.rulekit import STATS_HEADER, coverage_stats, rule_labels
from implyloss.trainers import TrainConfig, mean_std, train

# the default task: |L|=40, |U|=2000, 4 rules, boxes scaled by beta=2
ds, rules, cov, truth = gen_synthetic_2d(SyntheticConfig(), seed=0)
print(f"{ds.n} points, splits:", {s: len(ds.idx(s)) for s in ("L", "U", "valid", "test")})

# each rule is a conjunction of interval clauses on x0 and x1
for r in rules:
    print(f"rule {r.id} -> class {r.label}:", " and ".join(f"{c.feature} {c.op} {c.value:+.2f}" for c in r.clauses))

# coverage statistics on U; precision uses the planted labels
st = coverage_stats(cov, rule_labels(rules), ds.idx("U"), ds.labels)
print("\n" + "  ".join(STATS_HEADER))
print("  ".join(st.table_row()))
print(f"planted correct firings: {len(truth.true_cover)} of {len(cov)}")

# %%
# Same network and optimizer for both methods; only the objective differs.
base = dict(hidden=(32, 32), learning_rate=0.01, max_epochs=100, patience=30)
only_l = TrainConfig(method="only_l", **base)
imply = TrainConfig(method="implyloss", gamma=0.003, **base)

acc_l, acc_i, reports = [], [], []
for seed in range(3):
    p, _ = train(ds, rules, cov, only_l, seed)
    acc_l.append(evaluate_split(p, ds, cov, rules, only_l))
    p, hist = train(ds, rules, cov, imply, seed)
    acc_i.append(evaluate_split(p, ds, cov, rules, imply))
    reports.append(denoise_diagnostics(p, cov, ds, rules, split="U"))
    print(f"seed {seed}: best epoch {hist.best_epoch}, only_l {acc_l[-1]:.3f}, implyloss {acc_i[-1]:.3f}")

for name, acc in (("Only-L", acc_l), ("ImplyLoss", acc_i)):
    m, s = mean_std(acc)
    print(f"{name:10s} test accuracy {100 * m:.1f} +- {100 * s:.1f}")

# %%
# Per-rule view of the last model: precision of all firings on U versus the
# firings the rule network keeps (P(r=1|x) > 0.5).
rep = reports[-1]
print("\nrule  orig   kept   suppressed")
for r in rep.rules:
    print(f"{r.rule_id:4d}  {100 * r.orig_precision:5.1f}  {100 * r.denoised_precision:5.1f}  {100 * r.suppressed_frac:5.1f}%")
print(f" all  {100 * rep.orig_precision:5.1f}  {100 * rep.denoised_precision:5.1f}  {100 * rep.suppressed_frac:5.1f}%")

# %%
# Joint inference on a single test point: classifier probabilities plus the
# average vote of the rules that the rule network still trusts there.
test = ds.idx("test")
local = cov.restrict(test)
res = joint_infer(p, ds.features[test], local, rule_labels(rules))
row = int(local[0, 0])
print(f"\ntest point {ds.features[test][row].round(2)}: P_theta {res.p_theta[row].round(3)}, "
      f"active rules {res.active_rules(row).tolist()}, scores {res.scores[row].round(3)}, "
      f"gold {ds.labels[test][row]}")
