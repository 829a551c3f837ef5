"""
Posterior regularization next to the implication loss
=====================================================

The PR baseline projects the model onto a distribution Q that penalizes
"rule fires but label disagrees".  Q has closed-form marginals; here we check
them against brute-force enumeration of the joint, watch the violation mass
shrink as lambda grows, and then train both methods on the planted task.

Run:  python3 demos/posterior_regularization.py
"""

import numpy as np

from implyloss.dataio import SyntheticConfig, gen_synthetic_2d
from implyloss.evalkit import evaluate_split
from implyloss.prreg import oracle_marginals, pr_train, q_joint_oracle, q_marginal_r, q_marginal_y
from implyloss.trainers import TrainConfig, train

# two classes, one rule voting for class 0 with P(r=1|x) = 0.7
p_theta, p_rule, labels = [0.6, 0.4], [0.7], [0]
for lam in (0.0, 1.0, 5.0):
    table = q_joint_oracle(p_theta, p_rule, labels, lam)  # table[y, r]
    qy, qr = oracle_marginals(table)
    print(f"lambda {lam}: Q(y) {q_marginal_y(p_theta, p_rule, labels, lam).round(5)} "
          f"(oracle {qy.round(5)}), Q(r=1) {q_marginal_r(p_theta, p_rule, labels, lam, 0):.5f}, "
          f"violation mass Q(y=1, r=1) {table[1, 1]:.5f}")

# %%
# A larger random case: 3 classes, 5 rules.  Enumeration costs K * 2^m terms,
# the closed form is linear in m.
rng = np.random.default_rng(7)
pt, pr, lab = rng.dirichlet(np.ones(3)), rng.uniform(0.05, 0.95, 5), rng.integers(0, 3, 5)
qy, qr = oracle_marginals(q_joint_oracle(pt, pr, lab, 2.0))
gap = max(np.abs(q_marginal_y(pt, pr, lab, 2.0) - qy).max(),
          max(abs(q_marginal_r(pt, pr, lab, 2.0, j) - qr[j]) for j in range(5)))
print(f"\nrandom 3-class / 5-rule case: largest closed-form vs enumeration gap {gap:.1e}")

# %%
# Training.  PR alternates: compute Q on the batch, then one gradient step
# toward it.  Both methods share the network and optimizer settings.
ds, rules, cov, _ = gen_synthetic_2d(SyntheticConfig(), seed=0)
base = dict(hidden=(32, 32), learning_rate=0.01, max_epochs=100, patience=30)
runs = {
    "implyloss": lambda s: train(ds, rules, cov, TrainConfig(method="implyloss", gamma=0.003, **base), s),
    "posterior_reg": lambda s: pr_train(ds, rules, cov, TrainConfig(method="posterior_reg", gamma=0.003, lam=1.0, **base), s),
}
for name, run in runs.items():
    acc = []
    for seed in range(2):
        params, _ = run(seed)
        acc.append(evaluate_split(params, ds, cov, rules, TrainConfig(), "test"))
    print(f"{name:14s} test accuracy {100 * np.mean(acc):.1f} over {len(acc)} seeds")
