"""
Per-group thresholds versus one shared cutoff
=============================================

Two groups share a score model but not a base rate. One cutoff has to
compromise between them; a cutoff per group does not.
"""
# %%
# Synthetic scores. Group 1 has fewer positives and its scores run lower,
# which is what a model trained mostly on group 0 tends to produce.

import numpy as np

from groupthresh.calibrate import ScoredPredictions, apply_thresholds, optimize, pareto_frontier
from groupthresh.metrics import evaluate

rng = np.random.default_rng(0)
n = 2000
groups = (rng.random(n) < 0.3).astype(int)
base_rate = np.where(groups == 0, 0.35, 0.12)
labels = (rng.random(n) < base_rate).astype(int)
shift = np.where(groups == 0, 0.0, -0.15)
scores = np.clip(0.35 + 0.3 * labels + shift + rng.normal(0, 0.15, n), 0, 1)
sp = ScoredPredictions(scores, labels, groups, ("majority", "minority"))

# %%
# The default 0.5 cutoff, the best single cutoff, and the two group-aware
# objectives. BA is balanced accuracy; WG-BA is the worst group's BA.

print(f"{'method':<16}{'BA':>8}{'WG-BA':>8}   thresholds")
ba, wg = evaluate(labels, apply_thresholds(sp, {0: 0.5, 1: 0.5}), groups)
print(f"{'cutoff 0.5':<16}{ba:8.3f}{wg:8.3f}   0.500 / 0.500")
for objective in ("single", "fair_balacc", "fair_minbalacc"):
    t = optimize(sp, objective)
    print(f"{objective:<16}{t.ba:8.3f}{t.wg_ba:8.3f}   {t.tau[0]:.3f} / {t.tau[1]:.3f}")

# %%
# The whole trade-off. Each frontier point is a threshold pair that no other
# pair beats on both BA and WG-BA. The two ends are the fair_balacc and
# fair_minbalacc solutions above.

front = pareto_frontier(sp)
print(f"\n{len(front)} frontier points")
for p in front[:: max(1, len(front) // 8)]:
    print(f"  BA {p.ba:.3f}  WG-BA {p.wg_ba:.3f}  tau {p.tau[0]:.3f} / {p.tau[1]:.3f}")
