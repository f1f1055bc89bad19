"""
Oversampling inside each group
==============================

Plain SMOTE interpolates between any two minority rows, so a synthetic row can
sit halfway between two demographic groups. The group-aware variant runs SMOTE
separately per group: every synthetic row stays on a segment between two
minority rows of its own group, and each group reaches the target ratio.
"""
# %%
import warnings

import numpy as np

from groupthresh.data import Dataset
from groupthresh.resample import SmoteConfig, minority_counts, smote_group_aware

rng = np.random.default_rng(1)
n = 400
groups = (rng.random(n) < 0.25).astype(int)
labels = (rng.random(n) < np.where(groups == 0, 0.2, 0.08)).astype(int)
X = rng.normal(size=(n, 2)) + 3.0 * groups[:, None]  # groups occupy separate regions
ds = Dataset(X, labels, groups, np.arange(n), group_names=("a", "b"))

# %%
# Class counts per group before resampling.

for name, (_, n_min, n_maj) in zip(ds.group_names, minority_counts(ds)):
    print(f"group {name}: {n_min} minority / {n_maj} majority")

# %%
# Resample to a 1:1 ratio within each group.

with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # k is capped for groups with few minority rows
    out = smote_group_aware(ds, SmoteConfig(k_neighbors=5, target_ratio=1.0, seed=0))

syn = out.synthetic
print(f"\n{int(syn.sum())} synthetic rows added")
for name, (_, n_min, n_maj) in zip(out.group_names, minority_counts(out)):
    print(f"group {name}: {n_min} minority / {n_maj} majority")

# %%
# Synthetic rows of group b stay inside group b's region: their centroid
# sits near the group's minority originals, not between the two groups.

for g in (0, 1):
    orig = X[(groups == g) & (labels == 1)].mean(axis=0)
    new = out.features[syn & (out.groups == g)].mean(axis=0)
    print(f"group {ds.group_names[g]}: minority centroid {orig.round(2)}, synthetic centroid {new.round(2)}")
