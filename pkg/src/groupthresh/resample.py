"""Group-aware SMOTE.

Each demographic group is oversampled on its own: synthetic rows interpolate
between a minority row of the group and one of its k nearest minority
neighbours from the same group, so no synthetic row mixes groups or classes.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset


class ResampleError(ValueError):
    pass


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    target_ratio: float = 1.0
    seed: int = 0
    skip_small_groups: bool = False

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ResampleError("k_neighbors must be at least 1")
        if not 0.0 < self.target_ratio <= 1.0:
            raise ResampleError("target_ratio must lie in (0, 1]")


def _knn_rows(X: np.ndarray, query: np.ndarray, k: int, exclude: np.ndarray) -> np.ndarray:
    """k nearest rows of ``X`` for each query row; ties go to the lower index.

    A matrix-product distance preselects candidates with a slack well above
    its rounding error; the final order uses exact squared distances.
    """
    n = X.shape[0]
    out = np.empty((query.shape[0], k), dtype=np.int64)
    sq = np.einsum("ij,ij->i", X, X)
    slack = 1e-9 * (1.0 + 4.0 * float(sq.max(initial=0.0)))
    step = max(1, 2_000_000 // max(n, 1))
    for start in range(0, query.shape[0], step):
        q = query[start:start + step]
        approx = sq[None, :] - 2.0 * (q @ X.T) + np.einsum("ij,ij->i", q, q)[:, None]
        rows = np.arange(q.shape[0])
        approx[rows, exclude[start:start + step]] = np.inf
        kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        for r in rows:
            cand = np.flatnonzero(approx[r] <= kth[r] + slack)
            d = ((X[cand] - q[r]) ** 2).sum(axis=1)
            out[start + r] = cand[np.lexsort((cand, d))[:k]]
    return out


def nearest_minority_neighbors(rows: np.ndarray, i: int, k: int) -> np.ndarray:
    """Indices of the k rows closest to row ``i`` (Euclidean), excluding ``i``."""
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    if n < 2:
        raise ResampleError("need at least two rows to find a neighbour")
    if k >= n:
        warnings.warn(f"k={k} capped at {n - 1} (only {n} rows)", stacklevel=2)
        k = n - 1
    return _knn_rows(rows, rows[i:i + 1], k, np.array([i]))[0]


def minority_counts(ds: Dataset) -> list[tuple[int, int, int]]:
    """Per group: (minority label, minority count, majority count)."""
    out = []
    for g in range(ds.n_groups):
        y = ds.labels[ds.groups == g]
        pos = int(y.sum())
        neg = int(y.size - pos)
        minority = 1 if pos <= neg else 0
        out.append((minority, min(pos, neg), max(pos, neg)))
    return out


def quota(n_minority: int, n_majority: int, target_ratio: float) -> int:
    # Rounding guards against ratios like 0.3 * 10 landing a hair above 3.
    want = math.ceil(round(target_ratio * n_majority, 9))
    return max(0, want - n_minority)


def smote_group_aware(ds: Dataset, cfg: SmoteConfig = SmoteConfig(), first_id: int | None = None) -> Dataset:
    """Append synthetic minority rows group by group; originals are untouched.

    Synthetic rows get ids ``first_id, first_id + 1, ...``. Pass the first id
    unused by the whole source dataset when ``ds`` is only one split of it.
    """
    next_id = int(ds.row_ids.max()) + 1 if first_id is None else int(first_id)
    if next_id <= int(ds.row_ids.max()):
        raise ResampleError(f"first_id {next_id} collides with existing row ids")
    feats, labels, groups = [], [], []
    for g, (minority, n_min, n_maj) in enumerate(minority_counts(ds)):
        need = quota(n_min, n_maj, cfg.target_ratio)
        if need == 0:
            continue
        members = np.flatnonzero((ds.groups == g) & (ds.labels == minority))
        if members.size < 2:
            msg = (f"group {ds.group_names[g]} has {members.size} minority row(s); "
                   "SMOTE needs at least 2")
            if cfg.skip_small_groups:
                warnings.warn(msg + "; group skipped", stacklevel=2)
                continue
            raise ResampleError(msg)
        X = ds.features[members]
        k = cfg.k_neighbors
        if k >= members.size:
            warnings.warn(f"group {ds.group_names[g]}: k={k} capped at {members.size - 1}", stacklevel=2)
            k = members.size - 1
        nn = _knn_rows(X, X, k, np.arange(members.size))
        rng = np.random.default_rng(cfg.seed ^ g)
        order = rng.permutation(members.size)
        base = order[np.arange(need) % members.size]
        pick = nn[base, rng.integers(0, k, size=need)]
        lam = rng.random(need)
        feats.append(X[base] + lam[:, None] * (X[pick] - X[base]))
        labels.append(np.full(need, minority, dtype=np.int8))
        groups.append(np.full(need, g, dtype=np.int64))
    if not feats:
        return ds
    n_new = sum(f.shape[0] for f in feats)
    synthetic = Dataset(
        np.vstack(feats), np.concatenate(labels), np.concatenate(groups),
        np.arange(next_id, next_id + n_new), ds.feature_names, ds.group_names,
        np.ones(n_new, bool))
    return ds.concat(synthetic)


def write_augmented_csv(path, ds: Dataset) -> None:
    """Dump features, label, group and a ``synthetic`` 0/1 column."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", *ds.feature_names, "label", "group", "synthetic"])
        for i in range(len(ds)):
            w.writerow([int(ds.row_ids[i]), *(repr(float(v)) for v in ds.features[i]),
                        int(ds.labels[i]), ds.group_names[ds.groups[i]], int(ds.synthetic[i])])
