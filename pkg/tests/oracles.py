"""Brute-force reference implementations used only by the tests.

Nothing here shares code with the optimized search in ``groupthresh``: the
candidate grids are rebuilt with plain Python, every threshold combination is
evaluated row by row, and dominance is checked pairwise.
"""
import itertools

import numpy as np

from groupthresh.metrics import ConfusionCounts, balanced_accuracy


def grid(scores):
    u = sorted(set(float(s) for s in scores))
    mids = []
    for a, b in zip(u, u[1:]):
        m = (a + b) / 2
        mids.append(b if m <= a else m)
    return [0.0] + mids + [1.0]


def _counts(labels, preds):
    tp = fp = tn = fn = 0
    for y, p in zip(labels, preds):
        if y and p:
            tp += 1
        elif y:
            fn += 1
        elif p:
            fp += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, tn, fn)


def score_tau(scores, labels, groups, tau):
    """(BA, WG-BA) of ``tau`` evaluated row by row."""
    preds = [1 if s >= tau[g] else 0 for s, g in zip(scores, groups)]
    overall = _counts(labels, preds)
    wg = min(
        balanced_accuracy(_counts([y for y, gg in zip(labels, groups) if gg == g],
                                  [p for p, gg in zip(preds, groups) if gg == g]))
        for g in sorted(set(groups)))
    return balanced_accuracy(overall), wg


def enumerate_product(scores, labels, groups):
    """Yield (tau tuple, ba, wg) over the full candidate product, groups sorted."""
    scores = [float(s) for s in scores]
    labels = [int(y) for y in labels]
    groups = [int(g) for g in groups]
    present = sorted(set(groups))
    grids = [grid([s for s, g in zip(scores, groups) if g == k]) for k in present]
    for combo in itertools.product(*grids):
        tau = dict(zip(present, combo))
        ba, wg = score_tau(scores, labels, groups, tau)
        yield combo, ba, wg


def best(scores, labels, groups, primary="ba"):
    rows = list(enumerate_product(scores, labels, groups))
    if primary == "ba":
        key = lambda r: (-r[1], -r[2], r[0])
    else:
        key = lambda r: (-r[2], -r[1], r[0])
    return min(rows, key=key)


def best_single(scores, labels, groups):
    rows = []
    for t in grid(scores):
        tau = {g: t for g in set(int(g) for g in groups)}
        ba, wg = score_tau(scores, labels, groups, tau)
        rows.append((t, ba, wg))
    return min(rows, key=lambda r: (-r[1], -r[2], r[0]))


def frontier(scores, labels, groups):
    """Non-dominated (ba, wg) pairs, each with its lexicographically smallest tau."""
    rows = list(enumerate_product(scores, labels, groups))
    pairs = {}
    for combo, ba, wg in rows:
        if (ba, wg) not in pairs or combo < pairs[(ba, wg)]:
            pairs[(ba, wg)] = combo
    out = []
    for (ba, wg), combo in pairs.items():
        dominated = any((b >= ba and w >= wg) and (b > ba or w > wg) for (b, w) in pairs)
        if not dominated:
            out.append((combo, ba, wg))
    return sorted(out, key=lambda r: -r[1])


def random_instance(rng, n_max=30, n_groups=2, levels=None):
    n = int(rng.integers(4, n_max + 1))
    while True:
        labels = rng.integers(0, 2, n)
        groups = rng.integers(0, n_groups, n)
        if 0 < labels.sum() < n and len(set(groups.tolist())) == n_groups:
            break
    if levels:
        scores = rng.integers(0, levels + 1, n) / levels
    else:
        scores = np.round(rng.random(n), 3)
    return scores, labels, groups
