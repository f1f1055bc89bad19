"""Small probabilistic classifiers: logistic, kNN, CART tree, random forest, GBDT.

Every model maps a feature matrix to scores in [0, 1]. Training is
deterministic given the spec's seed. Trees share one histogram builder whose
split gain is a^2/(b+lam) summed over children, which is Gini for a=sum(w*y),
b=sum(w), lam=0 and the Newton gain for a=sum(grad), b=sum(hess).
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("logistic", "knn", "tree", "forest", "gbdt")

DEFAULTS: dict[str, dict] = {
    "logistic": {"learning_rate": 0.1, "epochs": 500, "l2": 1e-4},
    "knn": {"k": 15, "weighting": "distance"},
    "tree": {"max_depth": 8, "min_leaf": 20, "max_bins": 255},
    "forest": {"n_trees": 100, "max_depth": 8, "min_leaf": 20, "max_bins": 255,
               "feature_subsample": "sqrt", "bootstrap": True, "seed": 0},
    "gbdt": {"n_rounds": 100, "learning_rate": 0.1, "max_depth": 3, "min_leaf": 20,
             "max_bins": 255, "l2": 1.0},
}

MAGIC = b"GROUPTHRESH-MODEL\n"
FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r} (expected one of {', '.join(KINDS)})")
        unknown = set(self.params) - set(DEFAULTS[self.kind]) - {"seed"}
        if unknown:
            raise ModelError(f"{self.kind}: unknown hyperparameter(s) {sorted(unknown)}")
        merged = {**DEFAULTS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        for key, val in merged.items():
            if isinstance(val, bool) or isinstance(val, str):
                continue
            if key == "seed":
                continue
            if not val > 0:
                raise ModelError(f"{self.kind}: {key} must be positive, got {val!r}")
        if self.kind == "knn" and merged["weighting"] not in ("distance", "uniform"):
            raise ModelError("knn: weighting must be 'distance' or 'uniform'")
        fs = merged.get("feature_subsample")
        if isinstance(fs, str) and fs != "sqrt":
            raise ModelError("forest: feature_subsample must be 'sqrt' or a fraction in (0, 1]")
        if isinstance(fs, float) and fs > 1:
            raise ModelError("forest: feature_subsample must be 'sqrt' or a fraction in (0, 1]")

    def with_seed(self, seed: int) -> "ModelSpec":
        return ModelSpec(self.kind, {**self.params, "seed": int(seed)})


# -- shared helpers --------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # exp of a non-positive argument never overflows
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def log_loss(y, z) -> float:
    """Mean binary log-loss from logits."""
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def _check_rows(X, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ModelError(f"expected {n_features} features per row, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ModelError("feature matrix contains NaN or infinite values")
    return X


def _check_training(kind: str, X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ModelError("features and labels disagree in length")
    if X.shape[0] < 2:
        raise ModelError(f"{kind}: need at least 2 training rows")
    if not np.isfinite(X).all():
        raise ModelError("feature matrix contains NaN or infinite values")
    if kind != "knn" and np.unique(y).size < 2:
        raise ModelError(f"{kind}: training data holds a single class")
    return X, y


# -- logistic regression ---------------------------------------------------

def logistic_loss_and_grad(theta, X, y, l2: float):
    """Regularized log-loss and its gradient; theta = (weights..., intercept).

    loss = mean log-loss + l2/2 * |w|^2, intercept unpenalized.
    """
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    r = sigmoid(z) - y
    loss = log_loss(y, z) + 0.5 * l2 * float(w @ w)
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ r / X.shape[0] + l2 * w
    grad[-1] = r.mean()
    return loss, grad


def _train_logistic(p, X, y):
    # Same gradient as logistic_loss_and_grad without the loss evaluation.
    Xt = np.ascontiguousarray(X.T)
    n, l2, lr = X.shape[0], float(p["l2"]), float(p["learning_rate"])
    w, b = np.zeros(X.shape[1]), 0.0
    for _ in range(int(p["epochs"])):
        r = sigmoid(X @ w + b) - y
        w = w - lr * (Xt @ r / n + l2 * w)
        b = b - lr * r.mean()
    return {"theta": np.append(w, b)}


def _predict_logistic(arrays, X):
    theta = arrays["theta"]
    return sigmoid(X @ theta[:-1] + theta[-1])


# -- k nearest neighbours --------------------------------------------------

def _predict_knn(p, arrays, X):
    train, labels = arrays["X"], arrays["y"]
    k = int(p["k"])
    n = train.shape[0]
    sq_train = np.einsum("ij,ij->i", train, train)
    out = np.empty(X.shape[0])
    step = max(1, 2_000_000 // max(n, 1))
    for s in range(0, X.shape[0], step):
        q = X[s:s + step]
        approx = sq_train[None, :] - 2.0 * (q @ train.T)
        if k < n:
            nbr = np.argpartition(approx, k - 1, axis=1)[:, :k]
        else:
            nbr = np.broadcast_to(np.arange(n), (q.shape[0], n))
        # exact distances on the chosen rows so duplicates sit at exactly zero
        d = np.sqrt(((train[nbr] - q[:, None, :]) ** 2).sum(axis=-1))
        y = labels[nbr]
        if p["weighting"] == "uniform":
            out[s:s + step] = y.mean(axis=1)
            continue
        exact = d == 0.0
        hit = exact.any(axis=1)
        with np.errstate(divide="ignore"):
            w = np.where(exact, 0.0, 1.0 / d)
        vote = (w * y).sum(axis=1) / w.sum(axis=1).clip(min=np.finfo(float).tiny)
        if hit.any():
            vote[hit] = (exact[hit] * y[hit]).sum(axis=1) / exact[hit].sum(axis=1)
        out[s:s + step] = vote
    return out


# -- trees -----------------------------------------------------------------

class _Binner:
    """Per-feature split points; row value x falls in bin searchsorted(edges, x)."""

    def __init__(self, X, max_bins: int):
        self.edges = []
        for j in range(X.shape[1]):
            u = np.unique(X[:, j])
            if u.size <= max_bins:
                e = (u[:-1] + u[1:]) / 2.0
            else:
                qs = np.quantile(X[:, j], np.linspace(0, 1, max_bins + 1)[1:-1])
                e = np.unique(qs)
            self.edges.append(e)

    def transform(self, X):
        return np.stack([np.searchsorted(e, X[:, j], side="left") for j, e in enumerate(self.edges)],
                        axis=1).astype(np.int32)


def _build_tree(B, edges, a, b, cnt, *, max_depth, min_leaf, lam, leaf_fn, n_feat_node, rng):
    """Grow one tree on binned features B. Returns node arrays."""
    n_features = B.shape[1]
    n_bins = np.array([e.size + 1 for e in edges])
    offsets = np.concatenate([[0], np.cumsum(n_bins)[:-1]])
    total_bins = int(n_bins.sum())
    full = n_feat_node >= n_features
    all_feats = np.arange(n_features)
    # with every feature a candidate, child histograms come from parent minus sibling
    flatB = B.astype(np.int64) + offsets if full else None
    unit_cnt = cnt is not b and bool(np.all(cnt == 1.0))
    feat, thr, left, right, value = [], [], [], [], []

    def new_node():
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feat) - 1

    def histogram(rows, cand):
        if full:
            flat = flatB[rows].ravel()
        else:
            flat = (B[np.ix_(rows, cand)] + offsets[cand]).ravel()
        m = cand.size
        ha = np.bincount(flat, np.repeat(a[rows], m), minlength=total_bins)
        hb = np.bincount(flat, np.repeat(b[rows], m), minlength=total_bins)
        if cnt is b:
            hc = hb
        elif unit_cnt:
            hc = np.bincount(flat, minlength=total_bins).astype(np.float64)
        else:
            hc = np.bincount(flat, np.repeat(cnt[rows], m), minlength=total_bins)
        return ha, hb, hc

    root = new_node()
    stack = [(root, np.arange(B.shape[0]), 0, None)]
    while stack:
        node, rows, depth, hist = stack.pop()
        sa, sb, sc = a[rows].sum(), b[rows].sum(), cnt[rows].sum()
        value[node] = leaf_fn(sa, sb)
        if depth >= max_depth or sc < 2 * min_leaf:
            continue
        if full:
            cand = all_feats
        else:
            cand = np.sort(rng.choice(n_features, n_feat_node, replace=False))
        if hist is None:
            hist = histogram(rows, cand)
        ha, hb, hc = hist
        parent = sa * sa / (sb + lam)
        best = (1e-12 * max(1.0, abs(parent)), -1, -1)
        for f in cand:
            lo, nb = offsets[f], n_bins[f]
            if nb < 2:
                continue
            ca = np.cumsum(ha[lo:lo + nb])[:-1]
            cb = np.cumsum(hb[lo:lo + nb])[:-1]
            cc = np.cumsum(hc[lo:lo + nb])[:-1]
            ok = (cc >= min_leaf) & (sc - cc >= min_leaf) & (cb > 0) & (sb - cb > 0)
            if not ok.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = ca * ca / (cb + lam) + (sa - ca) ** 2 / (sb - cb + lam) - parent
            gain = np.where(ok, gain, -np.inf)
            j = int(np.argmax(gain))
            if gain[j] > best[0]:
                best = (gain[j], int(f), j)
        _, f, j = best
        if f < 0:
            continue
        go_left = B[rows, f] <= j
        lrows, rrows = rows[go_left], rows[~go_left]
        feat[node], thr[node] = f, float(edges[f][j])
        left[node], right[node] = new_node(), new_node()
        lh = rh = None
        if full and depth + 1 < max_depth:
            if lrows.size <= rrows.size:
                lh = histogram(lrows, cand)
                rh = tuple(p - c for p, c in zip(hist, lh))
            else:
                rh = histogram(rrows, cand)
                lh = tuple(p - c for p, c in zip(hist, rh))
        # right first so the left subtree is numbered first
        stack.append((right[node], rrows, depth + 1, rh))
        stack.append((left[node], lrows, depth + 1, lh))
    return (np.array(feat, np.int64), np.array(thr), np.array(left, np.int64),
            np.array(right, np.int64), np.array(value))


def _tree_apply(nodes, X):
    feat, thr, left, right, value = nodes
    idx = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    while True:
        f = feat[idx]
        active = f >= 0
        if not active.any():
            return value[idx]
        x = X[rows, np.where(active, f, 0)]
        step = np.where(x <= thr[idx], left[idx], right[idx])
        idx = np.where(active, step, idx)


def _pack(trees):
    sizes = np.array([t[0].size for t in trees], np.int64)
    cat = [np.concatenate([t[i] for t in trees]) for i in range(5)]
    return {"sizes": sizes, "feat": cat[0], "thr": cat[1], "left": cat[2], "right": cat[3], "value": cat[4]}


def _unpack(arrays):
    out, start = [], 0
    for s in arrays["sizes"]:
        sl = slice(start, start + int(s))
        out.append(tuple(arrays[k][sl] for k in ("feat", "thr", "left", "right", "value")))
        start += int(s)
    return out


def _positive_fraction(sa, sb):
    return float(sa / sb) if sb > 0 else 0.5


def _n_feat_node(spec_value, n_features: int) -> int:
    if spec_value == "sqrt":
        return max(1, int(math.isqrt(n_features)))
    return max(1, min(n_features, int(math.ceil(float(spec_value) * n_features))))


def _train_forest(p, X, y, n_trees, subsample, bootstrap, seed):
    binner = _Binner(X, int(p["max_bins"]))
    B = binner.transform(X)
    m = _n_feat_node(subsample, X.shape[1])
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        if bootstrap:
            w = np.bincount(rng.integers(0, X.shape[0], X.shape[0]), minlength=X.shape[0]).astype(float)
        else:
            w = np.ones(X.shape[0])
        trees.append(_build_tree(B, binner.edges, w * y, w, w, max_depth=int(p["max_depth"]),
                                 min_leaf=p["min_leaf"], lam=0.0, leaf_fn=_positive_fraction,
                                 n_feat_node=m, rng=rng))
    return _pack(trees)


def _predict_forest(arrays, X):
    trees = _unpack(arrays)
    acc = np.zeros(X.shape[0])
    for t in trees:
        acc += _tree_apply(t, X)
    return acc / len(trees)


def _train_gbdt(p, X, y):
    binner = _Binner(X, int(p["max_bins"]))
    B = binner.transform(X)
    lam = float(p["l2"])
    prior = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
    base = math.log(prior / (1 - prior))
    F = np.full(X.shape[0], base)
    losses = [log_loss(y, F)]
    ones = np.ones(X.shape[0])
    trees = []
    for _ in range(int(p["n_rounds"])):
        prob = sigmoid(F)
        grad, hess = prob - y, prob * (1 - prob)
        t = _build_tree(B, binner.edges, grad, hess, ones, max_depth=int(p["max_depth"]),
                        min_leaf=p["min_leaf"], lam=lam, leaf_fn=lambda sa, sb: -sa / (sb + lam),
                        n_feat_node=X.shape[1], rng=None)
        step = _tree_apply(t, X)
        # Backtrack so training loss never rises; a rejected round adds a zero tree.
        scale = float(p["learning_rate"])
        for _ in range(40):
            cand = F + scale * step
            loss = log_loss(y, cand)
            if loss <= losses[-1]:
                break
            scale /= 2
        else:
            scale, cand, loss = 0.0, F, losses[-1]
        F = cand
        losses.append(loss)
        trees.append(t[:4] + (t[4] * scale,))
    arrays = _pack(trees)
    arrays["base"] = np.array([base])
    arrays["train_loss"] = np.array(losses)
    return arrays


def _predict_gbdt(arrays, X):
    F = np.full(X.shape[0], float(arrays["base"][0]))
    for t in _unpack(arrays):
        F += _tree_apply(t, X)
    return sigmoid(F)


# -- public API --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainedModel:
    spec: ModelSpec
    n_features: int
    arrays: dict
    # JSON-serializable annotations, e.g. feature names for the CLI
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def train_losses(self) -> np.ndarray:
        if "train_loss" not in self.arrays:
            raise ModelError(f"{self.kind} does not record training losses")
        return self.arrays["train_loss"]

    def predict_proba(self, X) -> np.ndarray:
        return predict_proba(self, X)


def train(spec: ModelSpec, X, y) -> TrainedModel:
    """Fit ``spec`` on features X and 0/1 labels y (or a Dataset as X)."""
    if hasattr(X, "features"):
        X, y = X.features, X.labels
    X, y = _check_training(spec.kind, X, y)
    p = spec.params
    seed = int(p.get("seed", 0))
    if spec.kind == "logistic":
        arrays = _train_logistic(p, X, y)
    elif spec.kind == "knn":
        if X.shape[0] < p["k"]:
            raise ModelError(f"knn: k={p['k']} exceeds the {X.shape[0]} training rows")
        arrays = {"X": X.copy(), "y": y.copy()}
    elif spec.kind == "tree":
        arrays = _train_forest(p, X, y, 1, 1.0, False, seed)
    elif spec.kind == "forest":
        arrays = _train_forest(p, X, y, int(p["n_trees"]), p["feature_subsample"], bool(p["bootstrap"]), seed)
    else:
        arrays = _train_gbdt(p, X, y)
    for a in arrays.values():
        a.flags.writeable = False
    return TrainedModel(spec, X.shape[1], arrays)


def predict_proba(m: TrainedModel, X) -> np.ndarray:
    X = _check_rows(X, m.n_features)
    if m.kind == "logistic":
        s = _predict_logistic(m.arrays, X)
    elif m.kind == "knn":
        s = _predict_knn(m.spec.params, m.arrays, X)
    elif m.kind in ("tree", "forest"):
        s = _predict_forest(m.arrays, X)
    else:
        s = _predict_gbdt(m.arrays, X)
    return np.clip(s, 0.0, 1.0)


def save_model(m: TrainedModel, path) -> None:
    """Magic line, one JSON header line, then an npz payload."""
    meta = {"format": FORMAT_VERSION, "kind": m.kind, "params": m.spec.params, "n_features": m.n_features,
            "meta": m.meta}
    buf = io.BytesIO()
    np.savez(buf, **m.arrays)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        fh.write(buf.getvalue())


def load_model(path) -> TrainedModel:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ModelError(f"{path}: not a model file")
        try:
            meta = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: corrupt header") from exc
        if meta.get("format") != FORMAT_VERSION:
            raise ModelError(f"{path}: unsupported format version {meta.get('format')}")
        with np.load(io.BytesIO(fh.read()), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    for a in arrays.values():
        a.flags.writeable = False
    return TrainedModel(ModelSpec(meta["kind"], meta["params"]), int(meta["n_features"]), arrays,
                        meta.get("meta", {}))
