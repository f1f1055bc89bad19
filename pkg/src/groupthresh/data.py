"""Tabular datasets with a binary label and a protected-group column.

Loading one-hot encodes categorical columns (categories in sorted order, a
missing category last) and parses numeric columns as floats, keeping missing
numeric cells as NaN. Imputation and min-max scaling happen later, in
:class:`Preprocessor`, using statistics from the fitting split only.
"""
from __future__ import annotations

import csv
import gzip
import io
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING_CATEGORY = "<missing>"


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    def __init__(self, message: str, row_id: int | None = None):
        if row_id is not None:
            message = f"row {row_id}: {message}"
        super().__init__(message)
        self.row_id = row_id


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureColumn:
    name: str
    kind: str = "numeric"

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise SchemaError(f"column {self.name}: kind must be numeric or categorical, got {self.kind!r}")


@dataclass(frozen=True)
class DatasetSchema:
    feature_columns: tuple[FeatureColumn, ...]
    label_column: str
    positive_label: str
    group_column: str
    group_values: tuple[str, ...]
    # Catch-all group for every group value not listed, e.g. "non-White".
    rest_group: str | None = None
    missing_token: str = "?"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        object.__setattr__(self, "group_values", tuple(str(v) for v in self.group_values))
        names = [c.name for c in self.feature_columns]
        for special in (self.label_column, self.group_column):
            if special in names:
                raise SchemaError(f"column {special} cannot be both a feature and the label/group")
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature column")
        if not self.group_values:
            raise SchemaError("group value list is empty")
        if len(set(self.group_names)) != len(self.group_names):
            raise SchemaError("group values must be unique")

    @property
    def group_names(self) -> tuple[str, ...]:
        if self.rest_group is None:
            return self.group_values
        return self.group_values + (self.rest_group,)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        try:
            label = d["label"]
            group = d["group"]
            for table, allowed in ((label, {"column", "positive"}), (group, {"column", "values", "rest"})):
                extra = sorted(set(table) - allowed)
                if extra:
                    raise SchemaError(f"unexpected key(s) {extra} in a label/group table")
            if not d.get("numeric") and not d.get("categorical"):
                raise SchemaError("schema lists no numeric or categorical feature columns")
            features = [FeatureColumn(c, "numeric") for c in d.get("numeric", [])]
            features += [FeatureColumn(c, "categorical") for c in d.get("categorical", [])]
            order = d.get("feature_order")
            if order:
                by_name = {f.name: f for f in features}
                features = [by_name[n] for n in order]
            return cls(
                feature_columns=tuple(features),
                label_column=label["column"],
                positive_label=str(label["positive"]),
                group_column=group["column"],
                group_values=tuple(group["values"]),
                rest_group=group.get("rest"),
                missing_token=d.get("missing_token", "?"),
                name=d.get("name", ""),
            )
        except KeyError as e:
            raise SchemaError(f"schema is missing key {e.args[0]!r}") from None

    @classmethod
    def load(cls, path) -> "DatasetSchema":
        """Read a TOML schema file (or the ``[schema]`` table of a config)."""
        doc = load_toml(path)
        return cls.from_dict(doc.get("schema", doc))


def load_toml(path) -> dict:
    """Parse a TOML file; raises SchemaError on malformed input."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise SchemaError(f"{path}: {e}") from None


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    row_ids: np.ndarray
    feature_names: tuple[str, ...] = ()
    group_names: tuple[str, ...] = ()
    synthetic: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        n = X.shape[0]
        y = np.asarray(self.labels).astype(np.int8)
        g = np.asarray(self.groups).astype(np.int64)
        ids = np.asarray(self.row_ids).astype(np.int64)
        syn = np.zeros(n, bool) if self.synthetic is None else np.asarray(self.synthetic, bool)
        if n < 1:
            raise DataError("a dataset needs at least one row")
        if not (y.shape == g.shape == ids.shape == syn.shape == (n,)):
            raise DataError("features, labels, groups and row_ids must have equal length")
        if not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be 0 or 1")
        if np.any(np.isinf(X)):
            raise DataError("features must be finite")
        G = len(self.group_names) if self.group_names else int(g.max()) + 1
        if g.min() < 0 or g.max() >= G:
            raise DataError(f"group index outside [0, {G})")
        for name, arr in (("features", X), ("labels", y), ("groups", g), ("row_ids", ids), ("synthetic", syn)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{i}" for i in range(X.shape[1])))
        if not self.group_names:
            object.__setattr__(self, "group_names", tuple(str(i) for i in range(G)))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "group_names", tuple(self.group_names))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    @property
    def positive_rate(self) -> float:
        return float(self.labels.mean())

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       groups=self.groups[idx], row_ids=self.row_ids[idx],
                       synthetic=self.synthetic[idx])

    def with_features(self, features: np.ndarray) -> "Dataset":
        return replace(self, features=features)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.feature_names != self.feature_names or other.group_names != self.group_names:
            raise DataError("cannot concatenate datasets with different layouts")
        return replace(
            self,
            features=np.vstack([self.features, other.features]),
            labels=np.concatenate([self.labels, other.labels]),
            groups=np.concatenate([self.groups, other.groups]),
            row_ids=np.concatenate([self.row_ids, other.row_ids]),
            synthetic=np.concatenate([self.synthetic, other.synthetic]))


def _open_text(path):
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def load_csv(path, schema: DatasetSchema) -> Dataset:
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        pos = {name: i for i, name in enumerate(header)}
        needed = [schema.label_column, schema.group_column] + [c.name for c in schema.feature_columns]
        for name in needed:
            if name not in pos:
                raise SchemaError(f"{path}: missing column {name!r}")
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    return _encode(rows, pos, schema)


def _encode(rows: list[list[str]], pos: dict[str, int], schema: DatasetSchema) -> Dataset:
    n = len(rows)
    if n == 0:
        raise DataError("no data rows")
    missing = schema.missing_token
    group_index = {v: i for i, v in enumerate(schema.group_values)}
    rest = len(schema.group_values) if schema.rest_group is not None else None

    labels = np.empty(n, np.int8)
    groups = np.empty(n, np.int64)
    li, gi = pos[schema.label_column], pos[schema.group_column]
    for r, row in enumerate(rows):
        if len(row) != len(pos):
            raise DataError(f"expected {len(pos)} fields, got {len(row)}", r)
        labels[r] = 1 if row[li].strip() == schema.positive_label else 0
        gv = row[gi].strip()
        if gv in group_index:
            groups[r] = group_index[gv]
        elif rest is not None:
            groups[r] = rest
        else:
            raise DataError(f"group value {gv!r} is not in the schema group list", r)

    blocks, names = [], []
    for col in schema.feature_columns:
        ci = pos[col.name]
        cells = [row[ci].strip() for row in rows]
        if col.kind == "numeric":
            vals = np.empty(n)
            for r, c in enumerate(cells):
                if c == "" or c == missing:
                    vals[r] = np.nan
                    continue
                try:
                    v = float(c)
                except ValueError:
                    raise DataError(f"column {col.name}: {c!r} is not numeric", r) from None
                if not math.isfinite(v):
                    raise DataError(f"column {col.name}: {c!r} is not finite", r)
                vals[r] = v
            blocks.append(vals[:, None])
            names.append(col.name)
        else:
            cells = [MISSING_CATEGORY if c in ("", missing) else c for c in cells]
            cats = sorted(set(cells) - {MISSING_CATEGORY})
            if MISSING_CATEGORY in cells:
                cats.append(MISSING_CATEGORY)
            index = {c: i for i, c in enumerate(cats)}
            onehot = np.zeros((n, len(cats)))
            onehot[np.arange(n), [index[c] for c in cells]] = 1.0
            blocks.append(onehot)
            names.extend(f"{col.name}={c}" for c in cats)
    features = np.hstack(blocks) if blocks else np.zeros((n, 0))
    return Dataset(features, labels, groups, np.arange(n), tuple(names), schema.group_names)


@dataclass(frozen=True)
class SplitPlan:
    kind: str = "stratified_kfold"
    k: int = 5
    fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind == "stratified_kfold":
            if self.k < 2:
                raise SplitError("k must be at least 2")
        elif self.kind == "stratified_holdout":
            if not 0.0 < self.fraction < 1.0:
                raise SplitError("holdout fraction must lie in (0, 1)")
        else:
            raise SplitError(f"unknown split kind {self.kind!r}")


def stratified_kfold(ds: Dataset, plan: SplitPlan) -> list[tuple[Dataset, Dataset]]:
    """Label-stratified folds as (train, test) pairs.

    Each label stratum is shuffled and dealt round-robin over the folds; the
    deal continues across strata in a seeded fold order, so per-stratum and
    total fold sizes each differ by at most one.
    """
    if plan.kind == "stratified_holdout":
        return [_holdout(ds, plan)]
    k = plan.k
    rng = np.random.default_rng(plan.seed)
    for label in (0, 1):
        size = int(np.sum(ds.labels == label))
        if size < k:
            raise SplitError(f"label stratum {label} has {size} rows, fewer than k={k}")
    fold_order = rng.permutation(k)
    assign = np.empty(len(ds), np.int64)
    cursor = 0
    for label in (0, 1):
        rows = rng.permutation(np.flatnonzero(ds.labels == label))
        assign[rows] = fold_order[(cursor + np.arange(rows.size)) % k]
        cursor += rows.size
    out = []
    for f in range(k):
        test = assign == f
        out.append((ds.take(np.flatnonzero(~test)), ds.take(np.flatnonzero(test))))
    return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _apportion(sizes: Sequence[int], total: int, rng: np.random.Generator,
               lo: Sequence[int] | None = None, hi: Sequence[int] | None = None) -> np.ndarray:
    """Integer allocation proportional to ``sizes`` summing to ``total``.

    Largest remainder, seeded tie order, then clamped into [lo, hi] with the
    difference moved to strata that still have room.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    lo = np.zeros_like(sizes) if lo is None else np.asarray(lo, np.int64)
    hi = sizes.copy() if hi is None else np.asarray(hi, np.int64)
    if sizes.sum() == 0:
        return np.zeros_like(sizes)
    quota = total * sizes / sizes.sum()
    alloc = np.floor(quota).astype(np.int64)
    rem = quota - alloc
    tie = rng.permutation(sizes.size)
    order = np.lexsort((tie, -rem))
    for i in order[: total - alloc.sum()]:
        alloc[i] += 1
    alloc = np.clip(alloc, lo, hi)
    diff = total - alloc.sum()
    order = np.lexsort((tie, -sizes))
    while diff != 0:
        moved = False
        for i in order:
            if diff > 0 and alloc[i] < hi[i]:
                alloc[i] += 1
                diff -= 1
                moved = True
            elif diff < 0 and alloc[i] > lo[i]:
                alloc[i] -= 1
                diff += 1
                moved = True
            if diff == 0:
                break
        if not moved:
            break
    return alloc


def calibration_split(train: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Reserve ``round(fraction * n)`` rows for threshold fitting.

    Rows are stratified by (label, group) where a cell has at least two rows;
    smaller cells are pooled per label. Each label keeps at least one row on
    both sides when it has two or more rows.
    """
    if not 0.0 < fraction < 1.0:
        raise SplitError("calibration fraction must lie in (0, 1)")
    n = len(train)
    n_pos = int(train.labels.sum())
    if n_pos == 0 or n_pos == n:
        missing = "positive" if n_pos == 0 else "negative"
        raise SplitError(f"no {missing} rows in training data; threshold optimization impossible")
    rng = np.random.default_rng(seed)
    n_calib = _round_half_up(fraction * n)
    label_sizes = [n - n_pos, n_pos]
    lo = [1 if s >= 2 else 0 for s in label_sizes]
    hi = [s - 1 if s >= 2 else s for s in label_sizes]
    per_label = _apportion(label_sizes, n_calib, rng, lo, hi)

    calib = []
    for label in (0, 1):
        strata = []
        pooled = []
        for g in range(train.n_groups):
            rows = np.flatnonzero((train.labels == label) & (train.groups == g))
            if rows.size >= 2:
                strata.append(rows)
            else:
                pooled.extend(rows.tolist())
        if pooled:
            strata.append(np.array(pooled, dtype=np.int64))
        alloc = _apportion([s.size for s in strata], int(per_label[label]), rng)
        for rows, a in zip(strata, alloc):
            calib.extend(rng.permutation(rows)[:a].tolist())
    mask = np.zeros(n, bool)
    mask[calib] = True
    return train.take(np.flatnonzero(~mask)), train.take(np.flatnonzero(mask))


def _holdout(ds: Dataset, plan: SplitPlan) -> tuple[Dataset, Dataset]:
    train, test = calibration_split(ds, plan.fraction, plan.seed)
    return train, test


@dataclass
class Preprocessor:
    """Median imputation and min-max scaling fitted on one split."""

    medians: np.ndarray
    mins: np.ndarray
    scales: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset | np.ndarray) -> "Preprocessor":
        X = ds.features if isinstance(ds, Dataset) else np.asarray(ds, float)
        with warnings.catch_warnings():
            # all-NaN columns are imputed with 0 below
            warnings.simplefilter("ignore", RuntimeWarning)
            medians = np.nanmedian(X, axis=0)
        medians = np.where(np.isnan(medians), 0.0, medians)
        filled = np.where(np.isnan(X), medians, X)
        mins = filled.min(axis=0)
        span = filled.max(axis=0) - mins
        scales = np.where(span > 0, span, 1.0)
        return cls(medians, mins, scales)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, float)
        X = np.where(np.isnan(X), self.medians, X)
        return (X - self.mins) / self.scales

    def apply(self, ds: Dataset) -> Dataset:
        return ds.with_features(self.transform(ds.features))

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"medians": self.medians, "mins": self.mins, "scales": self.scales}
