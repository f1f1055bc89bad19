"""Per-group decision thresholds over predicted probabilities.

A row is predicted positive when ``score >= tau[group]``. Thresholds are
searched over an exact candidate grid: for every group, ``0``, the midpoints
between consecutive distinct scores of that group, and ``1``. Every confusion
outcome reachable with thresholds in ``[0, 1]`` is reached by some grid point,
so a search over the grid loses nothing. (A score of exactly 1 is positive
under every threshold, so such a group can never be predicted all negative.)

With at most two groups the search is exhaustive over the product of the
grids. With more groups the balanced-accuracy objectives use coordinate
ascent, and results are marked ``approximate``. The worst-group optimum itself
is exact for any number of groups because it separates across groups; only
its balanced-accuracy tie-break is approximate there.

Ties between threshold vectors with the same objective value are broken by
the secondary metric (WG-BA for the BA objectives, BA for the worst-group
objective) and then by the lexicographically smallest threshold vector.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .metrics import ba_arrays

# Cap on the number of pair evaluations held in memory at once.
_CHUNK_CELLS = 1 << 22
_MAX_SWEEPS = 50


class CalibrationError(ValueError):
    """Raised when thresholds cannot be fitted on the given predictions."""


class Objective(str, enum.Enum):
    FAIR_BALACC = "fair_balacc"
    FAIR_MINBALACC = "fair_minbalacc"
    SINGLE_BALACC = "single"

    @classmethod
    def parse(cls, token: "str | Objective") -> "Objective":
        if isinstance(token, Objective):
            return token
        key = str(token).strip().lower().replace("-", "_")
        aliases = {"fairbalacc": "fair_balacc", "fairminbalacc": "fair_minbalacc",
                   "singlebalacc": "single", "single_balacc": "single"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(
                f"unknown objective {token!r}; expected one of "
                "fair-balacc, fair-minbalacc, single") from None


@dataclass(frozen=True)
class ScoredPredictions:
    scores: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    group_names: tuple[str, ...] | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        groups = np.asarray(self.groups)
        n = scores.shape[0]
        if scores.ndim != 1 or labels.shape != (n,) or groups.shape != (n,):
            raise ValueError("scores, labels and groups must be 1-D and equally long")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        if n and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        if n and (groups.min() < 0 or not np.issubdtype(groups.dtype, np.integer)):
            raise ValueError("groups must be non-negative integer indices")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int8))
        object.__setattr__(self, "groups", groups.astype(np.int64))
        if self.group_names is not None:
            object.__setattr__(self, "group_names", tuple(self.group_names))

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def present_groups(self) -> list[int]:
        return [int(g) for g in np.unique(self.groups)]

    def group_name(self, g: int) -> str:
        if self.group_names is not None and g < len(self.group_names):
            return self.group_names[g]
        return str(g)


@dataclass(frozen=True)
class GroupThresholds:
    tau: Mapping[int, float]
    objective: str
    ba: float = float("nan")
    wg_ba: float = float("nan")
    approximate: bool = False

    def __post_init__(self):
        for g, t in self.tau.items():
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"threshold for group {g} outside [0, 1]: {t}")

    @property
    def achieved(self) -> tuple[float, float]:
        return self.ba, self.wg_ba

    @classmethod
    def constant(cls, groups: Sequence[int], value: float = 0.5,
                 objective: str = "raw") -> "GroupThresholds":
        return cls({int(g): float(value) for g in groups}, objective)


@dataclass(frozen=True)
class FrontierPoint:
    tau: Mapping[int, float]
    ba: float
    wg_ba: float
    approximate: bool = field(default=False, compare=False)


def apply_thresholds(sp: ScoredPredictions, t: GroupThresholds | Mapping[int, float]) -> np.ndarray:
    tau = t.tau if isinstance(t, GroupThresholds) else t
    missing = sorted(set(sp.present_groups) - set(tau))
    if missing:
        raise CalibrationError(
            "no threshold for group(s): " + ", ".join(sp.group_name(g) for g in missing))
    size = max(sp.present_groups) + 1 if len(sp) else 0
    lookup = np.full(size, np.nan)
    for g, v in tau.items():
        if g < size:
            lookup[g] = v
    return (sp.scores >= lookup[sp.groups]).astype(np.int8)


def _grid_from_scores(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2.0
    # Adjacent doubles can round the midpoint onto the lower score.
    mids = np.where(mids <= u[:-1], u[1:], mids)
    return np.concatenate(([0.0], mids, [1.0]))


def candidate_grid(sp: ScoredPredictions, g: int) -> np.ndarray:
    """Ascending candidate thresholds for group ``g``: 0, midpoints, 1."""
    s = sp.scores[sp.groups == g]
    if s.size == 0:
        raise CalibrationError(f"group {sp.group_name(g)} has no rows")
    return _grid_from_scores(s)


@dataclass
class _GroupTable:
    """Confusion counts of one group at each of its candidate thresholds."""

    group: int
    cand: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @classmethod
    def build(cls, group: int, scores: np.ndarray, labels: np.ndarray,
              cand: np.ndarray) -> "_GroupTable":
        pos = np.sort(scores[labels == 1])
        neg = np.sort(scores[labels == 0])
        tp = pos.size - np.searchsorted(pos, cand, side="left")
        fp = neg.size - np.searchsorted(neg, cand, side="left")
        return cls(group, cand, tp.astype(np.int64), fp.astype(np.int64),
                   (neg.size - fp).astype(np.int64), (pos.size - tp).astype(np.int64))

    @property
    def ba(self) -> np.ndarray:
        return ba_arrays(self.tp, self.fp, self.tn, self.fn)


def _tables(sp: ScoredPredictions) -> list[_GroupTable]:
    out = []
    for g in sp.present_groups:
        m = sp.groups == g
        out.append(_GroupTable.build(g, sp.scores[m], sp.labels[m], _grid_from_scores(sp.scores[m])))
    return out


def _check_classes(sp: ScoredPredictions) -> None:
    if len(sp) == 0:
        raise CalibrationError("no scored rows")
    n_pos = int(sp.labels.sum())
    if n_pos == 0 or n_pos == len(sp):
        missing = "positive" if n_pos == 0 else "negative"
        raise CalibrationError(
            f"no {missing} rows in the calibration data; threshold optimization impossible")


def _evaluate_indices(tables: list[_GroupTable], idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(BA, WG-BA) for each row of an (N, G) matrix of candidate indices."""
    idx = np.atleast_2d(idx)
    tp = fp = tn = fn = 0
    wg = np.full(idx.shape[0], np.inf)
    for k, t in enumerate(tables):
        j = idx[:, k]
        tp = tp + t.tp[j]
        fp = fp + t.fp[j]
        tn = tn + t.tn[j]
        fn = fn + t.fn[j]
        wg = np.minimum(wg, t.ba[j])
    return ba_arrays(tp, fp, tn, fn), wg


def _tau(tables: list[_GroupTable], idx) -> dict[int, float]:
    return {t.group: float(t.cand[int(j)]) for t, j in zip(tables, idx)}


def _better(p: float, s: float, best_p: float, best_s: float) -> bool:
    return p > best_p or (p == best_p and s > best_s)


def _pair_chunks(tables: list[_GroupTable]):
    """Yield (row offset, BA block, WG-BA block) over the full two-group product."""
    t0, t1 = tables
    m1 = t1.cand.size
    step = max(1, _CHUNK_CELLS // m1)
    ba1 = t1.ba
    ba0 = t0.ba
    for start in range(0, t0.cand.size, step):
        sl = slice(start, start + step)
        ba = ba_arrays(t0.tp[sl, None] + t1.tp[None, :], t0.fp[sl, None] + t1.fp[None, :],
                       t0.tn[sl, None] + t1.tn[None, :], t0.fn[sl, None] + t1.fn[None, :])
        wg = np.minimum(ba0[sl, None], ba1[None, :])
        yield start, ba, wg


def _exhaustive_pair(tables: list[_GroupTable], primary_is_ba: bool) -> tuple[int, int]:
    m1 = tables[1].cand.size
    best = (-np.inf, -np.inf)
    best_idx = (0, 0)
    for start, ba, wg in _pair_chunks(tables):
        prim, sec = (ba, wg) if primary_is_ba else (wg, ba)
        pmax = prim.max()
        if pmax < best[0]:
            continue
        mask = prim == pmax
        smax = sec[mask].max()
        if _better(pmax, smax, *best):
            flat = int(np.argmax(mask & (sec == smax)))
            best = (pmax, smax)
            best_idx = (start + flat // m1, flat % m1)
    return best_idx


def _coordinate_ascent(tables: list[_GroupTable], start: Sequence[int],
                       weight: float | None = None, visited: list | None = None) -> np.ndarray:
    """Improve one group's threshold at a time until no single move helps.

    ``weight`` selects the objective: ``None`` or 1.0 means BA first, 0.0 means
    WG-BA first, anything between scalarizes ``w*BA + (1-w)*WG-BA`` with BA as
    the tie-break. A move is taken when it improves (primary, secondary), or
    keeps both and lowers the threshold.
    """
    cur = np.array(start, dtype=np.int64)
    w = 1.0 if weight is None else weight
    for _ in range(_MAX_SWEEPS):
        changed = False
        for k, t in enumerate(tables):
            cand_idx = np.repeat(cur[None, :], t.cand.size, axis=0)
            cand_idx[:, k] = np.arange(t.cand.size)
            ba, wg = _evaluate_indices(tables, cand_idx)
            if w == 1.0:
                prim, sec = ba, wg
            elif w == 0.0:
                prim, sec = wg, ba
            else:
                prim, sec = w * ba + (1.0 - w) * wg, ba
            pmax = prim.max()
            mask = prim == pmax
            smax = sec[mask].max()
            j = int(np.argmax(mask & (sec == smax)))
            c = cur[k]
            if _better(pmax, smax, prim[c], sec[c]) or (
                    j < c and prim[c] == pmax and sec[c] == smax):
                cur[k] = j
                changed = True
                if visited is not None:
                    visited.append(cur.copy())
        if not changed:
            break
    return cur


def _single_best(sp: ScoredPredictions, tables: list[_GroupTable]) -> tuple[float, float, float]:
    cand = _grid_from_scores(sp.scores)
    idx = np.stack([np.searchsorted(np.unique(sp.scores[sp.groups == t.group]), cand, side="left")
                    for t in tables], axis=1)
    ba, wg = _evaluate_indices(tables, idx)
    pmax = ba.max()
    mask = ba == pmax
    smax = wg[mask].max()
    j = int(np.argmax(mask & (wg == smax)))
    return float(cand[j]), float(ba[j]), float(wg[j])


def _index_for_value(table: _GroupTable, sp: ScoredPredictions, value: float) -> int:
    # Grid position whose predictions match the threshold ``value`` in this group.
    u = np.unique(sp.scores[sp.groups == table.group])
    return int(np.searchsorted(u, value, side="left"))


def optimize(sp: ScoredPredictions, objective: "Objective | str") -> GroupThresholds:
    """Fit per-group thresholds on ``sp`` under ``objective``."""
    obj = Objective.parse(objective)
    _check_classes(sp)
    tables = _tables(sp)
    G = len(tables)

    if obj is Objective.SINGLE_BALACC:
        value, ba, wg = _single_best(sp, tables)
        return GroupThresholds({t.group: value for t in tables}, obj.value, ba, wg)

    if G == 1:
        idx = np.array([_exhaustive_single(tables[0])])
        approximate = False
    elif G == 2:
        idx = np.array(_exhaustive_pair(tables, obj is Objective.FAIR_BALACC))
        approximate = False
    else:
        approximate = True
        if obj is Objective.FAIR_BALACC:
            value, _, _ = _single_best(sp, tables)
            start = [_index_for_value(t, sp, value) for t in tables]
            idx = _coordinate_ascent(tables, start, weight=1.0)
        else:
            start = [_first_argmax(t.ba) for t in tables]
            idx = _coordinate_ascent(tables, start, weight=0.0)
    ba, wg = _evaluate_indices(tables, idx[None, :])
    return GroupThresholds(_tau(tables, idx), obj.value, float(ba[0]), float(wg[0]), approximate)


def _first_argmax(a: np.ndarray) -> int:
    return int(np.argmax(a == a.max()))


def _exhaustive_single(t: _GroupTable) -> int:
    return _first_argmax(t.ba)


def nondominated(ba: np.ndarray, wg: np.ndarray, order: np.ndarray | None = None) -> np.ndarray:
    """Indices of non-dominated (BA, WG-BA) pairs, sorted by BA descending.

    Among identical pairs the one with the smallest ``order`` key is kept.
    """
    ba = np.asarray(ba)
    wg = np.asarray(wg)
    if order is None:
        order = np.arange(ba.size)
    srt = np.lexsort((order, -wg, -ba))
    wg_s = wg[srt]
    prev = np.concatenate(([-np.inf], np.maximum.accumulate(wg_s)[:-1]))
    return srt[wg_s > prev]


def pareto_frontier(sp: ScoredPredictions) -> list[FrontierPoint]:
    """Non-dominated (BA, WG-BA) trade-offs over per-group thresholds."""
    _check_classes(sp)
    tables = _tables(sp)
    G = len(tables)
    if G == 1:
        j = _exhaustive_single(tables[0])
        idx = np.array([[j]])
        approximate = False
    elif G == 2:
        m1 = tables[1].cand.size
        keep_idx, keep_ba, keep_wg = [], [], []
        for start, ba, wg in _pair_chunks(tables):
            ba, wg = ba.ravel(), wg.ravel()
            sel = nondominated(ba, wg)
            keep_idx.append(start * m1 + sel)
            keep_ba.append(ba[sel])
            keep_wg.append(wg[sel])
        flat = np.concatenate(keep_idx)
        sel = nondominated(np.concatenate(keep_ba), np.concatenate(keep_wg), flat)
        flat = flat[sel]
        idx = np.stack([flat // m1, flat % m1], axis=1)
        approximate = False
    else:
        idx = _sweep_candidates(sp, tables)
        approximate = True
    ba, wg = _evaluate_indices(tables, idx)
    if G > 2:
        keys = _lex_keys(idx)
        sel = nondominated(ba, wg, keys)
        idx, ba, wg = idx[sel], ba[sel], wg[sel]
    return [FrontierPoint(_tau(tables, row), float(b), float(w), approximate)
            for row, b, w in zip(idx, ba, wg)]


def _lex_keys(idx: np.ndarray) -> np.ndarray:
    # Rank of each row in lexicographic order of its index vector.
    order = np.lexsort(idx.T[::-1])
    keys = np.empty(idx.shape[0], dtype=np.int64)
    keys[order] = np.arange(idx.shape[0])
    return keys


def _sweep_candidates(sp: ScoredPredictions, tables: list[_GroupTable]) -> np.ndarray:
    visited: list[np.ndarray] = []
    value, _, _ = _single_best(sp, tables)
    single = [_index_for_value(t, sp, value) for t in tables]
    per_group_best = [_first_argmax(t.ba) for t in tables]
    finals = []
    for w in np.linspace(0.0, 1.0, 11):
        for start in (single, per_group_best):
            visited.append(np.array(start))
            finals.append(_coordinate_ascent(tables, start, weight=float(w), visited=visited))
    rows = list(visited) + finals
    for f in finals:
        for k, t in enumerate(tables):
            dev = np.repeat(f[None, :], t.cand.size, axis=0)
            dev[:, k] = np.arange(t.cand.size)
            rows.append(dev)
    return np.unique(np.vstack([np.atleast_2d(r) for r in rows]), axis=0)


# ---------------------------------------------------------------------------
# file formats

class ScoreFileError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_scores(path) -> ScoredPredictions:
    """Parse a ``score,label,group`` CSV. Group indices follow sorted token order."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ScoreFileError(1, "empty file") from None
        if header != ["score", "label", "group"]:
            raise ScoreFileError(1, f"expected header score,label,group, got {','.join(header)}")
        scores, labels, tokens = [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ScoreFileError(line, f"expected 3 fields, got {len(row)}")
            s, y, g = (c.strip() for c in row)
            try:
                score = float(s)
            except ValueError:
                raise ScoreFileError(line, f"score {s!r} is not a number") from None
            if not math.isfinite(score) or not 0.0 <= score <= 1.0:
                raise ScoreFileError(line, f"score {s} outside [0, 1]")
            if y not in ("0", "1"):
                raise ScoreFileError(line, f"label {y!r} is not 0 or 1")
            if not g:
                raise ScoreFileError(line, "empty group")
            scores.append(score)
            labels.append(int(y))
            tokens.append(g)
    if not scores:
        raise ScoreFileError(1, "no data rows")
    names = tuple(sorted(set(tokens)))
    lookup = {name: i for i, name in enumerate(names)}
    return ScoredPredictions(np.array(scores), np.array(labels),
                             np.array([lookup[t] for t in tokens]), names)


def write_scores(path, sp: ScoredPredictions) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("score,label,group\n")
        for s, y, g in zip(sp.scores, sp.labels, sp.groups):
            fh.write(f"{float(s)!r},{int(y)},{sp.group_name(int(g))}\n")


def write_thresholds(path, t: GroupThresholds, group_names: Sequence[str] | None = None) -> None:
    # Thresholds are written with round-trip precision: a rounded midpoint
    # could fall on the other side of a nearby score.
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("group,threshold\n")
        for g in sorted(t.tau):
            name = group_names[g] if group_names is not None else str(g)
            fh.write(f"{name},{float(t.tau[g])!r}\n")


def read_thresholds(path, group_names: Sequence[str] | None = None) -> dict[int, float]:
    import csv

    lookup = {name: i for i, name in enumerate(group_names)} if group_names is not None else None
    tau = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = row["group"].strip()
            g = lookup[key] if lookup is not None else int(key)
            tau[g] = float(row["threshold"])
    return tau


def write_frontier(path, points: Sequence[FrontierPoint], n_groups: int | None = None) -> None:
    groups = sorted({g for p in points for g in p.tau})
    if n_groups is not None:
        groups = list(range(n_groups))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["ba", "wg_ba"] + [f"threshold_g{g}" for g in groups]) + "\n")
        for p in points:
            cells = [f"{p.ba:.6f}", f"{p.wg_ba:.6f}"]
            cells += [repr(float(p.tau[g])) if g in p.tau else "" for g in groups]
            fh.write(",".join(cells) + "\n")
