"""Cross-validated comparison of threshold calibration against group-aware SMOTE.

Per fold: the training part is split into fit and calibration portions, the
preprocessor is fitted on the fit portion, SMOTE (when the condition asks for
it) touches the scaled fit portion only, thresholds are fitted on the
calibration portion only, and the untouched test fold is scored once.
"""
from __future__ import annotations

import hashlib
import json
import math
import multiprocessing
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .calibrate import GroupThresholds, ScoredPredictions, apply_thresholds, optimize
from .data import (
    Dataset,
    DatasetSchema,
    Preprocessor,
    SchemaError,
    SplitPlan,
    calibration_split,
    load_csv,
    load_toml,
    stratified_kfold,
)
from .metrics import evaluate
from .models import ModelSpec, predict_proba, train
from .resample import SmoteConfig, smote_group_aware

CONDITIONS = ("original", "smote")
OBJECTIVES = ("raw", "single", "fair_balacc", "fair_minbalacc")
REPORT_FORMAT = 1
_VAR = re.compile(r"\$\{(\w+)(?::-([^}]*))?\}")


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class NamedModel:
    name: str
    spec: ModelSpec


@dataclass(frozen=True)
class ExperimentConfig:
    schema: DatasetSchema
    data_path: str
    models: tuple[NamedModel, ...]
    conditions: tuple[str, ...] = CONDITIONS
    objectives: tuple[str, ...] = ("raw", "fair_balacc", "fair_minbalacc")
    cv: SplitPlan = SplitPlan()
    calib_fraction: float = 0.125
    smote: SmoteConfig = SmoteConfig()
    master_seed: int = 0
    name: str = "experiment"
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "objectives", tuple(self.objectives))
        if not self.models:
            raise ConfigError("at least one model is required")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError("model names must be unique")
        if not self.conditions:
            raise ConfigError("at least one condition is required")
        for c in self.conditions:
            if c not in CONDITIONS:
                raise ConfigError(f"unknown condition {c!r} (expected {', '.join(CONDITIONS)})")
        if not self.objectives:
            raise ConfigError("at least one objective is required")
        for o in self.objectives:
            if o not in OBJECTIVES:
                raise ConfigError(f"unknown objective {o!r} (expected {', '.join(OBJECTIVES)})")
        if len(set(self.conditions)) != len(self.conditions) or len(set(self.objectives)) != len(self.objectives):
            raise ConfigError("conditions and objectives must not repeat")
        if not 0.0 < self.calib_fraction < 1.0:
            raise ConfigError("calib_fraction must lie in (0, 1)")

    @property
    def resolved_data_path(self) -> Path:
        """Dataset path with ``${VAR}`` / ``${VAR:-default}`` expanded, relative to the config."""
        text = _VAR.sub(lambda m: os.environ.get(m.group(1)) or (m.group(2) or ""), self.data_path)
        p = Path(text).expanduser()
        return p if p.is_absolute() else Path(self.base_dir) / p

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        try:
            models = []
            for m in d.get("models", []):
                m = dict(m)
                kind = m.pop("kind")
                name = m.pop("name", kind)
                models.append(NamedModel(str(name), ModelSpec(kind, dict(m.pop("params", {})) | m)))
            proto = d.get("protocol", {})
            cv = d.get("cv", {})
            sm = d.get("smote", {})
            return cls(
                schema=DatasetSchema.from_dict(d["schema"]),
                data_path=str(d["dataset"]["path"]),
                models=tuple(models),
                conditions=tuple(proto.get("conditions", CONDITIONS)),
                objectives=tuple(proto.get("objectives", ("raw", "fair_balacc", "fair_minbalacc"))),
                cv=SplitPlan(kind=cv.get("kind", "stratified_kfold"), k=int(cv.get("k", 5)),
                             fraction=float(cv.get("fraction", 0.2))),
                calib_fraction=float(proto.get("calib_fraction", 0.125)),
                smote=SmoteConfig(k_neighbors=int(sm.get("k_neighbors", 5)),
                                  target_ratio=float(sm.get("target_ratio", 1.0)),
                                  skip_small_groups=bool(sm.get("skip_small_groups", False))),
                master_seed=int(d.get("seed", 0)),
                name=str(d.get("name", "experiment")),
                base_dir=str(base_dir),
            )
        except KeyError as e:
            raise ConfigError(f"config is missing key {e.args[0]!r}") from None
        except (TypeError, AttributeError) as e:
            raise ConfigError(f"malformed config: {e}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = load_toml(path)
        except SchemaError as e:
            raise ConfigError(str(e)) from None
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        s = self.schema
        return {
            "name": self.name,
            "seed": self.master_seed,
            "dataset": {"path": self.data_path},
            "schema": {
                "label": {"column": s.label_column, "positive": s.positive_label},
                "group": {"column": s.group_column, "values": list(s.group_values),
                          **({"rest": s.rest_group} if s.rest_group else {})},
                "features": [[c.name, c.kind] for c in s.feature_columns],
                "missing_token": s.missing_token,
            },
            "models": [{"name": m.name, "kind": m.spec.kind, "params": m.spec.params} for m in self.models],
            "protocol": {"conditions": list(self.conditions), "objectives": list(self.objectives),
                         "calib_fraction": self.calib_fraction},
            "cv": {"kind": self.cv.kind, "k": self.cv.k, "fraction": self.cv.fraction},
            "smote": {"k_neighbors": self.smote.k_neighbors, "target_ratio": self.smote.target_ratio,
                      "skip_small_groups": self.smote.skip_small_groups},
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def n_folds(self) -> int:
        return self.cv.k if self.cv.kind == "stratified_kfold" else 1

    def planned_cells(self) -> list[tuple[str, str, str]]:
        return [(m.name, c, o) for m in self.models for c in self.conditions for o in self.objectives]


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit sub-seed from the master seed and cell coordinates."""
    blob = "|".join(str(p) for p in (master, *parts)).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


# -- fold preparation ------------------------------------------------------

@dataclass(frozen=True)
class PreparedFold:
    index: int
    fit: Dataset
    smote_fit: Dataset | None
    smote_error: str | None
    calib: Dataset
    test: Dataset

    def training(self, condition: str) -> Dataset:
        if condition == "original":
            return self.fit
        if self.smote_fit is None:
            raise ExperimentError(f"SMOTE failed: {self.smote_error}")
        return self.smote_fit

    def audit(self) -> dict:
        test_ids = set(self.test.row_ids.tolist())
        out = {
            "fold": self.index,
            "n_fit": len(self.fit),
            "n_calib": len(self.calib),
            "n_test": len(self.test),
            "calib_test_overlap": len(test_ids & set(self.calib.row_ids.tolist())),
            "fit_test_overlap": len(test_ids & set(self.fit.row_ids.tolist())),
            "fit_calib_overlap": len(set(self.fit.row_ids.tolist()) & set(self.calib.row_ids.tolist())),
            "synthetic_in_calib_or_test": int(self.calib.synthetic.sum() + self.test.synthetic.sum()),
        }
        if self.smote_fit is not None:
            out["n_synthetic"] = int(self.smote_fit.synthetic.sum())
        return out


def prepare_folds(cfg: ExperimentConfig, ds: Dataset) -> list[PreparedFold]:
    plan = SplitPlan(kind=cfg.cv.kind, k=cfg.cv.k, fraction=cfg.cv.fraction,
                     seed=derive_seed(cfg.master_seed, "cv"))
    out = []
    for f, (train_part, test) in enumerate(stratified_kfold(ds, plan)):
        fit, calib = calibration_split(train_part, cfg.calib_fraction, derive_seed(cfg.master_seed, "calib", f))
        pre = Preprocessor.fit(fit)
        fit, calib, test = pre.apply(fit), pre.apply(calib), pre.apply(test)
        smote_fit, smote_error = None, None
        if "smote" in cfg.conditions:
            sc = SmoteConfig(cfg.smote.k_neighbors, cfg.smote.target_ratio,
                             derive_seed(cfg.master_seed, "smote", f), cfg.smote.skip_small_groups)
            try:
                smote_fit = smote_group_aware(fit, sc, first_id=int(ds.row_ids.max()) + 1)
            except ValueError as e:
                smote_error = str(e)
        out.append(PreparedFold(f, fit, smote_fit, smote_error, calib, test))
    return out


# -- cell execution ----------------------------------------------------------

def _fit_objective(objective: str, calib_sp: ScoredPredictions, n_groups: int) -> GroupThresholds:
    if objective == "raw":
        t = GroupThresholds.constant(range(n_groups), 0.5, "raw")
        ba, wg = evaluate(calib_sp.labels, apply_thresholds(calib_sp, t), calib_sp.groups)
        return GroupThresholds(t.tau, "raw", ba, wg)
    fitted = optimize(calib_sp, objective)
    # Groups absent from the calibration split fall back to 0.5.
    tau = {g: fitted.tau.get(g, 0.5) for g in range(n_groups)}
    return GroupThresholds(tau, fitted.objective, fitted.ba, fitted.wg_ba, fitted.approximate)


def run_cell_fold(model: NamedModel, condition: str, fold: PreparedFold, objectives, master_seed: int) -> dict:
    """Train once, then fit and evaluate every objective. Errors are captured."""
    where = f"model={model.name} condition={condition} fold={fold.index}"
    try:
        with threadpool_limits(limits=1):
            training = fold.training(condition)
            spec = model.spec.with_seed(derive_seed(master_seed, model.name, condition, fold.index))
            m = train(spec, training.features, training.labels)
            calib_sp = ScoredPredictions(predict_proba(m, fold.calib.features), fold.calib.labels, fold.calib.groups)
            test_sp = ScoredPredictions(predict_proba(m, fold.test.features), fold.test.labels, fold.test.groups)
    except Exception as e:  # noqa: BLE001 - recorded per cell
        return {o: {"fold": fold.index, "error": f"{where}: {e}"} for o in objectives}
    names = fold.test.group_names
    out = {}
    for o in objectives:
        try:
            t = _fit_objective(o, calib_sp, len(names))
            ba, wg = evaluate(test_sp.labels, apply_thresholds(test_sp, t), test_sp.groups)
            out[o] = {
                "fold": fold.index, "ba": ba, "wg_ba": wg,
                "calib_ba": t.ba, "calib_wg_ba": t.wg_ba,
                "thresholds": {names[g]: float(v) for g, v in sorted(t.tau.items())},
                "approximate": bool(t.approximate),
                "calib_test_overlap": int(np.isin(fold.calib.row_ids, fold.test.row_ids).sum()),
            }
        except Exception as e:  # noqa: BLE001
            out[o] = {"fold": fold.index, "error": f"{where} objective={o}: {e}"}
    return out


_WORKER_FOLDS: list[PreparedFold] | None = None


def _init_worker(folds):
    global _WORKER_FOLDS
    _WORKER_FOLDS = folds


def _worker(args):
    model, condition, f, objectives, seed = args
    return run_cell_fold(model, condition, _WORKER_FOLDS[f], objectives, seed)


# -- report ------------------------------------------------------------------

def _mean_std(values: list[float]) -> tuple[float, float]:
    mean = math.fsum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


@dataclass
class CellResult:
    model: str
    kind: str
    condition: str
    objective: str
    folds: list[dict]

    @property
    def errors(self) -> list[str]:
        return [f["error"] for f in self.folds if "error" in f]

    @property
    def failed(self) -> bool:
        return bool(self.errors)

    def stats(self, key: str) -> tuple[float, float]:
        if self.failed:
            return float("nan"), float("nan")
        return _mean_std([f[key] for f in self.folds])

    @property
    def ba_mean(self) -> float:
        return self.stats("ba")[0]

    @property
    def wg_ba_mean(self) -> float:
        return self.stats("wg_ba")[0]

    def to_dict(self) -> dict:
        d = {"model": self.model, "kind": self.kind, "condition": self.condition,
             "objective": self.objective, "folds": self.folds, "failed": self.failed}
        if not self.failed:
            d["ba_mean"], d["ba_std"] = self.stats("ba")
            d["wg_ba_mean"], d["wg_ba_std"] = self.stats("wg_ba")
        return d


@dataclass
class ExperimentReport:
    config: dict
    cells: list[CellResult]
    audit: list[dict]
    config_hash: str = ""

    def cell(self, model: str, condition: str, objective: str) -> CellResult:
        for c in self.cells:
            if (c.model, c.condition, c.objective) == (model, condition, objective):
                return c
        raise KeyError(f"no cell for model={model} condition={condition} objective={objective}")

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(c.model for c in self.cells))

    @property
    def all_failed(self) -> bool:
        return all(c.failed for c in self.cells)

    def deltas(self) -> dict:
        out = {}
        for m in self.models:
            try:
                g0, g1 = threshold_gain_delta(self, m)
            except (KeyError, ValueError):
                continue
            out[m] = {"gain_original": g0, "gain_smote": g1}
        return out

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "environment": {"package_version": __version__, "master_seed": self.config.get("seed")},
            "config_hash": self.config_hash,
            "config": self.config,
            "notes": ["calibration split is taken from each training fold, not from the whole dataset"],
            "cells": [c.to_dict() for c in self.cells],
            "deltas": self.deltas(),
            "audit": self.audit,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        d = json.loads(text)
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"unsupported report format {d.get('format')!r}")
        cells = [CellResult(c["model"], c["kind"], c["condition"], c["objective"], c["folds"]) for c in d["cells"]]
        return cls(d["config"], cells, d.get("audit", []), d.get("config_hash", ""))


def run_experiment(cfg: ExperimentConfig, threads: int = 1, dataset: Dataset | None = None) -> ExperimentReport:
    """Run every (model, condition, objective) cell over all folds."""
    ds = dataset if dataset is not None else load_csv(cfg.resolved_data_path, cfg.schema)
    folds = prepare_folds(cfg, ds)
    tasks = [(m, c, f.index, cfg.objectives, cfg.master_seed)
             for m in cfg.models for c in cfg.conditions for f in folds]
    if threads <= 1 or len(tasks) == 1:
        _init_worker(folds)
        try:
            results = [_worker(t) for t in tasks]
        finally:
            _init_worker(None)
    else:
        # fork shares the prepared folds with workers without pickling them
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=threads, mp_context=ctx,
                                 initializer=_init_worker, initargs=(folds,)) as ex:
            results = list(ex.map(_worker, tasks))
    by_key = {}
    for (m, c, f, _, _), res in zip(tasks, results):
        for o, fold_result in res.items():
            by_key.setdefault((m.name, c, o), []).append(fold_result)
    cells = [CellResult(m.name, m.spec.kind, c, o, by_key[(m.name, c, o)])
             for m in cfg.models for c in cfg.conditions for o in cfg.objectives]
    return ExperimentReport(cfg.to_dict(), cells, [f.audit() for f in folds], cfg.config_hash())


def threshold_gain_delta(report: ExperimentReport, model: str) -> tuple[float, float]:
    """(gain on original data, gain on SMOTE data) of fair_balacc over raw, in mean BA."""
    need = [(model, c, o) for c in CONDITIONS for o in ("raw", "fair_balacc")]
    missing = []
    cells = {}
    for key in need:
        try:
            cells[key] = report.cell(*key)
        except KeyError:
            missing.append("/".join(key))
    if missing:
        raise KeyError(f"missing cells: {', '.join(missing)}")
    failed = [("/".join(k)) for k, c in cells.items() if c.failed]
    if failed:
        raise ValueError(f"failed cells: {', '.join(failed)}")
    gains = [cells[(model, c, "fair_balacc")].ba_mean - cells[(model, c, "raw")].ba_mean for c in CONDITIONS]
    return gains[0], gains[1]


# -- tables --------------------------------------------------------------------

METHOD_LABELS = {"raw": "Raw", "single": "Single-BalAcc", "fair_balacc": "Fair-BalAcc",
                 "fair_minbalacc": "Fair-MinBalAcc"}


def table_rows(report: ExperimentReport) -> tuple[list[str], list[list[str]]]:
    conditions = list(dict.fromkeys(c.condition for c in report.cells))
    objectives = list(dict.fromkeys(c.objective for c in report.cells))
    header = ["model", "method"]
    for c in conditions:
        header += [f"{c}_ba", f"{c}_wg_ba"]
    header += ["best_in_model", "beats_both_raw_baselines"]
    rows = []
    for m in report.models:
        present = {(c.condition, c.objective): c for c in report.cells if c.model == m}
        bas = [c.ba_mean for c in present.values() if not c.failed]
        best = max(bas) if bas else None
        for o in objectives:
            row = [m, METHOD_LABELS[o]]
            winners = []
            for cond in conditions:
                cell = present.get((cond, o))
                if cell is None or cell.failed:
                    row += ["NA", "NA"]
                    continue
                row += [f"{cell.ba_mean:.6f}", f"{cell.wg_ba_mean:.6f}"]
                if best is not None and cell.ba_mean == best:
                    winners.append(cond)
            row.append(";".join(winners))
            row.append(_beats_both(present, o))
            rows.append(row)
    return header, rows


def _beats_both(present: dict, objective: str) -> str:
    if objective == "raw":
        return ""
    own = present.get(("original", objective))
    raws = [present.get(("original", "raw")), present.get(("smote", "raw"))]
    if own is None or own.failed or any(r is None or r.failed for r in raws):
        return ""
    return "1" if all(own.ba_mean > r.ba_mean for r in raws) else "0"


def render_table(report: ExperimentReport, fmt: str = "text") -> str:
    if not report.cells:
        raise ValueError("report has no cells")
    header, rows = table_rows(report)
    if fmt == "csv":
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "text":
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in [header, *rows]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"
    if fmt == "latex":
        n_num = len(header) - 4
        out = ["\\begin{tabular}{ll" + "c" * n_num + "}", "\\hline",
               " & ".join(h.replace("_", "\\_") for h in header[:-2]) + " \\\\", "\\hline"]
        for r in rows:
            cells = list(r[:-2])
            winners = r[-2].split(";") if r[-2] else []
            conds = [header[2 + 2 * i][:-3] for i in range(n_num // 2)]
            for i, cond in enumerate(conds):
                if cond in winners:
                    cells[2 + 2 * i] = f"\\textbf{{{cells[2 + 2 * i]}}}"
                if cond == "original" and r[-1] == "1":
                    cells[2 + 2 * i] = f"\\underline{{{cells[2 + 2 * i]}}}"
            out.append(" & ".join(cells) + " \\\\")
        out += ["\\hline", "\\end{tabular}"]
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown table format {fmt!r} (expected csv, text or latex)")


def write_report(report: ExperimentReport, out_dir) -> tuple[Path, Path]:
    """Write ``<name>-<hash>.json`` and the companion CSV table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{report.config.get('name', 'experiment')}-{report.config_hash}"
    jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
    jpath.write_text(report.to_json(), encoding="utf-8")
    cpath.write_text(render_table(report, "csv"), encoding="utf-8")
    return jpath, cpath


__all__ = [
    "CellResult", "ConfigError", "ExperimentConfig", "ExperimentReport", "NamedModel", "PreparedFold",
    "derive_seed", "prepare_folds", "render_table", "run_experiment", "threshold_gain_delta", "write_report",
]
