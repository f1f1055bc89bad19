"""Command-line entry point: ``groupthresh <subcommand> ...``.

Every failure prints one line ``error[<code>]: <message>`` to stderr and exits
non-zero: 2 for bad input or configuration, 3 when a class is missing from the
calibration data, 4 when every experiment cell failed.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .calibrate import (
    CalibrationError,
    Objective,
    ScoredPredictions,
    ScoreFileError,
    optimize,
    pareto_frontier,
    read_scores,
    write_frontier,
    write_scores,
    write_thresholds,
)
from .data import DataError, DatasetSchema, Preprocessor, SchemaError, SplitError, load_csv
from .harness import ConfigError, ExperimentConfig, ExperimentReport, render_table, run_experiment, write_report
from .models import ModelError, ModelSpec, load_model, predict_proba, save_model, train
from .resample import ResampleError, SmoteConfig, smote_group_aware, write_augmented_csv

EXIT_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_ALL_FAILED = 4


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _read_scores(path) -> ScoredPredictions:
    try:
        return read_scores(path)
    except ScoreFileError as e:
        raise CliError("parse", f"{path}: {e}") from None
    except OSError as e:
        raise CliError("io", str(e)) from None


def _load_dataset(data, schema_path):
    try:
        schema = DatasetSchema.load(schema_path)
        return load_csv(data, schema)
    except (SchemaError, DataError) as e:
        raise CliError("data", str(e)) from None
    except OSError as e:
        raise CliError("io", str(e)) from None
    except ValueError as e:  # malformed TOML
        raise CliError("parse", f"{schema_path}: {e}") from None


# -- subcommands -----------------------------------------------------------

def cmd_calibrate(args) -> int:
    sp = _read_scores(args.scores)
    try:
        t = optimize(sp, Objective.parse(args.objective))
    except CalibrationError as e:
        raise CliError("degenerate", str(e), EXIT_DEGENERATE) from None
    write_thresholds(args.out, t, sp.group_names)
    print(f"objective: {t.objective}")
    for g in sorted(t.tau):
        print(f"threshold[{sp.group_name(g)}]: {_fmt(t.tau[g])}")
    print(f"BA: {_fmt(t.ba)}")
    print(f"WG-BA: {_fmt(t.wg_ba)}")
    if t.approximate:
        print("note: more than two groups; search is approximate")
    return 0


def cmd_frontier(args) -> int:
    sp = _read_scores(args.scores)
    try:
        points = pareto_frontier(sp)
    except CalibrationError as e:
        raise CliError("degenerate", str(e), EXIT_DEGENERATE) from None
    write_frontier(args.out, points, len(sp.group_names))
    print(f"frontier points: {len(points)}")
    for p in points:
        print(f"BA {_fmt(p.ba)}  WG-BA {_fmt(p.wg_ba)}")
    return 0


def cmd_smote(args) -> int:
    ds = _load_dataset(args.data, args.schema)
    try:
        cfg = SmoteConfig(args.k, args.ratio, args.seed, args.skip_small_groups)
        out = smote_group_aware(ds, cfg)
    except ResampleError as e:
        raise CliError("smote", str(e)) from None
    write_augmented_csv(args.out, out)
    print(f"rows: {len(ds)} original, {int(out.synthetic.sum())} synthetic")
    return 0


def _parse_params(pairs) -> dict:
    params = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError("usage", f"--param expects key=value, got {item!r}")
        for cast in (int, float):
            try:
                params[key] = cast(raw)
                break
            except ValueError:
                continue
        else:
            params[key] = {"true": True, "false": False}.get(raw.lower(), raw)
    return params


def cmd_train(args) -> int:
    ds = _load_dataset(args.data, args.schema)
    try:
        spec = ModelSpec(args.kind, _parse_params(args.param)).with_seed(args.seed)
        pre = Preprocessor.fit(ds)
        m = train(spec, pre.transform(ds.features), ds.labels)
    except ModelError as e:
        raise CliError("model", str(e)) from None
    arrays = dict(m.arrays) | {f"pre.{k}": v for k, v in pre.to_arrays().items()}
    meta = {"feature_names": list(ds.feature_names), "group_names": list(ds.group_names)}
    save_model(replace(m, arrays=arrays, meta=meta), args.out)
    print(f"trained {spec.kind} on {len(ds)} rows x {ds.features.shape[1]} features")
    return 0


def cmd_score(args) -> int:
    try:
        m = load_model(args.model)
    except (ModelError, OSError, ValueError) as e:
        raise CliError("model", str(e)) from None
    ds = _load_dataset(args.data, args.schema)
    expected = m.meta.get("feature_names")
    if expected is not None and list(ds.feature_names) != expected:
        raise CliError("data", "encoded features differ from the training data's")
    X = ds.features
    if "pre.medians" in m.arrays:
        pre = Preprocessor(m.arrays["pre.medians"], m.arrays["pre.mins"], m.arrays["pre.scales"])
        X = pre.transform(X)
    try:
        scores = predict_proba(m, X)
    except ModelError as e:
        raise CliError("model", str(e)) from None
    write_scores(args.out, ScoredPredictions(scores, ds.labels, ds.groups, ds.group_names))
    print(f"scored {len(ds)} rows")
    return 0


def cmd_experiment(args) -> int:
    try:
        cfg = ExperimentConfig.load(args.config)
    except (ConfigError, ModelError, SchemaError, SplitError, ResampleError) as e:
        raise CliError("config", str(e)) from None
    except OSError as e:
        raise CliError("io", str(e)) from None
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.dry_run:
        cells = cfg.planned_cells()
        print(f"experiment {cfg.name} ({cfg.config_hash()}): {len(cells)} cells x {cfg.n_folds()} folds")
        print(f"data: {cfg.resolved_data_path}")
        for m, c, o in cells:
            print(f"  {m}\t{c}\t{o}")
        return 0
    threads = args.threads or os.cpu_count() or 1
    try:
        ds = load_csv(cfg.resolved_data_path, cfg.schema)
    except (SchemaError, DataError) as e:
        raise CliError("data", str(e)) from None
    except OSError as e:
        raise CliError("io", f"cannot read dataset: {e}") from None
    try:
        report = run_experiment(cfg, threads=threads, dataset=ds)
    except SplitError as e:
        raise CliError("data", str(e)) from None
    out_dir = Path(args.out_dir) if args.out_dir else Path("reports")
    jpath, cpath = write_report(report, out_dir)
    print(render_table(report, args.format), end="")
    for c in report.cells:
        for err in dict.fromkeys(c.errors):
            print(f"cell failed: {err}", file=sys.stderr)
    print(f"wrote {jpath} and {cpath}")
    if report.all_failed:
        raise CliError("experiment", "every cell failed", EXIT_ALL_FAILED)
    return 0


def cmd_report(args) -> int:
    try:
        report = ExperimentReport.from_json(Path(args.report).read_text(encoding="utf-8"))
    except OSError as e:
        raise CliError("io", str(e)) from None
    except (ValueError, KeyError) as e:
        raise CliError("parse", f"{args.report}: {e}") from None
    text = render_table(report, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="groupthresh", description="Group-aware decision thresholds for imbalanced data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("calibrate", help="fit per-group thresholds on a score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--objective", required=True, choices=["fair-balacc", "fair-minbalacc", "single"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("frontier", help="export the BA / WG-BA Pareto frontier")
    s.add_argument("--scores", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_frontier)

    s = sub.add_parser("smote", help="group-aware SMOTE on a CSV dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--schema", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--ratio", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--skip-small-groups", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_smote)

    s = sub.add_parser("train", help="train a model and save it")
    s.add_argument("--data", required=True)
    s.add_argument("--schema", required=True)
    s.add_argument("--kind", required=True, choices=["logistic", "knn", "tree", "forest", "gbdt"])
    s.add_argument("--param", action="append", metavar="KEY=VALUE")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score a dataset with a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--schema", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("experiment", help="run a cross-validated experiment from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--dry-run", action="store_true")
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    s.add_argument("--out-dir", default=None)
    s.add_argument("--format", choices=["text", "csv", "latex"], default="text")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("report", help="render a saved JSON report as a table")
    s.add_argument("--report", required=True)
    s.add_argument("--format", choices=["text", "csv", "latex"], default="text")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as e:
        msg = " ".join(str(e).split())
        print(f"error[{e.code}]: {msg}", file=sys.stderr)
        return e.status


if __name__ == "__main__":
    sys.exit(main())
