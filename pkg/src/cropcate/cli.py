"""Command-line pipeline: ingest -> fit -> report -> interpret, plus simulate.

Each command reads a config file (all settings optional, strict keys),
applies flag overrides, writes its outputs plus a run manifest into the
configured output directory, and prints its primary text block. Outputs
are byte-identical across reruns with the same config and seed, whatever
the thread count.

Exit codes: 0 success; 2 schema or validation problem (bad file, bad
config, degenerate geometry, single-class target); 3 no overlap after
propensity trimming; 4 numerical failure (rank-deficient final stage);
5 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import fileio
from .causal import ate, cate_batch, first_stage_diagnostic
from .config import RunConfig, config_dict, load_config, parse_theta
from .core import FeatureMatrix
from .errors import (
    GeometryError,
    NoOverlapError,
    RankDeficientError,
    SchemaError,
    SingleClassError,
    ValidationError,
)
from .geo import assemble_dataset, compute_abundance
from .interpret import effect_curve, fit_interpreter
from .learners import LearnerSpec
from .synth import generate, monte_carlo

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NO_OVERLAP = 3
EXIT_NUMERICAL = 4
EXIT_IO = 5


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(config: RunConfig, args) -> int:
    parcels = fileio.read_parcels_csv(config.parcels)
    env = fileio.read_env_csv(config.env)
    outcome = fileio.read_outcome_csv(config.outcome)
    grid = config.grid_spec()
    table = compute_abundance(parcels, grid)
    threshold = (config.agricultural_threshold
                 if getattr(args, "agricultural_only", False) else None)
    assembled = assemble_dataset(
        table, env, outcome, grid,
        study_years=config.study_years or None,
        agricultural_threshold=threshold)

    os.makedirs(config.output_dir, exist_ok=True)
    dataset_path = config.dataset_path()
    n_rows = fileio.write_dataset_csv(
        dataset_path, assembled.cell_ids, assembled.centers,
        assembled.dataset.X, assembled.dataset.t, assembled.dataset.y)
    fileio.write_scaler_json(fileio.scaler_sidecar_path(dataset_path),
                             assembled.scaler)

    years = assembled.report.study_years
    coverage = [float(sum(table.total_coverage.get((cid, y), 0.0)
                          for y in years) / len(years))
                for cid in assembled.cell_ids]
    n_cov = fileio.write_coverage_csv(config.output_path("coverage.csv"),
                                      assembled.cell_ids, coverage)

    n_treated = int(assembled.dataset.t.sum())
    report_text = fileio.format_join_report(
        assembled.report, n_treated=n_treated,
        n_control=n_rows - n_treated)
    fileio.write_text(config.output_path("join_report.txt"), report_text)

    report = assembled.report
    fileio.write_manifest(
        config.output_path("manifest_ingest.json"),
        command="ingest", config_dict=config_dict(config), seed=config.seed,
        inputs={config.parcels: fileio.sha256_file(config.parcels),
                config.env: fileio.sha256_file(config.env),
                config.outcome: fileio.sha256_file(config.outcome)},
        outputs={dataset_path: n_rows, "coverage.csv": n_cov},
        counts={"rows_out": report.n_rows,
                "dropped_missing_parcels": report.dropped_missing_parcels,
                "dropped_missing_env": report.dropped_missing_env,
                "dropped_missing_outcome": report.dropped_missing_outcome,
                "dropped_non_agricultural": report.dropped_non_agricultural,
                "n_treated": n_treated,
                "n_control": n_rows - n_treated})
    print(report_text, end="")
    return EXIT_OK


def _learner_specs(config: RunConfig):
    forest = config.forest_params()
    return (LearnerSpec(task="regression", forest=forest),
            LearnerSpec(task="classification", forest=forest))


def cmd_fit(config: RunConfig, args) -> int:
    dataset_path = config.dataset_path()
    scaler_path = fileio.scaler_sidecar_path(dataset_path)
    data = fileio.read_dataset_csv(dataset_path)
    scaler = fileio.read_scaler_json(scaler_path)

    y_spec, t_spec = _learner_specs(config)
    diag = first_stage_diagnostic(data.dataset, k=config.folds,
                                  y_spec=y_spec, t_spec=t_spec,
                                  seed=config.seed, threads=config.threads)
    block = fileio.format_first_stage(diag)
    print(block, end="")

    result = config.estimator_config().run(data.dataset, scaler,
                                           seed=config.seed,
                                           threads=config.threads)
    os.makedirs(config.output_dir, exist_ok=True)
    fileio.write_text(config.output_path("first_stage.txt"), block)
    fileio.write_cate_model(config.output_path("cate_model.json"),
                            result.model)
    kept = np.zeros(data.dataset.n_rows, dtype=bool)
    kept[result.trim.kept_indices] = True
    n_prop = fileio.write_propensity_csv(config.output_path("propensity.csv"),
                                         data.cell_ids, result.propensity_all,
                                         kept)
    trim = result.trim
    fileio.write_manifest(
        config.output_path("manifest_fit.json"),
        command="fit", config_dict=config_dict(config), seed=config.seed,
        inputs={dataset_path: fileio.sha256_file(dataset_path),
                scaler_path: fileio.sha256_file(scaler_path)},
        outputs={"cate_model.json": 1, "first_stage.txt": 1,
                 "propensity.csv": n_prop},
        counts={"kept_treated": trim.kept_treated,
                "kept_control": trim.kept_control,
                "removed_treated": trim.removed_treated,
                "removed_control": trim.removed_control})
    return EXIT_OK


def _load_fitted(config: RunConfig):
    dataset_path = config.dataset_path()
    data = fileio.read_dataset_csv(dataset_path)
    model = fileio.read_cate_model(config.output_path("cate_model.json"))
    if model.feature_names != data.dataset.X.column_names:
        raise SchemaError(
            "model and dataset disagree on covariate names",
            model=list(model.feature_names),
            dataset=list(data.dataset.X.column_names))
    return dataset_path, data, model


def cmd_report(config: RunConfig, args) -> int:
    dataset_path, data, model = _load_fitted(config)
    prop_path = config.output_path("propensity.csv")
    ids, scores, kept = fileio.read_propensity_csv(prop_path)
    if tuple(int(i) for i in ids) != data.cell_ids:
        raise SchemaError("propensity file rows do not match the dataset",
                          file=prop_path)

    points, ses = cate_batch(model, data.dataset.X)
    report_path = config.output_path("cate_report.csv")
    n_rows = fileio.write_cate_report(report_path, data.cell_ids,
                                      data.centers, points, ses,
                                      data.dataset.t, scores)

    p_values = fileio.normal_p_values(np.asarray(points), np.asarray(ses))
    share = float(np.mean(p_values < 0.05))
    summary = ate(model, data.dataset.X,
                  mean_outcome=float(data.dataset.y.mean()))
    n_kept = int(kept.sum())
    text = fileio.format_ate_summary(summary, n_total=data.dataset.n_rows,
                                     n_kept=n_kept,
                                     n_removed=data.dataset.n_rows - n_kept,
                                     share_significant=share)
    fileio.write_text(config.output_path("ate_summary.txt"), text)

    outputs = {"cate_report.csv": n_rows, "ate_summary.txt": 1}
    inputs = {dataset_path: fileio.sha256_file(dataset_path),
              config.output_path("cate_model.json"):
                  fileio.sha256_file(config.output_path("cate_model.json")),
              prop_path: fileio.sha256_file(prop_path)}
    if getattr(args, "agricultural_only", False):
        coverage_path = config.output_path("coverage.csv")
        coverage = fileio.read_coverage_csv(coverage_path)
        mask = np.array([coverage.get(cid, 0.0) >= config.agricultural_threshold
                         for cid in data.cell_ids])
        rows = np.flatnonzero(mask)
        filtered_path = config.output_path("cate_report_agricultural.csv")
        n_filtered = fileio.write_cate_report(
            filtered_path, [data.cell_ids[i] for i in rows],
            data.centers[rows], np.asarray(points)[rows],
            np.asarray(ses)[rows], data.dataset.t[rows], scores[rows])
        outputs["cate_report_agricultural.csv"] = n_filtered
        inputs[coverage_path] = fileio.sha256_file(coverage_path)

    fileio.write_manifest(
        config.output_path("manifest_report.json"),
        command="report", config_dict=config_dict(config), seed=config.seed,
        inputs=inputs, outputs=outputs,
        counts={"n_significant": int(np.sum(p_values < 0.05))})
    print(text, end="")
    return EXIT_OK


def cmd_interpret(config: RunConfig, args) -> int:
    dataset_path, data, model = _load_fitted(config)
    scaler_path = fileio.scaler_sidecar_path(dataset_path)
    scaler = fileio.read_scaler_json(scaler_path)

    points, _ = cate_batch(model, data.dataset.X)
    X_raw = scaler.inverse(data.dataset.X.values)
    tree = fit_interpreter(X_raw, points,
                           feature_names=data.dataset.X.column_names,
                           max_depth=config.interpreter_depth,
                           min_leaf_size=config.interpreter_min_leaf)
    os.makedirs(config.output_dir, exist_ok=True)
    fileio.write_tree_text(config.output_path("tree.txt"), tree)
    fileio.write_tree_json(config.output_path("tree.json"), tree)

    outputs = {"tree.txt": 1, "tree.json": 1}
    for name in data.dataset.X.column_names:
        curve = effect_curve(model, data.dataset.X, name,
                             n_bins=config.curve_bins)
        curve_name = f"curve_{name}.csv"
        outputs[curve_name] = fileio.write_curve_csv(
            config.output_path(curve_name), curve)

    fileio.write_manifest(
        config.output_path("manifest_interpret.json"),
        command="interpret", config_dict=config_dict(config),
        seed=config.seed,
        inputs={dataset_path: fileio.sha256_file(dataset_path),
                scaler_path: fileio.sha256_file(scaler_path),
                config.output_path("cate_model.json"):
                    fileio.sha256_file(config.output_path("cate_model.json"))},
        outputs=outputs,
        counts={"n_leaves": tree.n_leaves})
    print(fileio.read_text(config.output_path("tree.txt")), end="")
    return EXIT_OK


def cmd_simulate(config: RunConfig, args) -> int:
    if args.reps is not None:
        config = replace(config, sim_reps=args.reps)
    if args.n is not None:
        config = replace(config, sim_n=args.n)
    if args.theta is not None:
        parse_theta(args.theta)  # fail fast on bad forms
        config = replace(config, sim_theta=args.theta)
    config.validate()

    spec = config.dgp_spec()
    report = monte_carlo(spec, config.estimator_config(),
                         reps=config.sim_reps, seed=config.seed,
                         threads=config.threads)
    os.makedirs(config.output_dir, exist_ok=True)
    text = fileio.format_mc_report(report, config.seed)
    fileio.write_text(config.output_path("mc_report.txt"), text)
    n_reps = fileio.write_mc_reps_csv(config.output_path("mc_reps.csv"),
                                      report)
    outputs = {"mc_report.txt": 1, "mc_reps.csv": n_reps}

    if args.emit_dataset:
        if spec.p != len(fileio.CANONICAL_COLUMNS):
            raise ValidationError(
                "--emit-dataset requires p = 9 so generated covariates fill "
                "the canonical dataset columns", p=spec.p)
        draw = generate(spec)
        n = draw.dataset.n_rows
        n_cols = max(1, int(np.ceil(np.sqrt(n))))
        idx = np.arange(n)
        centers = np.column_stack([(idx % n_cols) + 0.5,
                                   -((idx // n_cols) + 0.5)])
        X = FeatureMatrix(column_names=fileio.CANONICAL_COLUMNS,
                          values=draw.dataset.X.values,
                          row_ids=tuple(int(i) for i in idx))
        n_out = fileio.write_dataset_csv(args.emit_dataset, idx, centers, X,
                                         draw.dataset.t, draw.dataset.y)
        fileio.write_scaler_json(fileio.scaler_sidecar_path(args.emit_dataset),
                                 draw.scaler)
        outputs[args.emit_dataset] = n_out

    fileio.write_manifest(
        config.output_path("manifest_simulate.json"),
        command="simulate", config_dict=config_dict(config),
        seed=config.seed, inputs={}, outputs=outputs,
        counts={"n_failed": report.n_failed})
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cropcate",
        description="Heterogeneous treatment effects of crop diversification "
                    "on gridded outcomes: ingest, fit, report, interpret, "
                    "simulate.")
    sub = parser.add_subparsers(dest="command", required=True)

    commands = (
        ("ingest", cmd_ingest,
         "Clip parcels to the grid, build treatment and covariates, and "
         "write the analysis dataset."),
        ("fit", cmd_fit,
         "Run the first-stage diagnostic and the cross-fitted estimator; "
         "persist the effect model."),
        ("report", cmd_report,
         "Write per-cell effect estimates and the aggregate summary."),
        ("interpret", cmd_interpret,
         "Fit the explanation tree and write per-covariate effect curves."),
        ("simulate", cmd_simulate,
         "Run the synthetic-data Monte Carlo harness."),
    )
    for name, func, help_text in commands:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", default=None,
                         help="INI config file (defaults apply when omitted)")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--threads", type=int, default=None)
        cmd.add_argument("--folds", type=int, default=None)
        cmd.add_argument("--trim-lo", dest="trim_lo", type=float, default=None)
        cmd.add_argument("--trim-hi", dest="trim_hi", type=float, default=None)
        cmd.add_argument("--output-dir", dest="output_dir", default=None)
        cmd.set_defaults(func=func)
        if name in ("ingest", "report"):
            cmd.add_argument("--agricultural-only", dest="agricultural_only",
                             action="store_true",
                             help="restrict to cells meeting the agricultural "
                                  "coverage threshold")
        if name == "simulate":
            cmd.add_argument("--reps", type=int, default=None)
            cmd.add_argument("--n", type=int, default=None)
            cmd.add_argument("--theta", default=None,
                             help="effect form, e.g. constant:5.0")
            cmd.add_argument("--emit-dataset", dest="emit_dataset",
                             default=None,
                             help="also write one generated dataset (needs "
                                  "p = 9) to this path")
    return parser


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for attr in ("seed", "threads", "folds", "trim_lo", "trim_hi",
                 "output_dir"):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[attr] = value
    if overrides:
        config = replace(config, **overrides)
    config.validate()
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        return args.func(config, args)
    except (SchemaError, GeometryError, SingleClassError,
            ValidationError) as exc:
        return _fail(EXIT_SCHEMA, exc)
    except NoOverlapError as exc:
        return _fail(EXIT_NO_OVERLAP, exc)
    except (RankDeficientError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)


def _fail(code: int, exc: Exception) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
