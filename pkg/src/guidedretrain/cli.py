"""Command-line harness.

Subcommands walk the pipeline end to end or stage by stage:

  train    train the original model M, save it to <out>/model.grcnn
  attack   build the augmented sets, export them as IDX files
  score    compute guidance metrics over Train*, write score and timing CSVs
  retrain  run the requested (configuration, metric) sweeps, write points.csv
  run      full pipeline plus summary/comparison/plot reports and manifest
  report   rebuild summary/comparison/plot CSVs from an existing points.csv;
           --trend-seeds N additionally runs the multi-seed SA-vs-Random
           comparison

Stages are deterministic functions of the configuration: stage subcommands
recompute what they need from the config seeds (loading <out>/model.grcnn
when present) instead of passing lossy intermediate files around. GR_THREADS
caps the per-point retraining fan-out.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .attack import AttackConfig, build_augmented_sets
from .config import ConfigError, ExperimentConfig, load_config, with_overrides
from .data import save_idx_dataset
from .metrics import scores_to_csv, timed_scoring
from .model import accuracy, load_model, save_model
from .reports import (
    COMPARISON_CSV,
    MODEL_FILE,
    POINTS_CSV,
    SUMMARY_CSV,
    TIMING_CSV,
    compute_trend,
    consistency_problems,
    guidance_config,
    prepare_data,
    retrain_hp,
    run_pipeline,
    train_original,
    write_comparison_csv,
    write_plot_csvs,
    write_points_csv,
    write_summary_csv,
    write_timing_csv,
)
from .retrain import ExperimentRecord, RetrainRun, compare_records, run_experiment


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidedretrain",
                                     description="Metric-guided adversarial retraining harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "attack", "score", "retrain", "run", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed-init", type=int, default=None)
        p.add_argument("--seed-shuffle", type=int, default=None)
        p.add_argument("--seed-attack", type=int, default=None)
        p.add_argument("--seed-random-metric", type=int, default=None)
        if name == "report":
            p.add_argument("--trend-seeds", type=int, default=0,
                           help="also run the multi-seed SA-vs-Random trend comparison")
    return parser


def _effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.out is not None:
        overrides["out"] = str(args.out)
    for attr, field_name in (("seed_init", "seed_init"), ("seed_shuffle", "seed_shuffle"),
                             ("seed_attack", "seed_attack"),
                             ("seed_random_metric", "seed_random_metric")):
        value = getattr(args, attr)
        if value is not None:
            overrides[field_name] = value
    return with_overrides(cfg, **overrides) if overrides else cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _original_model(cfg: ExperimentConfig, train_set):
    """Load <out>/model.grcnn when present, else train and save it."""
    path = Path(cfg.out) / MODEL_FILE
    if path.exists():
        return load_model(path)
    model = train_original(cfg, train_set)
    save_model(model, path)
    return model


def cmd_train(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    train_set, test_set = prepare_data(cfg)
    model = train_original(cfg, train_set)
    save_model(model, out / MODEL_FILE)
    print(f"trained M: clean test accuracy {accuracy(model, test_set):.3f}, "
          f"saved {out / MODEL_FILE}")
    return 0


def cmd_attack(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    train_set, test_set = prepare_data(cfg)
    model = _original_model(cfg, train_set)
    sets = build_augmented_sets(model, train_set, test_set, cfg.attack_fraction,
                                AttackConfig(epsilon=cfg.attack_epsilon), seed=cfg.seed_attack)
    for name, data in (("adv_train", sets.adv_train), ("adv_test", sets.adv_test)):
        save_idx_dataset(data, out / f"{name}-images-idx3-ubyte", out / f"{name}-labels-idx1-ubyte")
    print(f"adv_train {len(sets.adv_train)} inputs, adv_test {len(sets.adv_test)} inputs; "
          f"M accuracy on Test* {accuracy(model, sets.test_star):.3f}")
    return 0


def cmd_score(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    train_set, test_set = prepare_data(cfg)
    model = _original_model(cfg, train_set)
    sets = build_augmented_sets(model, train_set, test_set, cfg.attack_fraction,
                                AttackConfig(epsilon=cfg.attack_epsilon), seed=cfg.seed_attack)
    guidance = guidance_config(cfg)
    timings = []
    for metric in cfg.metrics:
        scores, seconds = timed_scoring(metric, model, sets.train_star, guidance)
        scores_to_csv(scores, out / f"scores_{metric.lower()}.csv")
        timings.append((metric, seconds))
        print(f"{metric}: {len(scores)} scores in {seconds:.3f}s")
    write_timing_csv(timings, out / TIMING_CSV)
    return 0


def cmd_retrain(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    train_set, test_set = prepare_data(cfg)
    model = _original_model(cfg, train_set)
    sets = build_augmented_sets(model, train_set, test_set, cfg.attack_fraction,
                                AttackConfig(epsilon=cfg.attack_epsilon), seed=cfg.seed_attack)
    guidance = guidance_config(cfg)
    hp = retrain_hp(cfg)
    records = []
    for kind in cfg.configs:
        for metric in cfg.metrics:
            record = run_experiment(model, sets, metric, kind, hp, guidance)
            records.append(record)
            print(f"{kind}/{metric}: best {record.best_accuracy:.3f} "
                  f"at {record.resource_string()}")
    write_points_csv(records, out / POINTS_CSV)
    return 0


def cmd_run(cfg: ExperimentConfig) -> int:
    bundle = run_pipeline(cfg)
    print(f"M accuracy on Test*: {bundle.original_accuracy:.3f}")
    for record in bundle.records:
        print(f"{record.kind}/{record.metric}: best {record.best_accuracy:.3f} "
              f"at {record.resource_string()} "
              f"(u/Tn = {record.resource_utilization:.4f})")
    print(f"reports in {bundle.out_dir}")
    return 0


def _records_from_points(path) -> list[ExperimentRecord]:
    """Rebuild summary-grade records from a per-point CSV."""
    groups: dict[tuple, list] = {}
    totals: dict[tuple, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            row = dict(zip(header, line.strip().split(",")))
            key = (row["config"], row["metric"])
            groups.setdefault(key, []).append(row)
            totals[key] = int(row["pool_total"])
    records = []
    for key in groups:  # first-appearance order matches the original emission
        kind, metric = key
        runs = tuple(
            RetrainRun(kind, metric, int(r["point_index"]), int(r["input_size"]), None,
                       float(r["accuracy_test_star"]), float(r["accuracy_test"]),
                       float(r["accuracy_adv_test"]), 0.0)
            for r in sorted(groups[key], key=lambda r: int(r["point_index"]))
        )
        best = max(r.accuracy_test_star for r in runs)
        u = min(r.input_size for r in runs if r.accuracy_test_star == best)
        records.append(ExperimentRecord(kind, metric, runs, best, u, totals[key],
                                        u / totals[key], 0.0))
    return records


def cmd_report(cfg: ExperimentConfig, trend_seeds: int = 0) -> int:
    out = _out_dir(cfg)
    points = out / POINTS_CSV
    if not points.exists():
        print(f"error: {points} not found; run `retrain` or `run` first", file=sys.stderr)
        return 1
    records = _records_from_points(points)
    train_set, test_set = prepare_data(cfg)
    model = _original_model(cfg, train_set)
    sets = build_augmented_sets(model, train_set, test_set, cfg.attack_fraction,
                                AttackConfig(epsilon=cfg.attack_epsilon), seed=cfg.seed_attack)
    original_accuracy = accuracy(model, sets.test_star)
    write_summary_csv(records, original_accuracy, out / SUMMARY_CSV)
    write_comparison_csv(compare_records(records), out / COMPARISON_CSV)
    write_plot_csvs(records, out)
    problems = consistency_problems(points, out / SUMMARY_CSV)
    if problems:
        print("consistency check failed:", "; ".join(problems), file=sys.stderr)
        return 1
    print(f"summary rebuilt for {len(records)} experiment(s)")
    if trend_seeds > 0:
        seeds = [cfg.synthetic_seed + 100 * i for i in range(trend_seeds)]
        report = compute_trend(cfg, seeds, out)
        print(f"trend over {trend_seeds} seeds: mean size@95% "
              f"SA-best {report.mean_sa_best:.1f} vs Random {report.mean_random:.1f} "
              f"({'SA reaches with fewer inputs' if report.sa_reaches_with_fewer_inputs else 'Random reached faster here'})")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "attack":
            return cmd_attack(cfg)
        if args.command == "score":
            return cmd_score(cfg)
        if args.command == "retrain":
            return cmd_retrain(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "report":
            return cmd_report(cfg, trend_seeds=args.trend_seeds)
        raise AssertionError(f"unhandled command {args.command}")
    except Exception as exc:  # pipeline failures map to a nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
