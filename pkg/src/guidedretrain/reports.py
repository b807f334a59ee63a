"""Pipeline orchestration and report emission.

A run writes one directory of CSV artifacts mirroring the study's tables:
per-point accuracies, a summary with best accuracy and resource utilization
per (configuration, metric), the C2-at-C3-budget comparison, metric timing,
and per-configuration plot data. Reports are byte-deterministic for a fixed
configuration except timing.csv and the manifest. A consistency pass
recomputes every summary figure from the per-point CSV before the manifest
is sealed.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .attack import AttackConfig, build_augmented_sets
from .config import ExperimentConfig, config_echo, with_overrides
from .data import generate_synthetic, load_idx_dataset
from .metrics import GuidanceConfig, format_duration, scores_to_csv, timed_scoring
from .model import (
    Dataset,
    ModelState,
    TrainParams,
    accuracy,
    build_model,
    desk_architecture,
    save_model,
    train,
)
from .retrain import RetrainHP, compare_records, run_experiment

MODEL_FILE = "model.grcnn"
POINTS_CSV = "points.csv"
SUMMARY_CSV = "summary.csv"
COMPARISON_CSV = "comparison.csv"
TIMING_CSV = "timing.csv"
MANIFEST = "manifest.txt"
TREND_CSV = "trend.csv"
TREND_SUMMARY_CSV = "trend_summary.csv"


@dataclass
class ReportBundle:
    out_dir: Path
    config: ExperimentConfig
    original_accuracy: float
    records: list
    files: dict
    consistency_ok: bool


def prepare_data(cfg: ExperimentConfig):
    if cfg.dataset == "synthetic":
        train_set = generate_synthetic(cfg.synthetic_classes, cfg.synthetic_per_class_train,
                                       cfg.synthetic_image_size, cfg.synthetic_noise_sigma,
                                       seed=cfg.synthetic_seed)
        test_set = generate_synthetic(cfg.synthetic_classes, cfg.synthetic_per_class_test,
                                      cfg.synthetic_image_size, cfg.synthetic_noise_sigma,
                                      seed=cfg.synthetic_seed + 1)
        return train_set, test_set
    train_set = load_idx_dataset(cfg.idx_train_images, cfg.idx_train_labels)
    test_set = load_idx_dataset(cfg.idx_test_images, cfg.idx_test_labels,
                                class_count=train_set.class_count)
    return train_set, test_set


def architecture_for(cfg: ExperimentConfig, data: Dataset):
    h, w, c = data.images.shape[1:]
    return desk_architecture(input_shape=(h, w, c), classes=data.class_count)


def train_original(cfg: ExperimentConfig, train_set: Dataset) -> ModelState:
    model = build_model(architecture_for(cfg, train_set), seed=cfg.seed_init)
    return train(model, train_set, TrainParams(
        epochs=cfg.train_epochs, batch_size=cfg.train_batch_size,
        lr=cfg.train_lr, momentum=cfg.train_momentum, shuffle_seed=cfg.seed_shuffle))


def guidance_config(cfg: ExperimentConfig) -> GuidanceConfig:
    dsa_layers = tuple(p.strip() for p in cfg.dsa_layers.split(",") if p.strip()) or None
    return GuidanceConfig(
        nc_threshold=cfg.nc_threshold,
        lsa_layer=cfg.lsa_layer or None,
        lsa_variance_threshold=cfg.lsa_variance_threshold,
        dsa_layers=dsa_layers,
        random_seed=cfg.seed_random_metric,
    )


def retrain_hp(cfg: ExperimentConfig) -> RetrainHP:
    return RetrainHP(
        epochs=cfg.retrain_epochs, batch_size=cfg.retrain_batch_size,
        lr=cfg.retrain_lr, momentum=cfg.retrain_momentum,
        shuffle_seed=cfg.seed_shuffle,
        fresh_init_seed=cfg.seed_init + 1,  # C1 restarts differ from M's init
    )


# ------------------------------------------------------------- CSV writers


def write_points_csv(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("config,metric,point_index,input_size,pool_total,"
                 "accuracy_test_star,accuracy_test,accuracy_adv_test\n")
        for rec in records:
            for r in rec.runs:
                fh.write(f"{rec.kind},{rec.metric},{r.point_index},{r.input_size},"
                         f"{rec.pool_total},{r.accuracy_test_star!r},"
                         f"{r.accuracy_test!r},{r.accuracy_adv_test!r}\n")


def write_summary_csv(records, original_accuracy: float, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("config,metric,original_accuracy,best_accuracy,inputs_at_best,"
                 "pool_total,resource,resource_utilization\n")
        for rec in records:
            fh.write(f"{rec.kind},{rec.metric},{original_accuracy:.3f},"
                     f"{rec.best_accuracy:.3f},{rec.best_input_size},{rec.pool_total},"
                     f"{rec.resource_string()},{rec.resource_utilization:.4f}\n")


def write_comparison_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("config,metric,accuracy,inputs_used,pool_total,resource,flagged\n")
        for row in rows:
            fh.write(f"{row.kind},{row.metric},{row.accuracy:.3f},{row.inputs_used},"
                     f"{row.pool_total},{row.resource_string()},{int(row.flagged)}\n")


def write_timing_csv(timings, path) -> None:
    """timings: sequence of (metric, wall seconds)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("metric,seconds,duration\n")
        for metric, seconds in timings:
            fh.write(f"{metric},{seconds:.9g},{format_duration(seconds)}\n")


def write_plot_csvs(records, out_dir: Path) -> dict:
    """One CSV per configuration: metric,input_size,accuracy_test_star."""
    paths = {}
    kinds = sorted({rec.kind for rec in records})
    for kind in kinds:
        rows = []
        for rec in records:
            if rec.kind != kind:
                continue
            for r in rec.runs:
                rows.append((rec.metric, r.input_size, r.accuracy_test_star))
        rows.sort(key=lambda t: (t[0], t[1]))
        path = out_dir / f"plot_{kind.lower()}.csv"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("metric,input_size,accuracy_test_star\n")
            for metric, size, acc in rows:
                fh.write(f"{metric},{size},{acc!r}\n")
        paths[kind] = path
    return paths


def emit_plot_data(bundle: "ReportBundle") -> dict:
    """Regenerate the per-configuration plot CSVs from a bundle's records."""
    return write_plot_csvs(bundle.records, bundle.out_dir)


def consistency_problems(points_path, summary_path) -> list[str]:
    """Recompute every summary figure from the per-point CSV; list mismatches."""
    by_key: dict[tuple, list[tuple[int, float]]] = {}
    pool_totals: dict[tuple, int] = {}
    with open(points_path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            row = dict(zip(header, line.strip().split(",")))
            key = (row["config"], row["metric"])
            by_key.setdefault(key, []).append(
                (int(row["input_size"]), float(row["accuracy_test_star"])))
            pool_totals[key] = int(row["pool_total"])
    problems = []
    with open(summary_path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            row = dict(zip(header, line.strip().split(",")))
            key = (row["config"], row["metric"])
            points = by_key.get(key)
            if points is None:
                problems.append(f"{key}: summary row without per-point rows")
                continue
            best = max(acc for _, acc in points)
            u = min(size for size, acc in points if acc == best)
            total = pool_totals[key]
            checks = [
                ("best_accuracy", f"{best:.3f}"),
                ("inputs_at_best", str(u)),
                ("pool_total", str(total)),
                ("resource", f"{u}/{total}"),
                ("resource_utilization", f"{u / total:.4f}"),
            ]
            for column, expected in checks:
                if row[column] != expected:
                    problems.append(f"{key}: {column} is {row[column]}, recomputed {expected}")
    return problems


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir: Path, cfg: ExperimentConfig, files: dict, status: str,
                   stage_seconds: dict | None = None) -> Path:
    path = out_dir / MANIFEST
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"status = {status}\n")
        fh.write(f"created_utc = {datetime.now(timezone.utc).isoformat()}\n")
        fh.write("[config]\n")
        for line in config_echo(cfg):
            fh.write(line + "\n")
        fh.write("[files]\n")
        for name in sorted(files):
            fh.write(f"{sha256_file(files[name])}  {name}\n")
        if stage_seconds:
            fh.write("[timings]\n")
            for stage in sorted(stage_seconds):
                fh.write(f"{stage}_seconds = {stage_seconds[stage]:.3f}\n")
    return path


# ------------------------------------------------------------- pipeline


def run_pipeline(cfg: ExperimentConfig, workers: int | None = None) -> ReportBundle:
    """Full run: train M, attack, score, sweep, report.

    On a stage failure the manifest is still written with a failure marker
    naming the stage, partial outputs left in place, and the error re-raised.
    """
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files: dict = {}
    stage_seconds: dict = {}
    stage = "data"
    try:
        t = time.monotonic()
        train_set, test_set = prepare_data(cfg)
        stage_seconds["data"] = time.monotonic() - t

        stage = "train"
        t = time.monotonic()
        original = train_original(cfg, train_set)
        save_model(original, out_dir / MODEL_FILE)
        files[MODEL_FILE] = out_dir / MODEL_FILE
        stage_seconds["train"] = time.monotonic() - t

        stage = "attack"
        t = time.monotonic()
        sets = build_augmented_sets(original, train_set, test_set, cfg.attack_fraction,
                                    AttackConfig(epsilon=cfg.attack_epsilon),
                                    seed=cfg.seed_attack)
        original_accuracy = accuracy(original, sets.test_star)
        stage_seconds["attack"] = time.monotonic() - t

        stage = "score"
        t = time.monotonic()
        guidance = guidance_config(cfg)
        scored = {}
        for metric in cfg.metrics:
            scored[metric] = timed_scoring(metric, original, sets.train_star, guidance)
            score_file = f"scores_{metric.lower()}.csv"
            scores_to_csv(scored[metric][0], out_dir / score_file)
            files[score_file] = out_dir / score_file
        write_timing_csv([(m, scored[m][1]) for m in cfg.metrics], out_dir / TIMING_CSV)
        files[TIMING_CSV] = out_dir / TIMING_CSV
        stage_seconds["score"] = time.monotonic() - t

        stage = "retrain"
        t = time.monotonic()
        hp = retrain_hp(cfg)
        records = []
        for kind in cfg.configs:
            for metric in cfg.metrics:
                records.append(run_experiment(original, sets, metric, kind, hp,
                                              guidance, scored=scored[metric],
                                              workers=workers))
        stage_seconds["retrain"] = time.monotonic() - t

        stage = "report"
        t = time.monotonic()
        write_points_csv(records, out_dir / POINTS_CSV)
        files[POINTS_CSV] = out_dir / POINTS_CSV
        write_summary_csv(records, original_accuracy, out_dir / SUMMARY_CSV)
        files[SUMMARY_CSV] = out_dir / SUMMARY_CSV
        write_comparison_csv(compare_records(records), out_dir / COMPARISON_CSV)
        files[COMPARISON_CSV] = out_dir / COMPARISON_CSV
        for kind, path in write_plot_csvs(records, out_dir).items():
            files[path.name] = path
        problems = consistency_problems(out_dir / POINTS_CSV, out_dir / SUMMARY_CSV)
        if problems:
            raise AssertionError("summary inconsistent with per-point data: " + "; ".join(problems))
        stage_seconds["report"] = time.monotonic() - t
    except Exception:
        write_manifest(out_dir, cfg, files, status=f"failed: {stage}",
                       stage_seconds=stage_seconds)
        raise
    write_manifest(out_dir, cfg, files, status="ok", stage_seconds=stage_seconds)
    files[MANIFEST] = out_dir / MANIFEST
    return ReportBundle(
        out_dir=out_dir,
        config=cfg,
        original_accuracy=original_accuracy,
        records=records,
        files=files,
        consistency_ok=True,
    )


# ------------------------------------------------------------- trend report


@dataclass(frozen=True)
class TrendRow:
    seed: int
    metric: str
    final_accuracy: float
    size_at_95pct: int


@dataclass
class TrendReport:
    rows: list
    mean_sa_best: float
    mean_random: float
    sa_reaches_with_fewer_inputs: bool


def size_at_fraction_of_final(runs, fraction: float = 0.95) -> int:
    """Smallest sweep size whose accuracy reaches fraction * final accuracy."""
    final = runs[-1].accuracy_test_star
    threshold = fraction * final
    for r in runs:
        if r.accuracy_test_star >= threshold:
            return r.input_size
    return runs[-1].input_size


def compute_trend(cfg: ExperimentConfig, seeds, out_dir, workers: int | None = None) -> TrendReport:
    """SA-vs-Random comparison under C2 across seeds.

    For every seed, retrains C2 sweeps ordered by LSA, DSA and Random and
    finds the smallest input size reaching 95% of each curve's final
    accuracy. The report compares the mean over seeds of the better SA
    metric against Random and is emitted regardless of which side wins.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[TrendRow] = []
    sa_sizes = []
    random_sizes = []
    for seed in seeds:
        run_cfg = with_overrides(
            cfg,
            metrics=("LSA", "DSA", "RANDOM"),
            configs=("C2",),
            synthetic_seed=seed,
            seed_init=seed + 1,
            seed_shuffle=seed + 2,
            seed_attack=seed + 3,
            seed_random_metric=seed + 4,
        )
        train_set, test_set = prepare_data(run_cfg)
        original = train_original(run_cfg, train_set)
        sets = build_augmented_sets(original, train_set, test_set, run_cfg.attack_fraction,
                                    AttackConfig(epsilon=run_cfg.attack_epsilon),
                                    seed=run_cfg.seed_attack)
        guidance = guidance_config(run_cfg)
        hp = retrain_hp(run_cfg)
        per_metric = {}
        for metric in run_cfg.metrics:
            record = run_experiment(original, sets, metric, "C2", hp, guidance,
                                    workers=workers)
            size = size_at_fraction_of_final(record.runs)
            per_metric[metric] = size
            rows.append(TrendRow(seed=seed, metric=metric,
                                 final_accuracy=record.runs[-1].accuracy_test_star,
                                 size_at_95pct=size))
        sa_sizes.append(min(per_metric["LSA"], per_metric["DSA"]))
        random_sizes.append(per_metric["RANDOM"])
    mean_sa = sum(sa_sizes) / len(sa_sizes)
    mean_random = sum(random_sizes) / len(random_sizes)
    report = TrendReport(
        rows=rows,
        mean_sa_best=mean_sa,
        mean_random=mean_random,
        sa_reaches_with_fewer_inputs=mean_sa <= mean_random,
    )
    with open(out_dir / TREND_CSV, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("seed,metric,final_accuracy,size_at_95pct\n")
        for row in rows:
            fh.write(f"{row.seed},{row.metric},{row.final_accuracy!r},{row.size_at_95pct}\n")
    with open(out_dir / TREND_SUMMARY_CSV, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("quantity,value\n")
        fh.write(f"mean_size_at_95pct_sa_best,{mean_sa!r}\n")
        fh.write(f"mean_size_at_95pct_random,{mean_random!r}\n")
        fh.write(f"sa_reaches_with_fewer_inputs,{int(report.sa_reaches_with_fewer_inputs)}\n")
    return report
