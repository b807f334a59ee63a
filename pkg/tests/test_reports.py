import numpy as np
import pytest

from guidedretrain.config import ConfigError, ExperimentConfig, parse_config
from guidedretrain.reports import (
    COMPARISON_CSV,
    emit_plot_data,
    POINTS_CSV,
    SUMMARY_CSV,
    TIMING_CSV,
    compute_trend,
    consistency_problems,
    run_pipeline,
    sha256_file,
    write_summary_csv,
)
from guidedretrain.retrain import ExperimentRecord, RetrainRun


def mini_config(out, **overrides) -> ExperimentConfig:
    base = dict(
        synthetic_classes=4,
        synthetic_per_class_train=30,
        synthetic_per_class_test=10,
        synthetic_image_size=8,
        synthetic_noise_sigma=1.0,
        train_epochs=3,
        retrain_epochs=1,
        attack_fraction=0.5,
        metrics=("RANDOM", "NC"),
        configs=("C2", "C3"),
        out=str(out),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


DETERMINISTIC_FILES = (POINTS_CSV, SUMMARY_CSV, COMPARISON_CSV, "plot_c2.csv", "plot_c3.csv",
                       "scores_random.csv", "scores_nc.csv", "model.grcnn")


def test_pipeline_produces_reports(tmp_path):
    cfg = mini_config(tmp_path / "out")
    bundle = run_pipeline(cfg, workers=1)
    assert bundle.consistency_ok
    out = bundle.out_dir
    for name in DETERMINISTIC_FILES + (TIMING_CSV, "manifest.txt"):
        assert (out / name).exists(), name

    points = (out / POINTS_CSV).read_text().splitlines()
    assert points[0].startswith("config,metric,point_index")
    assert len(points) == 1 + 2 * 2 * 20  # 2 configs x 2 metrics x 20 points

    summary = (out / SUMMARY_CSV).read_text().splitlines()
    assert len(summary) == 1 + 4
    header = summary[0].split(",")
    assert "original_accuracy" in header and "resource" in header

    plot = (out / "plot_c2.csv").read_text().splitlines()
    assert len(plot) == 1 + 2 * 20  # 2 metrics x 20 points
    rows = [line.split(",") for line in plot[1:]]
    assert rows == sorted(rows, key=lambda r: (r[0], int(r[1])))
    for r in rows:
        assert 0.0 <= float(r[2]) <= 1.0

    timing = (out / TIMING_CSV).read_text().splitlines()
    assert timing[0] == "metric,seconds,duration"
    assert len(timing) == 1 + 2
    for line in timing[1:]:
        metric, seconds, duration = line.split(",")
        assert float(seconds) >= 0.0
        assert len(duration) == 8 and duration.count(":") == 2


def test_pipeline_deterministic_reports(tmp_path):
    a = run_pipeline(mini_config(tmp_path / "a"), workers=1)
    b = run_pipeline(mini_config(tmp_path / "b"), workers=1)
    for name in DETERMINISTIC_FILES:
        assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes(), name


def test_pipeline_parallel_matches_sequential(tmp_path):
    a = run_pipeline(mini_config(tmp_path / "a"), workers=1)
    b = run_pipeline(mini_config(tmp_path / "b"), workers=3)
    for name in (POINTS_CSV, SUMMARY_CSV):
        assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes(), name


def test_manifest_hashes_match_files(tmp_path):
    bundle = run_pipeline(mini_config(tmp_path / "out"), workers=1)
    manifest = (bundle.out_dir / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "status = ok"
    in_files = False
    checked = 0
    for line in manifest:
        if line == "[files]":
            in_files = True
            continue
        if line.startswith("[") and line != "[files]":
            in_files = False
            continue
        if in_files:
            digest, name = line.split("  ", 1)
            assert sha256_file(bundle.out_dir / name) == digest, name
            checked += 1
    assert checked >= len(DETERMINISTIC_FILES)


def test_pipeline_failure_marker(tmp_path):
    cfg = mini_config(tmp_path / "out", dataset="idx",
                      idx_train_images="missing", idx_train_labels="missing",
                      idx_test_images="missing", idx_test_labels="missing")
    with pytest.raises(FileNotFoundError):
        run_pipeline(cfg, workers=1)
    manifest = (tmp_path / "out" / "manifest.txt").read_text()
    assert "status = failed: data" in manifest


def test_summary_renders_resource_both_ways(tmp_path):
    # a hand-built record renders its ratio as "14400/36366" and 0.3960
    runs = tuple(
        RetrainRun("C2", "DSA", i, size, None, acc, acc, acc, 0.0)
        for i, (size, acc) in enumerate([(10800, 0.91), (14400, 0.953), (36366, 0.95)])
    )
    record = ExperimentRecord("C2", "DSA", runs, 0.953, 14400, 36366,
                              14400 / 36366, metric_seconds=95.0)
    path = tmp_path / "summary.csv"
    write_summary_csv([record], original_accuracy=0.589, path=path)
    text = path.read_text()
    assert "14400/36366" in text
    assert "0.3960" in text
    assert "0.589" in text
    assert "0.953" in text


def test_consistency_detects_mismatch(tmp_path):
    points = tmp_path / "points.csv"
    summary = tmp_path / "summary.csv"
    points.write_text(
        "config,metric,point_index,input_size,pool_total,"
        "accuracy_test_star,accuracy_test,accuracy_adv_test\n"
        "C2,DSA,0,10,20,0.5,0.5,0.5\n"
        "C2,DSA,1,20,20,0.7,0.7,0.7\n")
    summary.write_text(
        "config,metric,original_accuracy,best_accuracy,inputs_at_best,"
        "pool_total,resource,resource_utilization\n"
        "C2,DSA,0.400,0.700,20,20,20/20,1.0000\n")
    assert consistency_problems(points, summary) == []
    summary.write_text(
        "config,metric,original_accuracy,best_accuracy,inputs_at_best,"
        "pool_total,resource,resource_utilization\n"
        "C2,DSA,0.400,0.900,20,20,20/20,1.0000\n")
    assert any("best_accuracy" in p for p in consistency_problems(points, summary))


def test_trend_report_smoke(tmp_path):
    cfg = mini_config(tmp_path / "out", synthetic_per_class_train=20,
                      synthetic_per_class_test=8, train_epochs=2)
    report = compute_trend(cfg, seeds=[5, 6], out_dir=tmp_path / "out")
    assert len(report.rows) == 2 * 3  # 2 seeds x (LSA, DSA, RANDOM)
    assert report.mean_sa_best > 0
    assert report.mean_random > 0
    assert isinstance(report.sa_reaches_with_fewer_inputs, bool)
    trend = (tmp_path / "out" / "trend.csv").read_text().splitlines()
    assert trend[0] == "seed,metric,final_accuracy,size_at_95pct"
    assert len(trend) == 1 + 6
    summary = (tmp_path / "out" / "trend_summary.csv").read_text()
    assert "mean_size_at_95pct_sa_best" in summary
    assert "sa_reaches_with_fewer_inputs" in summary


def test_config_parsing_round_trip():
    text = """
    # comment
    dataset = synthetic
    synthetic.per_class_train = 40
    metrics = dsa, random
    configs = C2
    seed.init = 99
    out = results
    """
    cfg = parse_config(text)
    assert cfg.synthetic_per_class_train == 40
    assert cfg.metrics == ("DSA", "RANDOM")
    assert cfg.configs == ("C2",)
    assert cfg.seed_init == 99
    assert cfg.out == "results"


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError):
        parse_config("nonsense = 1")
    with pytest.raises(ConfigError):
        parse_config("train.epochs = many")
    with pytest.raises(ConfigError):
        parse_config("metrics = XYZ")
    with pytest.raises(ConfigError):
        parse_config("dataset = idx")  # missing file paths
    with pytest.raises(ConfigError):
        parse_config("out = a\nout = b")


def test_emit_plot_data_four_metrics_c1(tmp_path):
    cfg = mini_config(tmp_path / "out", metrics=("LSA", "DSA", "NC", "RANDOM"), configs=("C1",),
                      synthetic_per_class_train=20, synthetic_per_class_test=8, train_epochs=2)
    bundle = run_pipeline(cfg, workers=1)
    paths = emit_plot_data(bundle)
    rows = (paths["C1"]).read_text().splitlines()
    assert len(rows) == 1 + 4 * 20  # 4 metrics x 20 points


def test_single_metric_single_config_points(tmp_path):
    cfg = mini_config(tmp_path / "out", metrics=("RANDOM",), configs=("C3",),
                      synthetic_per_class_train=20, synthetic_per_class_test=8, train_epochs=1)
    bundle = run_pipeline(cfg, workers=1)
    lines = (bundle.out_dir / POINTS_CSV).read_text().splitlines()
    assert len(lines) == 1 + 20
