import math

import numpy as np
import pytest
from scipy.stats import kendalltau

from guidedretrain.attack import AttackConfig, build_augmented_sets
from guidedretrain.autodiff import Conv2D, Dense, Relu
from guidedretrain.metrics import (
    DSA_ZERO_DENOMINATOR_SENTINEL,
    DsaIndex,
    GuidanceConfig,
    GuidanceScore,
    LsaEstimator,
    NCConfig,
    active_fraction,
    default_lsa_layer,
    dsa_from_trace,
    dsa_score,
    dsa_scores,
    fit_dsa,
    fit_lsa,
    format_duration,
    lsa_from_trace,
    lsa_score,
    lsa_scores,
    nc_score,
    nc_scores,
    order_inputs,
    random_score,
    scores_to_csv,
    scott_bandwidths,
    timed_scoring,
)
from guidedretrain.model import ArchitectureDescriptor, Dataset, ModelState, build_model, desk_architecture
from guidedretrain.rng import Pcg32


def tiny_cnn(classes=3, seed=0):
    arch = ArchitectureDescriptor(
        input_shape=(4, 4, 1),
        classes=classes,
        layers=(
            Conv2D("c1", filters=2, kernel=3, stride=1, padding="same"),
            Relu("r1"),
            Dense("d1", units=4),
            Relu("r2"),
            Dense("out", units=classes),
        ),
    )
    return build_model(arch, seed=seed)


def random_dataset(n, classes=3, seed=0, h=4, w=4):
    rng = Pcg32(seed)
    images = rng.uniforms(n * h * w).reshape(n, h, w, 1).astype(np.float32)
    labels = np.arange(n, dtype=np.int64) % classes
    return Dataset(images, labels, class_count=classes)


# ---------------------------------------------------------------- NC


def test_active_fraction_direct_counts():
    assert active_fraction([np.array([0.9, 0.2, 0.6, 0.4])], 0.5) == 0.5
    assert active_fraction([np.array([0.1, 0.2]), np.array([0.3])], 0.5) == 0.0
    assert active_fraction([np.array([0.9, 0.8]), np.array([0.7])], 0.5) == 1.0


def test_nc_zero_when_network_dead():
    # negative weights and zero bias with non-negative input: every relu
    # output is 0, all layers constant, so nothing counts as active
    arch = ArchitectureDescriptor(
        (2, 2, 1), 2,
        (Dense("d", 3), Relu("r"), Dense("out", 2)),
    )
    params = {
        "d.w": np.full((4, 3), -1.0, dtype=np.float32),
        "d.b": np.zeros(3, dtype=np.float32),
        "out.w": np.zeros((3, 2), dtype=np.float32),
        "out.b": np.zeros(2, dtype=np.float32),
    }
    m = ModelState(arch, params, init_seed=0)
    img = np.full((2, 2, 1), 0.5, dtype=np.float32)
    assert nc_score(m, img, NCConfig(threshold=0.5)) == 0.0


def test_nc_bounds_and_threshold_monotonicity():
    m = tiny_cnn()
    images = random_dataset(20).images
    prev = None
    for threshold in (0.0, 0.25, 0.5, 0.75, 1.0):
        vals = nc_scores(m, images, NCConfig(threshold=threshold))
        assert np.all(vals >= 0.0) and np.all(vals <= 1.0)
        if prev is not None:
            assert np.all(vals <= prev + 1e-12)
        prev = vals


def test_nc_matches_direct_count():
    m = tiny_cnn(seed=3)
    img = random_dataset(1, seed=5).images[0]
    cfg = NCConfig(threshold=0.5)
    # oracle: recompute from raw post-activation values
    from guidedretrain.model import activation_traces

    arch = m.architecture
    scaled = []
    for name in arch.neuron_layers():
        vals = activation_traces(m, img[None], [name])[0]
        lo, hi = vals.min(), vals.max()
        scaled.append((vals - lo) / (hi - lo) if hi > lo else np.zeros_like(vals))
    expected = active_fraction(scaled, cfg.threshold)
    assert nc_score(m, img, cfg) == expected


def test_nc_batching_invariant():
    m = tiny_cnn()
    images = random_dataset(15).images
    a = nc_scores(m, images, NCConfig(), batch_size=256)
    b = nc_scores(m, images, NCConfig(), batch_size=4)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- LSA


def test_scott_bandwidth_formula():
    rng = Pcg32(1)
    samples = rng.uniforms(50 * 3).reshape(50, 3)
    h = scott_bandwidths(samples)
    n, d = samples.shape
    for j in range(d):
        mean = sum(samples[:, j]) / n
        var = sum((v - mean) ** 2 for v in samples[:, j]) / (n - 1)
        expected = math.sqrt(var) * n ** (-1.0 / (d + 4))
        assert h[j] == pytest.approx(expected, rel=1e-12)


def test_fit_lsa_structure():
    m = tiny_cnn(classes=2)
    data = random_dataset(20, classes=2)
    est = fit_lsa(m, data, layer="d1", variance_threshold=0.0)
    assert set(est.class_traces) == {0, 1}
    assert est.class_traces[0].shape[0] == 10
    assert est.class_traces[1].shape[0] == 10
    for cls in (0, 1):
        assert np.all(est.bandwidths[cls] > 0)


def test_variance_filter_drops_constant_neuron():
    # relu kills a unit whose weights are all negative: constant zero output
    arch = ArchitectureDescriptor(
        (2, 2, 1), 2,
        (Dense("d1", 3), Relu("r1"), Dense("out", 2)),
    )
    w = np.array(
        [[1.0, -1.0, 0.5],
         [0.5, -1.0, 0.2],
         [0.2, -1.0, 0.1],
         [0.1, -1.0, 0.3]], dtype=np.float32)
    params = {
        "d1.w": w,
        "d1.b": np.zeros(3, dtype=np.float32),
        "out.w": np.zeros((3, 2), dtype=np.float32),
        "out.b": np.zeros(2, dtype=np.float32),
    }
    m = ModelState(arch, params, init_seed=0)
    data = random_dataset(12, classes=2, h=2, w=2)
    est = fit_lsa(m, data, layer="d1", variance_threshold=1e-8)
    assert 1 not in est.retained.tolist()
    assert 0 in est.retained.tolist()


def test_lsa_one_dimensional_oracle():
    # three 1-D reference traces with a known bandwidth; direct sum by hand
    refs = np.array([[0.0], [1.0], [2.0]], dtype=np.float64)
    h = np.array([0.5])
    est = LsaEstimator(layer="d1", retained=np.array([0]),
                       class_traces={0: refs}, bandwidths={0: h})
    query = np.array([0.5])
    expected_density = 0.0
    for r in (0.0, 1.0, 2.0):
        u = (0.5 - r) / 0.5
        expected_density += math.exp(-0.5 * u * u) / (0.5 * math.sqrt(2 * math.pi))
    expected_density /= 3
    expected = -math.log(expected_density + 1e-300)
    got = lsa_from_trace(est, query, 0)
    assert got == pytest.approx(expected, rel=1e-9)
    # frozen value of the same computation
    assert got == pytest.approx(1.1221403198737419, rel=1e-12)


def test_lsa_decreases_toward_class_mean():
    refs = Pcg32(3).normals(400).reshape(400, 1) * 0.3 + 1.0
    est = LsaEstimator(layer="d1", retained=np.array([0]),
                       class_traces={0: refs}, bandwidths={0: scott_bandwidths(refs)})
    center = float(refs.mean())
    vals = [lsa_from_trace(est, np.array([center + off]), 0) for off in (2.0, 1.0, 0.5, 0.0)]
    assert vals[0] > vals[1] > vals[2] > vals[3]


def test_lsa_minimal_at_single_training_trace():
    refs = np.array([[1.0, 2.0]])
    # single-row class: bandwidths supplied directly (fit would reject n=1)
    est = LsaEstimator(layer="d1", retained=np.array([0, 1]),
                       class_traces={0: refs}, bandwidths={0: np.array([0.3, 0.3])})
    at_ref = lsa_from_trace(est, np.array([1.0, 2.0]), 0)
    for off in (0.1, 0.5, 2.0):
        assert lsa_from_trace(est, np.array([1.0 + off, 2.0]), 0) > at_ref


def test_lsa_determinism_and_bulk_consistency():
    m = tiny_cnn(classes=2, seed=1)
    data = random_dataset(30, classes=2, seed=7)
    est = fit_lsa(m, data, layer="d1", variance_threshold=0.0)
    img = data.images[3]
    a = lsa_score(est, m, img)
    b = lsa_score(est, m, img)
    assert a == b
    bulk = lsa_scores(est, m, data.images)
    singles = np.array([lsa_score(est, m, data.images[i]) for i in range(len(data))])
    assert np.allclose(bulk, singles, rtol=1e-9, atol=1e-12)


def test_fit_lsa_rejects_small_class():
    m = tiny_cnn(classes=3)
    images = random_dataset(4, classes=3).images
    labels = np.array([0, 0, 1, 1])  # class 2 empty
    data = Dataset(images, labels, class_count=3)
    with pytest.raises(ValueError, match="class 2"):
        fit_lsa(m, data, layer="d1")


def test_default_lsa_layer_is_last_hidden_dense():
    assert default_lsa_layer(desk_architecture()) == "dense1"


# ---------------------------------------------------------------- DSA


def brute_force_dsa(index, trace, cls):
    """Exhaustive oracle with scalar left-to-right accumulation."""

    def dist(a, b):
        s = 0.0
        for x, y in zip(a, b):
            s += (x - y) ** 2
        return math.sqrt(s)

    best_a, dist_a = None, math.inf
    for row in index.class_traces[cls]:
        d = dist(trace, row)
        if d < dist_a:
            dist_a, best_a = d, row
    dist_b = math.inf
    for other, rows in index.class_traces.items():
        if other == cls:
            continue
        for row in rows:
            d = dist(best_a, row)
            if d < dist_b:
                dist_b = d
    if dist_b == 0.0:
        return DSA_ZERO_DENOMINATOR_SENTINEL
    return dist_a / dist_b


def test_dsa_one_dimensional_case():
    index = DsaIndex(layers=("d1",), class_traces={0: np.array([[1.0]]), 1: np.array([[3.0]])}, dim=1)
    assert dsa_from_trace(index, np.array([0.0]), 0) == 0.5


def test_dsa_zero_at_matching_trace():
    index = DsaIndex(
        layers=("d1",),
        class_traces={0: np.array([[1.0, 2.0], [3.0, 4.0]]), 1: np.array([[9.0, 9.0]])},
        dim=2,
    )
    assert dsa_from_trace(index, np.array([3.0, 4.0]), 0) == 0.0


def test_dsa_scaling_invariance():
    rng = Pcg32(11)
    traces = {0: rng.normals(20).reshape(10, 2), 1: rng.normals(16).reshape(8, 2)}
    index1 = DsaIndex(layers=("d1",), class_traces=traces, dim=2)
    index2 = DsaIndex(layers=("d1",), class_traces={c: 2.0 * t for c, t in traces.items()}, dim=2)
    q = np.array([0.3, -0.2])
    assert dsa_from_trace(index1, q, 0) == pytest.approx(dsa_from_trace(index2, 2.0 * q, 0), rel=1e-12)


def test_dsa_zero_denominator_sentinel():
    index = DsaIndex(
        layers=("d1",),
        class_traces={0: np.array([[1.0]]), 1: np.array([[1.0]])},  # duplicate across classes
        dim=1,
    )
    assert dsa_from_trace(index, np.array([5.0]), 0) == DSA_ZERO_DENOMINATOR_SENTINEL


def test_dsa_matches_brute_force_exactly():
    m = tiny_cnn(classes=3, seed=2)
    train = random_dataset(60, classes=3, seed=8)
    index = fit_dsa(m, train)
    assert index.dim == 2 * 16 + 4 + 3  # conv 4*4*2 + d1 + out
    queries = random_dataset(25, classes=3, seed=9)
    from guidedretrain.model import activation_traces, predict

    traces = activation_traces(m, queries.images, index.layers)
    pred, _ = predict(m, queries.images)
    for i in range(len(queries)):
        got = dsa_score(index, m, queries.images[i])
        want = brute_force_dsa(index, traces[i], int(pred[i]))
        assert got == want, i


def test_dsa_bulk_matches_single():
    m = tiny_cnn(classes=3, seed=2)
    train = random_dataset(40, classes=3, seed=8)
    index = fit_dsa(m, train)
    queries = random_dataset(12, classes=3, seed=10)
    bulk = dsa_scores(index, m, queries.images)
    singles = np.array([dsa_score(index, m, queries.images[i]) for i in range(len(queries))])
    assert np.allclose(bulk, singles, rtol=1e-12, atol=0)


def test_fit_dsa_rejects_empty_class():
    m = tiny_cnn(classes=3)
    images = random_dataset(4, classes=3).images
    data = Dataset(images, np.array([0, 0, 1, 1]), class_count=3)
    with pytest.raises(ValueError, match="class 2"):
        fit_dsa(m, data)


# ---------------------------------------------------------------- Random


def test_random_score_is_permutation():
    scores = random_score(range(100), seed=5)
    values = sorted(s.value for s in scores)
    assert values == [float(v) for v in range(100)]
    again = random_score(range(100), seed=5)
    assert [s.value for s in scores] == [s.value for s in again]


def test_random_seeds_nearly_uncorrelated():
    a = random_score(range(1000), seed=1)
    b = random_score(range(1000), seed=2)
    tau, _ = kendalltau([s.value for s in a], [s.value for s in b])
    assert abs(tau) < 0.1


# ---------------------------------------------------------------- ordering


def test_order_inputs_descending():
    scores = [
        GuidanceScore("a", "NC", 0.2),
        GuidanceScore("b", "NC", 0.9),
        GuidanceScore("c", "NC", 0.5),
    ]
    assert order_inputs(scores) == ["b", "c", "a"]


def test_order_inputs_ties_by_id():
    scores = [GuidanceScore(i, "NC", 1.0) for i in (3, 1, 2)]
    assert order_inputs(scores) == [1, 2, 3]


def test_order_inputs_reverse_is_ascending():
    rng = Pcg32(2)
    vals = rng.uniforms(50)
    scores = [GuidanceScore(i, "DSA", float(v)) for i, v in enumerate(vals)]
    descending = order_inputs(scores)
    ascending = [s.input_id for s in sorted(scores, key=lambda s: (s.value, -s.input_id))]
    assert descending == ascending[::-1]


def test_order_inputs_rejects_duplicates_and_mixed_metrics():
    with pytest.raises(ValueError):
        order_inputs([GuidanceScore(1, "NC", 0.1), GuidanceScore(1, "NC", 0.2)])
    with pytest.raises(ValueError):
        order_inputs([GuidanceScore(1, "NC", 0.1), GuidanceScore(2, "DSA", 0.2)])


# ---------------------------------------------------------------- timing


def test_timed_scoring_deterministic_scores():
    m = tiny_cnn(classes=3, seed=4)
    train = random_dataset(30, classes=3, seed=3)
    test = random_dataset(9, classes=3, seed=4)
    sets = build_augmented_sets(m, train, test, 0.5, AttackConfig(epsilon=0.1), seed=2)
    cfg = GuidanceConfig()
    for metric in ("NC", "LSA", "DSA", "RANDOM"):
        s1, t1 = timed_scoring(metric, m, sets.train_star, cfg)
        s2, t2 = timed_scoring(metric, m, sets.train_star, cfg)
        assert [s.value for s in s1] == [s.value for s in s2], metric
        assert len(s1) == len(sets.train_star)
        assert t1 >= 0 and t2 >= 0


def test_random_scoring_is_fast():
    _, seconds = timed_scoring("RANDOM", tiny_cnn(), random_dataset(5000), GuidanceConfig())
    assert seconds < 1.0


def test_format_duration():
    assert format_duration(0.0) == "00:00:00"
    assert format_duration(0.4) == "00:00:00"
    assert format_duration(95.0) == "00:01:35"
    assert format_duration(3 * 3600 + 17 * 60 + 38) == "03:17:38"
    with pytest.raises(ValueError):
        format_duration(-1.0)


def test_scores_csv_format(tmp_path):
    scores = [GuidanceScore(0, "LSA", 1.23456789012345), GuidanceScore(1, "LSA", 690.7755)]
    path = tmp_path / "scores.csv"
    scores_to_csv(scores, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "input_id,metric,value"
    assert lines[1] == "1.23456789".join(["0,LSA,", ""])
    assert len(lines) == 3
