"""Guidance metrics over Train*: NC, LSA, DSA and the Random baseline.

NC is the fraction of neurons whose per-input, per-layer min-max scaled
activation exceeds a threshold. LSA is the negative log of a diagonal
Gaussian kernel density (Scott bandwidths) of the input's trace under the
training traces of its predicted class. DSA is the distance to the nearest
same-predicted-class training trace divided by the distance from that trace
to the nearest trace of any other class. Random assigns a seeded permutation
rank. Ordering for retraining is descending score, ties broken by input id.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .autodiff import Dense, forward_eval
from .model import Dataset, ModelState, activation_traces, neuron_count, predict
from .rng import Pcg32

METRICS = ("NC", "LSA", "DSA", "RANDOM")

# finite stand-in for an undefined DSA ratio (zero denominator), keeps the
# ordering total
DSA_ZERO_DENOMINATOR_SENTINEL = 1e12

_LOG_2PI = float(np.log(2.0 * np.pi))
_DENSITY_FLOOR = 1e-300


@dataclass(frozen=True)
class NCConfig:
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")


@dataclass(frozen=True)
class GuidanceScore:
    input_id: int
    metric: str
    value: float


@dataclass(frozen=True)
class GuidanceConfig:
    """Per-metric knobs used by timed_scoring and the pipeline."""

    nc_threshold: float = 0.5
    lsa_layer: str | None = None  # default: last hidden dense layer
    lsa_variance_threshold: float = 1e-5
    dsa_layers: tuple | None = None  # default: every conv/dense layer
    random_seed: int = 0
    batch_size: int = 256


def active_fraction(scaled_layers, threshold: float) -> float:
    """Fraction of neurons with scaled activation strictly above threshold.

    `scaled_layers` is a sequence of 1-D arrays, one per layer, already
    scaled to [0, 1].
    """
    active = 0
    total = 0
    for vals in scaled_layers:
        vals = np.asarray(vals, dtype=np.float64)
        active += int((vals > threshold).sum())
        total += vals.size
    if total == 0:
        raise ValueError("no neurons selected")
    return active / total


def _scale_minmax(block: np.ndarray) -> np.ndarray:
    """Per-row min-max scaling; constant rows map to 0 (counted inactive)."""
    lo = block.min(axis=1, keepdims=True)
    hi = block.max(axis=1, keepdims=True)
    span = hi - lo
    out = np.zeros_like(block)
    np.divide(block - lo, span, out=out, where=span > 0)
    return out


def nc_scores(model: ModelState, images: np.ndarray, cfg: NCConfig,
              batch_size: int = 256) -> np.ndarray:
    """Neuron coverage of each image over all conv/dense post-activation neurons."""
    arch = model.architecture
    layers = arch.neuron_layers()
    sources = [arch.post_activation_source(name) for name in layers]
    graph = model.graph()
    images = np.asarray(images, dtype=np.float32)
    total = neuron_count(arch)
    out = np.empty(len(images), dtype=np.float64)
    for start in range(0, len(images), batch_size):
        state = forward_eval(graph, images[start:start + batch_size])
        n = state.batch
        active = np.zeros(n, dtype=np.int64)
        for src in sources:
            block = state.activations[src].reshape(n, -1).astype(np.float64)
            scaled = _scale_minmax(block)
            active += (scaled > cfg.threshold).sum(axis=1)
        out[start:start + n] = active / total
    return out


def nc_score(model: ModelState, image: np.ndarray, cfg: NCConfig) -> float:
    return float(nc_scores(model, np.asarray(image, dtype=np.float32)[None], cfg)[0])


def scott_bandwidths(samples: np.ndarray) -> np.ndarray:
    """Scott's rule per dimension: std * n^(-1/(d+4)), sample std (ddof=1)."""
    n, d = samples.shape
    sigma = samples.std(axis=0, ddof=1)
    h = sigma * n ** (-1.0 / (d + 4))
    # zero within-class spread would make the kernel degenerate
    return np.maximum(h, 1e-12)


@dataclass(frozen=True)
class LsaEstimator:
    layer: str
    retained: np.ndarray  # neuron indices kept by the variance filter
    class_traces: dict  # class -> (n_c, d) float64
    bandwidths: dict  # class -> (d,) float64


def default_lsa_layer(arch) -> str:
    """Last hidden dense layer; falls back to the last hidden neuron layer."""
    hidden = arch.neuron_layers()[:-1]
    dense_names = {l.name for l in arch.layers if isinstance(l, Dense)}
    dense_hidden = [name for name in hidden if name in dense_names]
    if dense_hidden:
        return dense_hidden[-1]
    if not hidden:
        raise ValueError("architecture has no hidden neuron layer")
    return hidden[-1]


def fit_lsa(model: ModelState, train_star: Dataset, layer: str | None = None,
            variance_threshold: float = 1e-5, batch_size: int = 256) -> LsaEstimator:
    """Per-class diagonal Gaussian KDE over the selected layer's traces.

    Classes group by true label; neurons whose variance across the whole
    train_star falls below the threshold are dropped.
    """
    arch = model.architecture
    if layer is None:
        layer = default_lsa_layer(arch)
    traces = activation_traces(model, train_star.images, [layer], batch_size=batch_size)
    variances = traces.var(axis=0)
    retained = np.flatnonzero(variances >= variance_threshold)
    if retained.size == 0:
        raise ValueError(f"variance filter {variance_threshold} removed every neuron of {layer!r}")
    traces = traces[:, retained]
    class_traces = {}
    bandwidths = {}
    for cls in range(train_star.class_count):
        rows = traces[train_star.labels == cls]
        if len(rows) < 2:
            raise ValueError(f"class {cls} has {len(rows)} inputs; LSA needs at least 2")
        class_traces[cls] = rows
        bandwidths[cls] = scott_bandwidths(rows)
    return LsaEstimator(layer=layer, retained=retained, class_traces=class_traces,
                        bandwidths=bandwidths)


def _lsa_from_traces(est: LsaEstimator, traces: np.ndarray, classes: np.ndarray) -> np.ndarray:
    out = np.empty(len(traces), dtype=np.float64)
    for cls in np.unique(classes):
        if cls not in est.class_traces:
            raise KeyError(f"predicted class {cls} absent from the estimator")
        mask = classes == cls
        refs = est.class_traces[cls]
        h = est.bandwidths[cls]
        d = refs.shape[1]
        log_norm = -np.log(h).sum() - 0.5 * d * _LOG_2PI
        d2 = cdist(traces[mask] / h, refs / h, "sqeuclidean")
        log_kernels = -0.5 * d2 + log_norm
        log_density = logsumexp(log_kernels, axis=1) - np.log(len(refs))
        with np.errstate(under="ignore"):
            density = np.exp(log_density)
        out[mask] = -np.log(density + _DENSITY_FLOOR)
    return out


def lsa_scores(est: LsaEstimator, model: ModelState, images: np.ndarray,
               batch_size: int = 256) -> np.ndarray:
    traces = activation_traces(model, images, [est.layer], batch_size=batch_size)[:, est.retained]
    pred, _ = predict(model, images, batch_size=batch_size)
    return _lsa_from_traces(est, traces, pred)


def lsa_from_trace(est: LsaEstimator, trace: np.ndarray, predicted_class: int) -> float:
    """-log mean Gaussian-kernel density of one (already filtered) trace."""
    if predicted_class not in est.class_traces:
        raise KeyError(f"predicted class {predicted_class} absent from the estimator")
    refs = est.class_traces[predicted_class]
    h = est.bandwidths[predicted_class]
    d = refs.shape[1]
    norm = np.exp(-np.log(h).sum() - 0.5 * d * _LOG_2PI)
    total = 0.0
    for row in refs:
        u = (np.asarray(trace, dtype=np.float64) - row) / h
        total += np.exp(-0.5 * float(u @ u))
    density = norm * total / len(refs)
    return float(-np.log(density + _DENSITY_FLOOR))


def lsa_score(est: LsaEstimator, model: ModelState, image: np.ndarray) -> float:
    """Surprise of one input: -log mean Gaussian-kernel density, direct sum."""
    trace = activation_traces(model, np.asarray(image, dtype=np.float32)[None],
                              [est.layer])[0][est.retained]
    pred, _ = predict(model, np.asarray(image, dtype=np.float32)[None])
    return lsa_from_trace(est, trace, int(pred[0]))


@dataclass(frozen=True)
class DsaIndex:
    layers: tuple[str, ...]
    class_traces: dict  # class -> (n_c, d) float64
    dim: int


def fit_dsa(model: ModelState, train_star: Dataset, layers=None,
            batch_size: int = 256) -> DsaIndex:
    """Training traces grouped by true class over the selected layers."""
    arch = model.architecture
    selected = tuple(layers) if layers is not None else arch.neuron_layers()
    traces = activation_traces(model, train_star.images, selected, batch_size=batch_size)
    class_traces = {}
    for cls in range(train_star.class_count):
        rows = traces[train_star.labels == cls]
        if len(rows) == 0:
            raise ValueError(f"class {cls} has no inputs")
        class_traces[cls] = rows
    if len(class_traces) < 2:
        raise ValueError("DSA needs at least 2 classes")
    return DsaIndex(layers=selected, class_traces=class_traces, dim=traces.shape[1])


def dsa_from_trace(index: DsaIndex, trace: np.ndarray, predicted_class: int) -> float:
    """DSA of one trace, scanning every reference trace.

    Per-pair distances accumulate squared differences left to right in
    float64, the same order a naive exhaustive search uses.
    """
    if predicted_class not in index.class_traces:
        raise KeyError(f"predicted class {predicted_class} absent from the index")
    trace = np.asarray(trace, dtype=np.float64)
    same = index.class_traces[predicted_class]
    dists = cdist(trace[None], same, "euclidean")[0]
    a_row = int(dists.argmin())
    dist_a = float(dists[a_row])
    x_a = same[a_row]
    dist_b = np.inf
    for other_cls, rows in index.class_traces.items():
        if other_cls == predicted_class:
            continue
        d = cdist(x_a[None], rows, "euclidean")[0]
        dist_b = min(dist_b, float(d.min()))
    if dist_b == 0.0:
        return DSA_ZERO_DENOMINATOR_SENTINEL
    return dist_a / dist_b


def dsa_score(index: DsaIndex, model: ModelState, image: np.ndarray) -> float:
    """DSA of one input (trace extraction plus exhaustive search)."""
    trace = activation_traces(model, np.asarray(image, dtype=np.float32)[None], index.layers)[0]
    pred, _ = predict(model, np.asarray(image, dtype=np.float32)[None])
    return dsa_from_trace(index, trace, int(pred[0]))


def dsa_scores(index: DsaIndex, model: ModelState, images: np.ndarray,
               batch_size: int = 256) -> np.ndarray:
    """Bulk DSA: same definition as dsa_score, vectorised.

    For each class the nearest other-class distance of every reference trace
    is precomputed once, so scoring stays exact exhaustive search.
    """
    traces = activation_traces(model, images, index.layers, batch_size=batch_size)
    pred, _ = predict(model, images, batch_size=batch_size)
    nearest_other = {}
    for cls, rows in index.class_traces.items():
        others = np.concatenate([r for c, r in index.class_traces.items() if c != cls])
        nearest_other[cls] = cdist(rows, others, "euclidean").min(axis=1)
    out = np.empty(len(traces), dtype=np.float64)
    for cls in np.unique(pred):
        cls = int(cls)
        if cls not in index.class_traces:
            raise KeyError(f"predicted class {cls} absent from the index")
        mask = pred == cls
        refs = index.class_traces[cls]
        dists = cdist(traces[mask], refs, "euclidean")
        a_rows = dists.argmin(axis=1)
        dist_a = dists[np.arange(len(a_rows)), a_rows]
        dist_b = nearest_other[cls][a_rows]
        safe = np.where(dist_b > 0, dist_b, 1.0)
        out[mask] = np.where(dist_b > 0, dist_a / safe, DSA_ZERO_DENOMINATOR_SENTINEL)
    return out


def random_score(ids, seed: int) -> list[GuidanceScore]:
    """Permutation ranks from PCG32(seed); ordering by value is a uniform shuffle."""
    ids = list(ids)
    n = len(ids)
    perm = Pcg32(seed).permutation(n)
    values = np.empty(n, dtype=np.int64)
    values[perm] = np.arange(n - 1, -1, -1)
    return [GuidanceScore(input_id=ids[i], metric="RANDOM", value=float(values[i]))
            for i in range(n)]


def order_inputs(scores) -> list:
    """Input ids sorted by descending score; ties break by ascending id."""
    metrics = {s.metric for s in scores}
    if len(metrics) > 1:
        raise ValueError(f"scores mix metrics: {sorted(metrics)}")
    seen = set()
    for s in scores:
        if s.input_id in seen:
            raise ValueError(f"duplicate score for input {s.input_id}")
        seen.add(s.input_id)
        if not np.isfinite(s.value):
            raise ValueError(f"non-finite score for input {s.input_id}")
    return [s.input_id for s in sorted(scores, key=lambda s: (-s.value, s.input_id))]


def score_dataset(metric: str, model: ModelState, train_star: Dataset,
                  cfg: GuidanceConfig) -> list[GuidanceScore]:
    """Scores for every input of train_star under one metric."""
    if metric == "NC":
        values = nc_scores(model, train_star.images, NCConfig(cfg.nc_threshold),
                           batch_size=cfg.batch_size)
    elif metric == "LSA":
        est = fit_lsa(model, train_star, layer=cfg.lsa_layer,
                      variance_threshold=cfg.lsa_variance_threshold,
                      batch_size=cfg.batch_size)
        values = lsa_scores(est, model, train_star.images, batch_size=cfg.batch_size)
    elif metric == "DSA":
        index = fit_dsa(model, train_star, layers=cfg.dsa_layers, batch_size=cfg.batch_size)
        values = dsa_scores(index, model, train_star.images, batch_size=cfg.batch_size)
    elif metric == "RANDOM":
        return random_score(range(len(train_star)), cfg.random_seed)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return [GuidanceScore(input_id=i, metric=metric, value=float(v))
            for i, v in enumerate(values)]


def timed_scoring(metric: str, model: ModelState, train_star: Dataset,
                  cfg: GuidanceConfig):
    """(scores, wall seconds) for one metric over all of train_star."""
    t0 = time.monotonic()
    scores = score_dataset(metric, model, train_star, cfg)
    return scores, time.monotonic() - t0


def format_duration(seconds: float) -> str:
    """hh:mm:ss, zero padded, whole seconds (sub-second durations show 00:00:00)."""
    if seconds < 0:
        raise ValueError("negative duration")
    total = int(seconds)
    return f"{total // 3600:02d}:{total % 3600 // 60:02d}:{total % 60:02d}"


def scores_to_csv(scores, path) -> None:
    """input_id,metric,value rows, values at 9 significant digits."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("input_id,metric,value\n")
        for s in scores:
            fh.write(f"{s.input_id},{s.metric},{s.value:.9g}\n")
