"""Retraining configurations C1/C2/C3 over a 20-point input-size sweep.

C1 retrains from a fresh fixed-seed initialization on the metric-ordered
Train*, C2 from the original model's weights on the same pool, C3 from the
original weights on the adversarial inputs only. Every data point restarts
from its configuration's initial weights; points are independent and may run
in parallel. The record keeps the best Test* accuracy, the smallest input
size attaining it (u), and u/Tn as resource utilization.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attack import AugmentedSets
from .metrics import GuidanceConfig, order_inputs, timed_scoring
from .model import Dataset, ModelState, TrainParams, accuracy, build_model, train

CONFIG_KINDS = ("C1", "C2", "C3")

SWEEP_POINTS = 20


def sweep_sizes(total: int, points: int = SWEEP_POINTS) -> list[int]:
    """Strictly increasing input sizes round(i*total/points), ending at total."""
    if total < points:
        raise ValueError(f"need at least {points} inputs, got {total}")
    sizes = []
    for i in range(1, points + 1):
        s = total if i == points else int(np.floor(i * total / points + 0.5))
        if sizes and s <= sizes[-1]:  # collapse duplicates upward
            s = sizes[-1] + 1
        sizes.append(s)
    if sizes[-1] != total:
        raise ValueError(f"sweep overflow: {sizes[-1]} > {total}")
    return sizes


@dataclass(frozen=True)
class SweepPlan:
    total: int
    sizes: tuple[int, ...]
    order: tuple[int, ...]  # pool-relative input ids, best first

    def __post_init__(self):
        if len(self.order) != self.total:
            raise ValueError("ordering must cover the whole pool")
        if self.sizes[-1] != self.total:
            raise ValueError("last sweep size must equal the pool size")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sweep sizes must be strictly increasing")


@dataclass(frozen=True)
class RetrainHP:
    """Hyperparameters of one retraining run (one data point)."""

    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    shuffle_seed: int = 0
    fresh_init_seed: int = 0  # C1 initialization, shared by all 20 points


@dataclass(frozen=True)
class RetrainRun:
    kind: str
    metric: str
    point_index: int
    input_size: int
    model: ModelState
    accuracy_test_star: float
    accuracy_test: float
    accuracy_adv_test: float
    wall_seconds: float


@dataclass(frozen=True)
class ExperimentRecord:
    kind: str
    metric: str
    runs: tuple
    best_accuracy: float
    best_input_size: int  # u: the smallest size attaining best_accuracy
    pool_total: int  # Tn
    resource_utilization: float  # u / Tn
    metric_seconds: float

    def resource_string(self) -> str:
        return f"{self.best_input_size}/{self.pool_total}"


def resource_utilization(u: int, total: int) -> float:
    if total < 1 or u < 1 or u > total:
        raise ValueError(f"bad resource ratio {u}/{total}")
    return u / total


def initial_model(kind: str, original: ModelState, fresh_init_seed: int) -> ModelState:
    """The weights a data point starts from: fresh init for C1, M for C2/C3."""
    if kind == "C1":
        return build_model(original.architecture, fresh_init_seed)
    if kind in ("C2", "C3"):
        return original
    raise ValueError(f"unknown configuration {kind!r}")


def ordered_pool_ids(kind: str, sets: AugmentedSets, order) -> list:
    """Train* row ids forming the retraining pool, in metric order.

    C1/C2 draw from all of Train*; C3 keeps only the adversarial rows.
    """
    order = list(order)
    if sorted(order) != list(range(len(sets.train_star))):
        raise ValueError("ordering is not a permutation of Train* ids")
    if kind in ("C1", "C2"):
        return order
    if kind == "C3":
        return [i for i in order if sets.train_star_is_adversarial[i]]
    raise ValueError(f"unknown configuration {kind!r}")


def ordered_pool(kind: str, sets: AugmentedSets, order) -> Dataset:
    """The retraining pool in metric order: Train* for C1/C2, Adv-Train for C3."""
    return sets.train_star.take(ordered_pool_ids(kind, sets, order))


def retrain_point(kind: str, original: ModelState, pool: Dataset, size: int,
                  hp: RetrainHP, point_index: int, eval_sets: AugmentedSets,
                  metric: str = "") -> RetrainRun:
    """One data point: restart from the configuration's initial weights and
    train on the first `size` ordered pool inputs."""
    if size > len(pool):
        raise ValueError(f"size {size} exceeds pool of {len(pool)}")
    start_model = initial_model(kind, original, hp.fresh_init_seed)
    t0 = time.monotonic()
    trained = train(
        start_model,
        pool.take(range(size)),
        TrainParams(
            epochs=hp.epochs,
            batch_size=hp.batch_size,
            lr=hp.lr,
            momentum=hp.momentum,
            shuffle_seed=hp.shuffle_seed,
            shuffle_stream=point_index,  # isolates parallel points
        ),
    )
    return RetrainRun(
        kind=kind,
        metric=metric,
        point_index=point_index,
        input_size=size,
        model=trained,
        accuracy_test_star=accuracy(trained, eval_sets.test_star),
        accuracy_test=accuracy(trained, eval_sets.test_star.take(
            np.flatnonzero(~eval_sets.test_star_is_adversarial))),
        accuracy_adv_test=accuracy(trained, eval_sets.adv_test),
        wall_seconds=time.monotonic() - t0,
    )


def max_workers() -> int:
    """Parallel fan-out cap from GR_THREADS (default 1, sequential)."""
    raw = os.environ.get("GR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"GR_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def run_experiment(original: ModelState, sets: AugmentedSets, metric: str, kind: str,
                   hp: RetrainHP, guidance: GuidanceConfig,
                   scored=None, workers: int | None = None) -> ExperimentRecord:
    """All 20 data points of one (configuration, metric) pair.

    `scored` may carry a precomputed (scores, seconds) pair so several
    configurations can share one timed metric computation.
    """
    if scored is None:
        scored = timed_scoring(metric, original, sets.train_star, guidance)
    scores, metric_seconds = scored
    order = order_inputs(scores)
    pool_ids = ordered_pool_ids(kind, sets, order)
    pool = sets.train_star.take(pool_ids)
    plan = SweepPlan(total=len(pool), sizes=tuple(sweep_sizes(len(pool))), order=tuple(pool_ids))
    if workers is None:
        workers = max_workers()

    def point(i: int) -> RetrainRun:
        return retrain_point(kind, original, pool, plan.sizes[i], hp, i, sets, metric=metric)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            runs = list(pool_exec.map(point, range(len(plan.sizes))))
    else:
        runs = [point(i) for i in range(len(plan.sizes))]
    best = max(r.accuracy_test_star for r in runs)
    u = min(r.input_size for r in runs if r.accuracy_test_star == best)
    return ExperimentRecord(
        kind=kind,
        metric=metric,
        runs=tuple(runs),
        best_accuracy=best,
        best_input_size=u,
        pool_total=len(pool),
        resource_utilization=resource_utilization(u, len(pool)),
        metric_seconds=metric_seconds,
    )


@dataclass(frozen=True)
class ComparisonRow:
    kind: str
    metric: str
    accuracy: float
    inputs_used: int
    pool_total: int
    flagged: bool  # True when no sweep point matched C3's budget exactly

    def resource_string(self) -> str:
        return f"{self.inputs_used}/{self.pool_total}"


def compare_records(records) -> list[ComparisonRow]:
    """C2 at C3's input budget next to C3's best, per metric.

    For each metric with both a C2 and a C3 record, reports the C2 data point
    whose size equals C3's pool size (falling back, flagged, to the nearest
    smaller point) alongside C3's best run.
    """
    by_key = {(r.kind, r.metric): r for r in records}
    rows: list[ComparisonRow] = []
    for (kind, metric), c3 in sorted(by_key.items()):
        if kind != "C3":
            continue
        c2 = by_key.get(("C2", metric))
        if c2 is None:
            continue
        budget = c3.pool_total
        exact = [r for r in c2.runs if r.input_size == budget]
        if exact:
            picked, flagged = exact[0], False
        else:
            smaller = [r for r in c2.runs if r.input_size < budget]
            if not smaller:
                raise ValueError(f"no C2 data point at or below budget {budget}")
            picked, flagged = max(smaller, key=lambda r: r.input_size), True
        rows.append(ComparisonRow("C2", metric, picked.accuracy_test_star,
                                  picked.input_size, c2.pool_total, flagged))
        rows.append(ComparisonRow("C3", metric, c3.best_accuracy,
                                  c3.best_input_size, c3.pool_total, False))
    return rows
