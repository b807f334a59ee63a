"""FGSM adversarial inputs and the augmented train/test sets built from them.

The attack is the one-shot sign method: x* = clip(x + eps * sign(dJ/dx)),
where J is the training cross-entropy at the input's true label. Train* and
Test* concatenate the originals with their adversarial counterparts and keep
per-row origin flags plus an adversarial-row -> source-row provenance map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward_grads, forward_eval
from .model import Dataset, ModelState
from .rng import Pcg32


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.clip_min >= self.clip_max:
            raise ValueError("clip_min must be below clip_max")


@dataclass(frozen=True)
class AugmentedSets:
    adv_train: Dataset
    train_star: Dataset
    adv_test: Dataset
    test_star: Dataset
    train_star_is_adversarial: np.ndarray
    test_star_is_adversarial: np.ndarray
    train_provenance: dict = field(repr=False, default_factory=dict)
    test_provenance: dict = field(repr=False, default_factory=dict)


def fgsm(model: ModelState, images: np.ndarray, labels, cfg: AttackConfig,
         batch_size: int = 256) -> np.ndarray:
    """Adversarial counterpart(s) of `images` under the true `labels`.

    Accepts a single (H, W, C) input or a batch; returns the same shape.
    The output stays within epsilon (sup-norm) of the input and in
    [clip_min, clip_max]; epsilon = 0 returns the input bit-exactly.
    """
    images = np.asarray(images, dtype=np.float32)
    single = images.shape == model.architecture.input_shape
    if single:
        images = images[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if cfg.epsilon == 0.0:
        out = images.copy()
        return out[0] if single else out
    graph = model.graph()
    out = np.empty_like(images)
    eps = np.float32(cfg.epsilon)
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        y = labels[start:start + batch_size]
        grads = backward_grads(forward_eval(graph, x, y))
        g = grads.input_grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite input gradient during FGSM")
        out[start:start + len(x)] = np.clip(
            x + eps * np.sign(g), np.float32(cfg.clip_min), np.float32(cfg.clip_max)
        )
    return out[0] if single else out


def select_attack_sources(n: int, fraction: float, seed: int) -> np.ndarray:
    """round(fraction*n) source indices, uniform without replacement, sorted."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = int(np.floor(fraction * n + 0.5))
    if k < 1:
        raise ValueError(f"fraction {fraction} of {n} inputs selects nothing")
    return np.sort(Pcg32(seed).choice(n, k))


def build_adv_train(model: ModelState, train: Dataset, fraction: float,
                    cfg: AttackConfig, seed: int) -> Dataset:
    """FGSM images for a uniformly chosen fraction of the training set."""
    sources = select_attack_sources(len(train), fraction, seed)
    adv_images = fgsm(model, train.images[sources], train.labels[sources], cfg)
    return Dataset(adv_images, train.labels[sources].copy(), train.class_count)


def build_augmented_sets(model: ModelState, train: Dataset, test: Dataset,
                         fraction: float, cfg: AttackConfig, seed: int) -> AugmentedSets:
    """Adv-Train / Train* / Adv-Test / Test* with origin flags and provenance."""
    if train.class_count != test.class_count:
        raise ValueError("train and test disagree on class count")
    sources = select_attack_sources(len(train), fraction, seed)
    adv_train = Dataset(
        fgsm(model, train.images[sources], train.labels[sources], cfg),
        train.labels[sources].copy(),
        train.class_count,
    )
    train_star = Dataset(
        np.concatenate([train.images, adv_train.images]),
        np.concatenate([train.labels, adv_train.labels]),
        train.class_count,
    )
    train_flags = np.zeros(len(train_star), dtype=bool)
    train_flags[len(train):] = True
    train_prov = {len(train) + j: int(src) for j, src in enumerate(sources)}

    adv_test = Dataset(
        fgsm(model, test.images, test.labels, cfg),
        test.labels.copy(),
        test.class_count,
    )
    test_star = Dataset(
        np.concatenate([test.images, adv_test.images]),
        np.concatenate([test.labels, adv_test.labels]),
        test.class_count,
    )
    test_flags = np.zeros(len(test_star), dtype=bool)
    test_flags[len(test):] = True
    test_prov = {len(test) + j: j for j in range(len(test))}

    return AugmentedSets(
        adv_train=adv_train,
        train_star=train_star,
        adv_test=adv_test,
        test_star=test_star,
        train_star_is_adversarial=train_flags,
        test_star_is_adversarial=test_flags,
        train_provenance=train_prov,
        test_provenance=test_prov,
    )
