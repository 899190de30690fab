"""Frozen-feature linear evaluation.

A multinomial logistic regression head trained with plain SGD+momentum,
no weight decay, constant learning rate, best-on-validation checkpoint.
Defaults mirror the production evaluation protocol exactly
(lr 0.1, momentum 0.9, batch 128, 12,500 iterations, zero weight decay).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .embed_diag import FeatureSet
from .slide_pipeline import center_crop, resize_bilinear
from .stain_norm import NormalizationTarget, RgbPatch, normalize_patch

DEFAULT_RESIZE_TO = 256
DEFAULT_CROP_TO = 224


@dataclass
class ProbeConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    iterations: int = 12500
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay != 0.0:
            raise ValueError("the probe protocol uses zero weight decay")


@dataclass(frozen=True)
class LabeledFeatureSet:
    """Feature vectors plus integer class labels in [0, n_classes)."""

    features: FeatureSet
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        y = np.asarray(self.labels, dtype=np.int64)
        if y.shape != (self.features.n,):
            raise ValueError("labels length must match feature count")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError("labels must lie in [0, n_classes)")
        object.__setattr__(self, "labels", y)


@dataclass(frozen=True)
class ProbeWeights:
    w: np.ndarray  # (d, C)
    b: np.ndarray  # (C,)


def preprocess_eval(patch: RgbPatch, target: NormalizationTarget,
                    resize_to: int = DEFAULT_RESIZE_TO,
                    crop_to: int = DEFAULT_CROP_TO) -> RgbPatch:
    """Evaluation-time preprocessing: Macenko-normalize, resize, center-crop."""
    out = normalize_patch(patch, target)
    out = resize_bilinear(out, resize_to, resize_to)
    return center_crop(out, crop_to, crop_to)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def probe_loss_and_grad(w: np.ndarray, b: np.ndarray, x: np.ndarray,
                        y: np.ndarray, n_classes: int):
    """Mean softmax cross-entropy and its analytic gradients."""
    logits = x @ w + b
    logp = _log_softmax(logits)
    n = x.shape[0]
    loss = float(-logp[np.arange(n), y].mean())
    probs = np.exp(logp)
    probs[np.arange(n), y] -= 1.0
    probs /= n
    return loss, x.T @ probs, probs.sum(axis=0)


def train_probe(train: LabeledFeatureSet, val: LabeledFeatureSet,
                cfg: ProbeConfig) -> ProbeWeights:
    """SGD+momentum logistic regression; returns the best-on-validation weights.

    Shuffling is seeded per epoch (epoch = ceil(n / batch) steps);
    validation accuracy is checked at each epoch boundary and at the end,
    ties resolved toward the earlier checkpoint.
    """
    if train.features.d != val.features.d:
        raise DimensionMismatch("train/val feature dimensions differ")
    if np.unique(train.labels).size < 2:
        raise ValueError("train split must contain at least two classes")
    x, y = train.features.vectors, train.labels
    n, d = x.shape
    c = train.n_classes
    w = np.zeros((d, c))
    b = np.zeros(c)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = -(-n // cfg.batch_size)
    best = ProbeWeights(w.copy(), b.copy())
    best_acc = evaluate_accuracy(best, val)
    order = rng.permutation(n)
    cursor = 0
    for step in range(cfg.iterations):
        if cursor + cfg.batch_size > n and cursor > 0:
            order = rng.permutation(n)
            cursor = 0
        take = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        _, gw, gb = probe_loss_and_grad(w, b, x[take], y[take], c)
        vw = cfg.momentum * vw - cfg.lr * gw
        vb = cfg.momentum * vb - cfg.lr * gb
        w += vw
        b += vb
        if (step + 1) % steps_per_epoch == 0 or step + 1 == cfg.iterations:
            acc = evaluate_accuracy(ProbeWeights(w, b), val)
            if acc > best_acc:
                best_acc = acc
                best = ProbeWeights(w.copy(), b.copy())
    return best


def evaluate_accuracy(weights: ProbeWeights, test: LabeledFeatureSet) -> float:
    """Top-1 accuracy; argmax ties break toward the lower class index."""
    if test.features.d != weights.w.shape[0]:
        raise DimensionMismatch("feature dimension does not match probe weights")
    logits = test.features.vectors @ weights.w + weights.b
    pred = np.argmax(logits, axis=1)
    return float((pred == test.labels).mean())


def split_train_val(lfs: LabeledFeatureSet, train_fraction: float = 0.8,
                    seed: int = 0) -> tuple[LabeledFeatureSet, LabeledFeatureSet]:
    """Seeded 80:20-style shuffle split."""
    n = lfs.features.n
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    def subset(idx):
        return LabeledFeatureSet(
            features=FeatureSet(vectors=lfs.features.vectors[idx],
                                wsi_ids=lfs.features.wsi_ids[idx],
                                manifest=lfs.features.manifest),
            labels=lfs.labels[idx],
            n_classes=lfs.n_classes,
        )
    return subset(order[:cut]), subset(order[cut:])
