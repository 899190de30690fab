"""Feature-collapse diagnostics: sampling protocol, kNN source purity,
silhouette by source slide, PCA, and an exact O(n^2) t-SNE embedder.

Collapse here means features clustering by source slide instead of tissue
content; purity 1.0 is total collapse, the permutation chance level
(k-dependent, ~k-neighbor base rate) is a fully mixed embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InsufficientFeatures,
    PerplexityTooLarge,
    SingleCluster,
    TooManyPoints,
)

DEFAULT_PER_WSI = 1000
DEFAULT_N_WSIS = 10
DEFAULT_K = 10
DEFAULT_PERPLEXITY = 30.0  # conventional, not from the source protocol
DEFAULT_TSNE_ITERATIONS = 1000
TSNE_MAX_POINTS = 20000
TSNE_EARLY_EXAGGERATION = 12.0
TSNE_EXAGGERATION_ITERS = 250
TSNE_MOMENTUM_SWITCH = 250
ENTROPY_TOLERANCE = 1e-5
MAX_BISECTION_STEPS = 50
DISTANCE_CHUNK = 512


@dataclass(frozen=True)
class FeatureSet:
    """N feature vectors tagged with their source-WSI identifier."""

    vectors: np.ndarray  # (n, d) float64
    wsi_ids: np.ndarray  # (n,) int64
    manifest: dict = field(default_factory=dict)  # wsi_id -> name

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        ids = np.asarray(self.wsi_ids, dtype=np.int64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"vectors must be (n, d) with n >= 1, got {v.shape}")
        if ids.shape != (v.shape[0],):
            raise ValueError("wsi_ids length must match vector count")
        if not np.all(np.isfinite(v)):
            raise ValueError("vectors must be finite")
        if self.manifest:
            missing = set(np.unique(ids).tolist()) - set(self.manifest)
            if missing:
                raise ValueError(f"wsi_ids missing from manifest: {sorted(missing)}")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "wsi_ids", ids)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class Embedding2D:
    """2-D embedding plus the per-iteration KL trace that produced it."""

    points: np.ndarray  # (n, 2)
    kl_history: np.ndarray  # per-iteration KL against the true P
    bandwidths: np.ndarray | None = None  # per-point Gaussian precisions


def sample_protocol(features_by_wsi: dict, per_wsi: int = DEFAULT_PER_WSI,
                    n_wsis: int = DEFAULT_N_WSIS, seed: int = 0,
                    manifest: dict | None = None) -> FeatureSet:
    """Sample per_wsi features from each of n_wsis slides, seeded.

    Slides are drawn uniformly without replacement from those holding at
    least per_wsi features; features are then drawn uniformly without
    replacement within each selected slide.
    """
    if per_wsi < 1 or n_wsis < 1:
        raise InsufficientFeatures("per_wsi and n_wsis must be >= 1")
    eligible = sorted(w for w, f in features_by_wsi.items()
                      if np.asarray(f).shape[0] >= per_wsi)
    if len(eligible) < n_wsis:
        raise InsufficientFeatures(
            f"{len(eligible)} WSIs hold >= {per_wsi} features; need {n_wsis}"
        )
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(eligible), size=n_wsis, replace=False).tolist())
    vecs, ids = [], []
    for ci in chosen:
        wsi = eligible[ci]
        feats = np.asarray(features_by_wsi[wsi], dtype=np.float64)
        take = rng.choice(feats.shape[0], size=per_wsi, replace=False)
        vecs.append(feats[np.sort(take)])
        ids.append(np.full(per_wsi, wsi, dtype=np.int64))
    man = manifest if manifest is not None else {
        int(eligible[ci]): str(eligible[ci]) for ci in chosen
    }
    return FeatureSet(vectors=np.vstack(vecs), wsi_ids=np.concatenate(ids),
                      manifest=man)


def _squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clamped at 0."""
    sq_a = np.sum(a * a, axis=1)[:, None]
    sq_b = np.sum(b * b, axis=1)[None, :]
    return np.maximum(sq_a + sq_b - 2.0 * (a @ b.T), 0.0)


def knn_wsi_purity(fs: FeatureSet, k: int = DEFAULT_K) -> float:
    """Mean fraction of each point's k nearest neighbors from the same WSI.

    Self excluded; distance ties break toward the lower index (stable sort
    on squared Euclidean distance).
    """
    n = fs.n
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < n, got k={k}, n={n}")
    total = 0.0
    for start in range(0, n, DISTANCE_CHUNK):
        stop = min(start + DISTANCE_CHUNK, n)
        d2 = _squared_distances(fs.vectors[start:stop], fs.vectors)
        rows = np.arange(start, stop)
        d2[np.arange(stop - start), rows] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        same = fs.wsi_ids[order] == fs.wsi_ids[rows][:, None]
        total += same.mean(axis=1).sum()
    return float(total / n)


def knn_purity_chance_level(fs: FeatureSet, k: int = DEFAULT_K) -> float:
    """Expected purity under random label assignment (counting identity)."""
    n = fs.n
    _, counts = np.unique(fs.wsi_ids, return_counts=True)
    probs = counts / n
    return float(np.sum(probs * (counts - 1) / (n - 1)))


def silhouette_wsi(fs: FeatureSet) -> float:
    """Mean silhouette score with the source-WSI id as the cluster label."""
    labels = fs.wsi_ids
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2:
        raise SingleCluster("silhouette needs at least two distinct wsi_ids")
    if np.any(counts < 2):
        raise ValueError("every WSI needs at least two members")
    n = fs.n
    label_index = {int(u): i for i, u in enumerate(uniq)}
    col = np.array([label_index[int(l)] for l in labels])
    scores = np.empty(n)
    for start in range(0, n, DISTANCE_CHUNK):
        stop = min(start + DISTANCE_CHUNK, n)
        d = np.sqrt(_squared_distances(fs.vectors[start:stop], fs.vectors))
        # per-cluster mean distance for each row
        sums = np.zeros((stop - start, uniq.size))
        np.add.at(sums.T, col, d.T)
        means = sums / counts[None, :]
        own = col[start:stop]
        rows = np.arange(stop - start)
        a = (sums[rows, own]) / (counts[own] - 1)  # exclude self (distance 0)
        means[rows, own] = np.inf
        b = means.min(axis=1)
        scores[start:stop] = (b - a) / np.maximum(a, b)
    return float(scores.mean())


def pca_embed(fs: FeatureSet, out_dim: int) -> np.ndarray:
    """Project centered features onto the top principal axes.

    Sign convention: each axis is flipped so its largest-magnitude loading
    is positive (first occurrence on ties).
    """
    if out_dim > fs.d:
        raise ValueError(f"out_dim {out_dim} exceeds feature dimension {fs.d}")
    x = fs.vectors - fs.vectors.mean(axis=0, keepdims=True)
    cov = (x.T @ x) / max(fs.n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    axes = eigvecs[:, ::-1][:, :out_dim]
    for j in range(axes.shape[1]):
        lead = np.argmax(np.abs(axes[:, j]))
        if axes[lead, j] < 0:
            axes[:, j] = -axes[:, j]
    return x @ axes


def conditional_probabilities(d2: np.ndarray, perplexity: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-point Gaussian conditionals whose entropy matches log(perplexity).

    Bandwidth (precision beta) found by bisection, up to 50 steps, to an
    entropy tolerance of 1e-5. Returns (P_conditional, betas).
    """
    n = d2.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    betas = np.ones(n)
    idx = np.arange(n)
    for i in range(n):
        di = d2[i, idx != i]
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(MAX_BISECTION_STEPS):
            w = np.exp(-di * beta)
            sw = w.sum()
            if sw <= 0:
                entropy = 0.0
                pi = np.zeros_like(w)
            else:
                pi = w / sw
                nz = pi > 0
                entropy = float(-np.sum(pi[nz] * np.log(pi[nz])))
            diff = entropy - target
            if abs(diff) < ENTROPY_TOLERANCE:
                break
            if diff > 0:  # too flat: raise precision
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == 0.0 else (beta + lo) / 2.0
        betas[i] = beta
        p[i, idx != i] = pi
    return p, betas


def tsne_kl_and_grad(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """KL divergence of the Student-t Q from P, with its analytic gradient."""
    d2 = _squared_distances(y, y)
    inv = 1.0 / (1.0 + d2)
    np.fill_diagonal(inv, 0.0)
    q_sum = inv.sum()
    q = np.maximum(inv / q_sum, 1e-12)
    mask = p > 0
    kl = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    pq = (p - q) * inv
    grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
    return kl, grad


def tsne_embed(fs: FeatureSet, perplexity: float = DEFAULT_PERPLEXITY,
               iterations: int = DEFAULT_TSNE_ITERATIONS,
               learning_rate: float = 200.0, seed: int = 0) -> Embedding2D:
    """Exact t-SNE to 2-D with PCA initialization.

    Early exaggeration 12x for the first 250 iterations, momentum 0.5
    then 0.8 after iteration 250; the KL history is recorded against the
    unexaggerated P every iteration.
    """
    n = fs.n
    if n > TSNE_MAX_POINTS:
        raise TooManyPoints(f"exact t-SNE capped at {TSNE_MAX_POINTS} points, got {n}")
    if n < 10:
        raise ValueError("t-SNE needs at least 10 points")
    if not perplexity < (n - 1) / 3:
        raise PerplexityTooLarge(
            f"perplexity {perplexity} must be < (n - 1) / 3 = {(n - 1) / 3:.2f}"
        )
    d2 = _squared_distances(fs.vectors, fs.vectors)
    cond, betas = conditional_probabilities(d2, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    np.fill_diagonal(p, 0.0)
    p /= p.sum()

    if fs.d >= 2:
        y = pca_embed(fs, 2)
        spread = y.std()
        y = y * (1e-4 / spread) if spread > 0 else y
    else:
        y = np.random.default_rng(seed).normal(scale=1e-4, size=(n, 2))

    velocity = np.zeros_like(y)
    kl_history = np.empty(iterations)
    for it in range(iterations):
        factor = TSNE_EARLY_EXAGGERATION if it < TSNE_EXAGGERATION_ITERS else 1.0
        kl, grad = tsne_kl_and_grad(p * factor, y)
        if factor != 1.0:
            kl_history[it] = tsne_kl_and_grad(p, y)[0]
        else:
            kl_history[it] = kl
        momentum = 0.5 if it < TSNE_MOMENTUM_SWITCH else 0.8
        velocity = momentum * velocity - learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0, keepdims=True)
    return Embedding2D(points=y, kl_history=kl_history, bandwidths=betas)
