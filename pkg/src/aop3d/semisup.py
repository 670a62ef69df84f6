"""Semi-supervised pseudo-annotation: feature normalization, PCA
reduction, and RBF-affinity label spreading from operator seeds.

Label spreading iterates F <- alpha S F + (1 - alpha) Y on the
symmetrically normalized affinity matrix S until convergence; pseudo
labels are the row argmax. The affinity is dense, so memory grows as
O(n^2) — fine for the few thousand instances this targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHA = 0.99
DEFAULT_ITERS = 1000
DEFAULT_TOL = 1e-9


@dataclass(frozen=True)
class ReducedFeatures:
    reduced: np.ndarray  # n x d projection
    retained_variance: float
    mean: np.ndarray  # per-kept-column z-normalization mean
    scale: np.ndarray  # per-kept-column z-normalization scale
    basis: np.ndarray  # kept-columns x d projection basis
    kept_columns: np.ndarray  # indices of non-degenerate input columns
    eigenvalues: np.ndarray  # all eigenvalues, descending


def pca_reduce(features: np.ndarray, variance_kept: float = 0.95) -> ReducedFeatures:
    """Z-normalize columns (dropping constant ones), then project onto the
    smallest number of principal components whose eigenvalue mass reaches
    `variance_kept`. Basis signs are fixed so each component's
    largest-magnitude entry is positive."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca_reduce needs an n x m matrix with n >= 2")
    if not 0.0 < variance_kept <= 1.0:
        raise ValueError(f"variance_kept must be in (0, 1], got {variance_kept}")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    kept = np.flatnonzero(scale > 1e-12)
    if kept.size == 0:
        raise ValueError("all feature columns are constant")
    z = (x[:, kept] - mean[kept]) / scale[kept]
    cov = z.T @ z / len(z)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]
    for j in range(eigvecs.shape[1]):
        if eigvecs[np.argmax(np.abs(eigvecs[:, j])), j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]
    total = float(eigvals.sum())
    rank = int(np.sum(eigvals > 1e-12 * max(eigvals[0], 1.0)))
    cum = np.cumsum(eigvals) / total
    d = int(np.searchsorted(cum, variance_kept - 1e-12) + 1)
    d = min(max(d, 1), rank)
    basis = eigvecs[:, :d]
    return ReducedFeatures(
        reduced=z @ basis,
        retained_variance=float(cum[d - 1]),
        mean=mean[kept],
        scale=scale[kept],
        basis=basis,
        kept_columns=kept,
        eigenvalues=eigvals,
    )


@dataclass(frozen=True)
class SeedLabels:
    labels: dict[int, int]  # point index -> class id
    n_classes: int

    def __post_init__(self):
        if not self.labels:
            raise ValueError("at least one seed is required")
        for idx, cls in self.labels.items():
            if not 0 <= cls < self.n_classes:
                raise ValueError(f"seed class {cls} outside [0, {self.n_classes})")


@dataclass(frozen=True)
class SpreadResult:
    labels: np.ndarray  # per-point class id
    confidence: np.ndarray  # winning-class share of the final row
    class_probs: np.ndarray  # n x C normalized rows
    flagged: np.ndarray  # points labeled by majority fallback
    n_iter: int
    max_changes: np.ndarray  # per-iteration max |dF|, for convergence checks


def median_heuristic_gamma(x: np.ndarray) -> float:
    """1 / (2 median^2) of the pairwise distances; 1.0 for degenerate data."""
    x = np.asarray(x, dtype=np.float64)
    d2 = _pairwise_sq(x)
    upper = d2[np.triu_indices(len(x), k=1)]
    if upper.size == 0:
        return 1.0
    med = float(np.median(np.sqrt(upper)))
    if med <= 0:
        return 1.0
    return 1.0 / (2.0 * med * med)


def _pairwise_sq(x: np.ndarray) -> np.ndarray:
    s = np.sum(x * x, axis=1)
    d2 = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    return np.maximum(d2, 0.0)


def label_spread(
    x: np.ndarray,
    seeds: SeedLabels,
    alpha: float = DEFAULT_ALPHA,
    gamma: float | None = None,
    iters: int = DEFAULT_ITERS,
    tol: float = DEFAULT_TOL,
) -> SpreadResult:
    """Propagate seed classes through the RBF affinity graph.

    Points with an all-zero affinity row cannot receive mass; unseeded
    ones fall back to the majority seed class and are flagged.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = len(x)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if gamma is None:
        gamma = median_heuristic_gamma(x)
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    for idx in seeds.labels:
        if not 0 <= idx < n:
            raise ValueError(f"seed index {idx} outside [0, {n})")

    w = np.exp(-gamma * _pairwise_sq(x))
    np.fill_diagonal(w, 0.0)
    deg = w.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    s = inv_sqrt[:, None] * w * inv_sqrt[None, :]

    y = np.zeros((n, seeds.n_classes))
    for idx, cls in seeds.labels.items():
        y[idx, cls] = 1.0

    f = y.copy()
    max_changes = []
    for it in range(iters):
        f_next = alpha * (s @ f) + (1.0 - alpha) * y
        change = float(np.max(np.abs(f_next - f)))
        max_changes.append(change)
        f = f_next
        if change < tol:
            break

    labels = np.argmax(f, axis=1)  # ties resolve to the lowest class id
    row_sums = f.sum(axis=1)
    probs = np.where(row_sums[:, None] > 0, f / np.where(row_sums[:, None] > 0, row_sums[:, None], 1.0), 0.0)
    confidence = probs[np.arange(n), labels]

    zero_row = deg <= 0
    seeded = np.zeros(n, dtype=bool)
    seeded[list(seeds.labels.keys())] = True
    flagged = zero_row & ~seeded
    if flagged.any():
        counts = np.bincount(
            [cls for cls in seeds.labels.values()], minlength=seeds.n_classes
        )
        majority = int(np.argmax(counts))  # ties to the lowest class id
        labels = labels.copy()
        labels[flagged] = majority
        confidence = confidence.copy()
        confidence[flagged] = 0.0

    return SpreadResult(
        labels=labels.astype(np.int64),
        confidence=confidence,
        class_probs=probs,
        flagged=flagged,
        n_iter=len(max_changes),
        max_changes=np.asarray(max_changes),
    )
