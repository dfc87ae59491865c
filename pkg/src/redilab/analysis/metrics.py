"""Two-sample distances on raw coordinates: Gaussian Frechet distance and RBF MMD."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEG_EIG_TOL = 1e-10


def _as_samples(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix by eigendecomposition."""
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    if vals.min() < -NEG_EIG_TOL:
        raise ValueError(f"matrix not positive semi-definite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + tr(A + B - 2 (A B)^(1/2)).

    tr (A B)^(1/2) is computed as tr (A^(1/2) B A^(1/2))^(1/2), whose argument
    is symmetric PSD.
    """
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    ra = sqrtm_psd(cov_a)
    inner = ra @ cov_b @ ra
    inner = 0.5 * (inner + inner.T)
    vals = np.linalg.eigvalsh(inner)
    if vals.min() < -NEG_EIG_TOL:
        raise ValueError(f"covariance product has eigenvalue {vals.min():.3g} below -{NEG_EIG_TOL}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = np.asarray(mu_a, dtype=float) - np.asarray(mu_b, dtype=float)
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def frechet_sq(a, b) -> float:
    """Squared Frechet distance between Gaussian fits of two sample sets."""
    a, b = _as_samples(a), _as_samples(b)
    d = a.shape[1]
    if b.shape[1] != d:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < d + 1 or len(b) < d + 1:
        raise ValueError(f"need at least d+1={d + 1} samples per set, got {len(a)} and {len(b)}")
    return frechet_from_moments(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def _sqdist(x, y):
    return np.maximum((x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T, 0.0)


def median_bandwidth(a, b, max_points: int = 4000) -> float:
    """Median pairwise distance over the pooled sample (strided subset when large)."""
    pooled = np.concatenate([_as_samples(a), _as_samples(b)])
    if len(pooled) > max_points:
        pooled = pooled[:: -(-len(pooled) // max_points)]
    diff = pooled[:, None, :] - pooled[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    iu = np.triu_indices(len(pooled), k=1)
    h = float(np.median(dist[iu])) if len(iu[0]) else 1.0
    return h if h > 0 else 1.0


def _kernel_sum(x, y, h, skip: str, chunk: int = 2048):
    """Sum of exp(-|x-y|^2 / 2h^2) and the number of pairs summed.

    ``skip`` is "diag" (x is y; leave out i == j) or "equal" (leave out
    exactly coincident points).
    """
    total = 0.0
    pairs = 0
    for lo in range(0, len(x), chunk):
        xs = x[lo:lo + chunk]
        k = np.exp(-_sqdist(xs, y) / (2.0 * h * h))
        if skip == "diag":
            drop = np.zeros(k.shape, dtype=bool)
            rows = np.arange(len(xs))
            drop[rows, lo + rows] = True
        else:
            drop = np.all(xs[:, None, :] == y[None, :, :], axis=-1)
        k[drop] = 0.0
        pairs += drop.size - int(drop.sum())
        total += float(k.sum())
    return total, pairs


def mmd_sq(a, b, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with an RBF kernel.

    The within-set sums skip i == j as usual. The cross sum skips pairs of
    exactly coincident points, so identical inputs give zero while the
    estimate stays invariant to reordering either set.
    """
    a, b = _as_samples(a), _as_samples(b)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("mmd_sq needs at least two samples per set")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    kaa, n_aa = _kernel_sum(a, a, h, "diag")
    kbb, n_bb = _kernel_sum(b, b, h, "diag")
    kab, n_ab = _kernel_sum(a, b, h, "equal")
    xy = kab / n_ab if n_ab else 0.0
    return float(kaa / n_aa + kbb / n_bb - 2.0 * xy)


@dataclass(frozen=True)
class MetricReport:
    frechet_sq: float
    mmd_sq: float
    n_a: int
    n_b: int

    def to_dict(self) -> dict:
        return {"frechet_sq": self.frechet_sq, "mmd_sq": self.mmd_sq, "n_a": self.n_a, "n_b": self.n_b}


def metric_report(a, b) -> MetricReport:
    """Both distances, with the unbiased MMD estimate floored at zero."""
    a, b = _as_samples(a), _as_samples(b)
    return MetricReport(frechet_sq(a, b), max(mmd_sq(a, b), 0.0), len(a), len(b))
