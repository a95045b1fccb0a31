"""Evaluation of steered generations: accuracy, FD, MMD, temporal traces, trends."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import rankdata

from .kernels import pairwise_distances
from .rfm import ConceptProbe, multiclass_predict

FD_RIDGE = 1e-6


def probe_accuracy(probe: ConceptProbe, features, labels) -> float:
    """Fraction of correct predictions (argmax, or 0.5 threshold for binary probes)."""
    if probe.task == "regression":
        raise ValueError("accuracy is undefined for regression probes")
    labels = np.asarray(labels).astype(int)
    if probe.task == "multiclass":
        if labels.min() < 0 or labels.max() >= probe.n_outputs:
            raise ValueError("labels out of range for this probe")
        pred = probe.predict(features)
    else:
        pred = (probe.predict(features) > 0.5).astype(int)
    return float(np.mean(pred == labels))


def _check_set(X, name, min_rows=2):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} has non-finite entries")
    return X


def _psd_sqrt(S):
    vals, vecs = np.linalg.eigh(S)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _trace_sqrt_product(Sa, Sb):
    root = _psd_sqrt(Sa)
    inner = root @ Sb @ root
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    return float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))


def frechet_distance(A, B, ridge: float = FD_RIDGE) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ``||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` with
    ``ridge * I`` added to both covariances.  The cross term is averaged over
    both factor orders so the result is exactly symmetric.  Identical
    inputs give exactly 0.
    """
    A = _check_set(A, "A")
    B = _check_set(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError("feature dimensions differ")
    if A.shape == B.shape and np.array_equal(A, B):
        return 0.0
    eye = ridge * np.eye(A.shape[1])
    Sa = np.atleast_2d(np.cov(A, rowvar=False)) + eye
    Sb = np.atleast_2d(np.cov(B, rowvar=False)) + eye
    diff = A.mean(axis=0) - B.mean(axis=0)
    cross = 0.5 * (_trace_sqrt_product(Sa, Sb) + _trace_sqrt_product(Sb, Sa))
    fd = float(diff @ diff + np.trace(Sa) + np.trace(Sb) - 2.0 * cross)
    return max(fd, 0.0)


def median_bandwidth(*sets) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    pooled = np.vstack([_check_set(s, "set", 1) for s in sets])
    d = pdist(pooled)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def _gauss(D, bw):
    return np.exp(-(D**2) / (2.0 * bw**2))


def mmd(A, B, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel.

    The bandwidth defaults to the median pairwise distance of the pooled
    sample.  For equal sample sizes the paired U-statistic is used (the
    ``i == j`` cross pairs are dropped too), so ``mmd(A, A) == 0``.
    """
    A = _check_set(A, "A")
    B = _check_set(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError("feature dimensions differ")
    bw = median_bandwidth(A, B) if bandwidth is None else float(bandwidth)
    if bw <= 0:
        raise ValueError("bandwidth must be positive")
    m, n = len(A), len(B)
    Kaa = _gauss(pairwise_distances(A, A), bw)
    Kbb = _gauss(pairwise_distances(B, B), bw)
    Kab = _gauss(pairwise_distances(A, B), bw)
    aa = (Kaa.sum() - np.trace(Kaa)) / (m * (m - 1))
    bb = (Kbb.sum() - np.trace(Kbb)) / (n * (n - 1))
    if m == n:
        ab = (Kab.sum() - np.trace(Kab)) / (m * (m - 1))
    else:
        ab = Kab.mean()
    return float(aa + bb - 2.0 * ab)


@dataclass(frozen=True)
class TemporalTrace:
    values: np.ndarray  # (T,) probability of the target class
    probs: np.ndarray  # (T, C) full softmax rows
    target: int
    smoothing: int = 1


def causal_pool(states, window: int | None = None) -> np.ndarray:
    """Running mean over steps ``<= t`` (or over the trailing ``window`` steps)."""
    S = np.asarray(states, dtype=np.float64)
    csum = np.cumsum(S, axis=0)
    count = np.arange(1, len(S) + 1, dtype=np.float64)
    if window is None or window >= len(S):
        return csum / count[:, None]
    out = csum.copy()
    out[window:] -= csum[:-window]
    return out / np.minimum(count, window)[:, None]


def moving_average(x, width: int) -> np.ndarray:
    """Trailing moving average; the first ``width - 1`` entries use what exists."""
    x = np.asarray(x, dtype=np.float64)
    if width <= 1:
        return x.copy()
    c = np.cumsum(x, axis=0)
    out = c.copy()
    out[width:] -= c[:-width]
    n = np.minimum(np.arange(1, len(x) + 1), width).astype(np.float64)
    return out / (n if x.ndim == 1 else n[:, None])


def temporal_trace(probe: ConceptProbe, states, target: int, smoothing: int = 1,
                   window: int | None = None) -> TemporalTrace:
    """Per-step probe softmax of ``target`` from causally pooled states.

    ``states`` holds the ``(T, d)`` hidden states at the probe's layer.
    """
    S = np.asarray(states, dtype=np.float64)
    if S.ndim != 2 or np.isnan(S).any():
        raise ValueError("need recorded (T, d) states for the probe's layer")
    probs = multiclass_predict(probe, causal_pool(S, window))
    if not (0 <= target < probs.shape[1]):
        raise ValueError("target class out of range")
    values = np.clip(moving_average(probs[:, target], smoothing), 0.0, 1.0)
    return TemporalTrace(values, probs, int(target), int(smoothing))


def _pearson(x, y):
    x = x - x.mean()
    y = y - y.mean()
    den = np.sqrt((x @ x) * (y @ y))
    return None if den == 0 else float(np.clip((x @ y) / den, -1.0, 1.0))


def trend_stats(xs, ys, tol: float = 0.0, rel_tol: float = 0.0) -> dict:
    """Pearson, Spearman and the number of adjacent decreases beyond tolerance.

    Points are ordered by ``xs``.  A step counts as a violation when
    ``y[i+1] < y[i] - tol - rel_tol * |y[i]|``.  Correlations of a
    zero-variance series are reported as None.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 3:
        raise ValueError("need two equal-length series of at least 3 points")
    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], ys[order]
    drops = ys[1:] < ys[:-1] - tol - rel_tol * np.abs(ys[:-1])
    return {
        "pearson": _pearson(xs, ys),
        "spearman": _pearson(rankdata(xs), rankdata(ys)),
        "monotone_violations": int(drops.sum()),
    }
