"""K_{p,q} kernels, kernel ridge regression and analytic input gradients.

The kernel family is ``k(x, z) = exp(-||x - z||_p^q / L^q)`` with
``0 < q <= p <= 2``.  ``p = 2, q = 1`` is the Laplace kernel and
``p = q = 2`` the Gaussian kernel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

# squared distances below this fraction of the squared norms are treated as
# coincident points (Gram-formula round-off)
_COINCIDENT_RTOL = 1e-12
_CHUNK_ELEMS = 2_000_000


@dataclass(frozen=True)
class KernelParams:
    bandwidth: float
    q: float = 1.0
    p: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if not (0 < self.q <= self.p <= 2):
            raise ValueError(f"need 0 < q <= p <= 2, got p={self.p}, q={self.q}")


@dataclass(frozen=True)
class KrrModel:
    params: KernelParams
    train_inputs: np.ndarray  # (n, d)
    alpha: np.ndarray  # (n, c)
    ridge: float

    @property
    def n_outputs(self) -> int:
        return self.alpha.shape[1]


def _as_2d(X, name):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def _check_dims(X, Z):
    if X.shape[1] != Z.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Z.shape[1]}")


def _row_chunks(n_rows, per_row):
    step = max(1, _CHUNK_ELEMS // max(per_row, 1))
    for start in range(0, n_rows, step):
        yield slice(start, min(n_rows, start + step))


def pairwise_distances(X, Z, p=2.0):
    """Matrix of ``||x_i - z_j||_p``; exact zeros for coincident points."""
    X = _as_2d(X, "X")
    Z = _as_2d(Z, "Z")
    _check_dims(X, Z)
    if p == 2.0:
        xx = np.einsum("ij,ij->i", X, X)
        zz = np.einsum("ij,ij->i", Z, Z)
        sq = xx[:, None] + zz[None, :] - 2.0 * (X @ Z.T)
        scale = xx[:, None] + zz[None, :]
        sq[sq <= _COINCIDENT_RTOL * scale] = 0.0
        return np.sqrt(sq)
    out = np.empty((X.shape[0], Z.shape[0]))
    for rows in _row_chunks(X.shape[0], Z.shape[0] * X.shape[1]):
        diff = np.abs(X[rows, None, :] - Z[None, :, :])
        out[rows] = np.sum(diff**p, axis=-1) ** (1.0 / p)
    return out


def _kernel_from_dist(dist, params: KernelParams):
    return np.exp(-((dist / params.bandwidth) ** params.q))


def kernel_eval(x, z, params: KernelParams) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if x.shape != z.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {z.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
        raise ValueError("non-finite input")
    dist = np.sum(np.abs(x - z) ** params.p) ** (1.0 / params.p)
    return float(_kernel_from_dist(dist, params))


def kernel_matrix(X, Z, params: KernelParams) -> np.ndarray:
    return _kernel_from_dist(pairwise_distances(X, Z, params.p), params)


def krr_fit(X, Y, params: KernelParams, ridge: float) -> KrrModel:
    """Solve ``(K(X, X) + ridge * I) alpha = Y`` by Cholesky.

    If the factorization fails, diagonal jitter starting at
    ``1e-10 * trace / n`` is added and grown tenfold, up to three retries.
    """
    X = _as_2d(X, "X")
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs but {Y.shape[0]} labels")
    if not np.all(np.isfinite(Y)):
        raise ValueError("labels contain non-finite values")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    n = X.shape[0]
    K = kernel_matrix(X, X, params)
    A = K + ridge * np.eye(n)
    jitter = 1e-10 * np.trace(K) / n
    for attempt in range(4):
        try:
            factor = linalg.cho_factor(A, lower=True, check_finite=False)
            break
        except linalg.LinAlgError:
            if attempt == 3:
                raise
            logger.warning("kernel system not positive definite; adding jitter %.3g", jitter)
            A = A + jitter * np.eye(n)
            jitter *= 10
    alpha = linalg.cho_solve(factor, Y, check_finite=False)
    return KrrModel(params=params, train_inputs=X, alpha=alpha, ridge=float(ridge))


def krr_predict(model: KrrModel, Xq) -> np.ndarray:
    Xq = _as_2d(Xq, "Xq")
    _check_dims(Xq, model.train_inputs)
    out = np.empty((Xq.shape[0], model.n_outputs))
    n_train = model.train_inputs.shape[0]
    for rows in _row_chunks(Xq.shape[0], n_train):
        out[rows] = kernel_matrix(Xq[rows], model.train_inputs, model.params) @ model.alpha
    return out


def krr_input_gradients(model: KrrModel, Xq, channel_mode: str = "per-channel") -> np.ndarray:
    """Gradients of the fitted predictor with respect to its input.

    Returns an ``(m, c, d)`` array for ``channel_mode="per-channel"`` and
    ``(m, d)`` for ``"summed"`` (gradient of the channel sum).

    Uses ``grad_x k(x, z) = k * (-q / L^q) * r^(q-p) * |x - z|^(p-1) * sign(x - z)``
    with ``r = ||x - z||_p``.  Terms at coincident points are zero.
    """
    if channel_mode not in ("per-channel", "summed"):
        raise ValueError(f"unknown channel_mode {channel_mode!r}")
    Xq = _as_2d(Xq, "Xq")
    X = model.train_inputs
    _check_dims(Xq, X)
    pr = model.params
    alpha = model.alpha
    if channel_mode == "summed":
        alpha = alpha.sum(axis=1, keepdims=True)
    m, d = Xq.shape
    c = alpha.shape[1]
    grads = np.zeros((m, c, d))
    for rows in _row_chunks(m, X.shape[0] * (d if pr.p != 2.0 else 1)):
        dist = pairwise_distances(Xq[rows], X, pr.p)
        K = _kernel_from_dist(dist, pr)
        nz = dist > 0
        W = np.zeros_like(dist)
        W[nz] = K[nz] * (-pr.q / pr.bandwidth**pr.q) * dist[nz] ** (pr.q - pr.p)
        if pr.p == 2.0:
            # sum_j W_ij a_jc (x_i - x_j)
            Wa = W @ alpha  # (r, c)
            Xr = Xq[rows]
            for ch in range(c):
                grads[rows, ch] = Wa[:, ch, None] * Xr - W @ (alpha[:, ch, None] * X)
        else:
            diff = Xq[rows, None, :] - X[None, :, :]
            absd = np.abs(diff)
            pos = absd > 0
            powd = np.zeros_like(diff)
            powd[pos] = absd[pos] ** (pr.p - 1.0) * np.sign(diff[pos])
            grads[rows] = np.einsum("rn,nc,rnd->rcd", W, alpha, powd)
    if channel_mode == "summed":
        return grads[:, 0, :]
    return grads
