"""Recursive feature machine probes built on kernel ridge regression.

Each iteration fits a kernel predictor on transformed features, takes the
average gradient outer product (AGOP) of the predictor with respect to the
raw features, and rebuilds the feature transform as ``Q diag(lam^a) Q^T``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .kernels import KernelParams, KrrModel, krr_fit, krr_input_gradients, krr_predict

logger = logging.getLogger(__name__)

TASKS = ("binary", "multiclass", "regression")
POOLINGS = ("mean", "last")
PROBE_FORMAT = "rfmsteer.probe"
PROBE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class AgopMatrix:
    matrix: np.ndarray
    centered: bool = False


@dataclass(frozen=True)
class EigenBasis:
    vectors: np.ndarray  # (d, k), orthonormal columns
    values: np.ndarray  # (k,), descending, >= 0

    @property
    def top(self) -> np.ndarray:
        return self.vectors[:, 0]


@dataclass(frozen=True)
class SteeringDirection:
    layer: int
    vector: np.ndarray  # unit norm
    eigenvalue: float
    sign: int = 1
    concept: str = ""


@dataclass(frozen=True)
class RfmConfig:
    params: KernelParams
    ridge: float = 1e-3
    iterations: int = 15
    exponent: float = 0.5
    centered: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.exponent <= 0:
            raise ValueError("exponent must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


@dataclass
class ConceptProbe:
    """Best-iteration RFM predictor for one concept at one layer."""

    layer: int
    task: str
    model: KrrModel
    transform: np.ndarray
    basis: EigenBasis
    score: float
    best_iteration: int
    config: RfmConfig
    pooling: str = "mean"
    history: list = field(default_factory=list)
    orientation: np.ndarray | None = None
    target_mean: float = 0.0
    target_std: float = 1.0
    concept: str = ""

    @property
    def n_outputs(self) -> int:
        return self.model.n_outputs

    def raw_outputs(self, features) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if X.shape[1] != self.transform.shape[0]:
            raise ValueError(f"probe expects {self.transform.shape[0]} features, got {X.shape[1]}")
        return krr_predict(self.model, X @ self.transform)

    def predict(self, features) -> np.ndarray:
        """Class indices, binary scores or de-normalized regression targets."""
        out = self.raw_outputs(features)
        if self.task == "multiclass":
            return np.argmax(out, axis=1)
        if self.task == "binary":
            return out[:, 0]
        return out[:, 0] * self.target_std + self.target_mean


# -- AGOP and spectral pieces -------------------------------------------------


def compute_agop(grads, centered: bool = False) -> AgopMatrix:
    """``(1/n) sum g g^T`` over a gradient batch.

    ``grads`` is ``(n, d)`` or ``(n, c, d)``; per-channel gradients are
    treated as separate samples.
    """
    G = np.asarray(grads, dtype=np.float64)
    if G.ndim == 3:
        G = G.reshape(-1, G.shape[-1])
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) gradient batch")
    if centered:
        G = G - G.mean(axis=0)
    M = G.T @ G / G.shape[0]
    return AgopMatrix(0.5 * (M + M.T), centered)


def eigendecompose_psd(M) -> EigenBasis:
    A = M.matrix if isinstance(M, AgopMatrix) else np.asarray(M, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got {A.shape}")
    if np.max(np.abs(A - A.T)) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (A + A.T))
    order = np.argsort(vals)[::-1]
    return EigenBasis(vectors=vecs[:, order], values=np.clip(vals[order], 0.0, None))


def feature_map(basis: EigenBasis, exponent: float) -> np.ndarray:
    if exponent <= 0:
        raise ValueError("exponent must be positive")
    Q = basis.vectors
    T = (Q * basis.values**exponent) @ Q.T
    return 0.5 * (T + T.T)


# -- scoring -------------------------------------------------------------------


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    y = np.asarray(labels).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _validation_score(task, raw, y) -> float:
    if task == "binary":
        return roc_auc(y, raw[:, 0])
    if task == "multiclass":
        present = [c for c in range(raw.shape[1]) if 0 < np.sum(y == c) < y.size]
        if not present:
            raise ValueError("validation split holds a single class")
        return float(np.mean([roc_auc(y == c, raw[:, c]) for c in present]))
    return -float(np.mean((raw[:, 0] - y) ** 2))


def _encode_targets(task, y, n_classes=None):
    y = np.asarray(y)
    if task == "binary":
        vals = np.unique(y)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("binary labels must be in {0, 1}")
        if vals.size < 2:
            raise ValueError("binary labels contain a single class")
        return y.astype(np.float64)[:, None], 2
    if task == "multiclass":
        y = y.astype(int)
        C = n_classes or int(y.max()) + 1
        if np.unique(y).size < 2:
            raise ValueError("multiclass labels contain a single class")
        if y.min() < 0 or y.max() >= C:
            raise ValueError("class labels out of range")
        return np.eye(C)[y], C
    if task == "regression":
        return y.astype(np.float64)[:, None], 0
    raise ValueError(f"unknown task {task!r}")


# -- training ------------------------------------------------------------------


def _raw_gradients(model: KrrModel, X_t, T):
    # d f(T x) / dx = T^T grad f, T symmetric
    return krr_input_gradients(model, X_t) @ T


def rfm_train(
    X_train,
    y_train,
    X_val,
    y_val,
    task: str,
    config: RfmConfig,
    layer: int = 0,
    pooling: str = "mean",
    n_classes: int | None = None,
    concept: str = "",
) -> ConceptProbe:
    """Run the RFM loop and keep the iterate with the best validation score.

    Binary labels must be 0/1; multiclass labels are class indices and are
    one-hot encoded; regression targets are z-normalized with training
    statistics.  Validation score is AUC (macro one-vs-rest for multiclass)
    or negated MSE in z-units for regression.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if pooling not in POOLINGS:
        raise ValueError(f"unknown pooling {pooling!r}")
    X = np.asarray(X_train, dtype=np.float64)
    Xv = np.asarray(X_val, dtype=np.float64)
    y = np.asarray(y_train)
    yv = np.asarray(y_val)
    Y, C = _encode_targets(task, y, n_classes)
    mu, sd = 0.0, 1.0
    if task == "regression":
        mu = float(Y.mean())
        sd = float(Y.std()) or 1.0
        Y = (Y - mu) / sd
        yv = (yv.astype(np.float64) - mu) / sd
    if task == "multiclass" and Y.shape[1] != C:
        raise ValueError("channel count mismatch")

    d = X.shape[1]
    T = np.eye(d)
    history = []
    best = None
    agops = {}
    for it in range(config.iterations + 1):
        X_t = X @ T
        model = krr_fit(X_t, Y, config.params, config.ridge)
        score = _validation_score(task, krr_predict(model, Xv @ T), yv)
        history.append(score)
        if best is None or score > best[0]:
            best = (score, it, model, T)
        if it == config.iterations:
            break
        G = _raw_gradients(model, X_t, T)
        agops[it] = (G, compute_agop(G, config.centered))
        basis = eigendecompose_psd(agops[it][1])
        top = basis.values[0]
        if top <= 0:
            logger.info("AGOP vanished at iteration %d; stopping", it)
            break
        T = feature_map(EigenBasis(basis.vectors, basis.values / top), config.exponent)

    score, it, model, T = best
    if it in agops:
        G, M = agops[it]
    else:
        G = _raw_gradients(model, X @ T, T)
        M = compute_agop(G, config.centered)
    orientation = None
    if task == "binary":
        orientation = G[y == 1, 0, :].mean(axis=0)
    elif task == "regression":
        orientation = G[:, 0, :].mean(axis=0)
    return ConceptProbe(
        layer=layer,
        task=task,
        model=model,
        transform=T,
        basis=eigendecompose_psd(M),
        score=float(score),
        best_iteration=it,
        config=config,
        pooling=pooling,
        history=[float(h) for h in history],
        orientation=orientation,
        target_mean=mu,
        target_std=sd,
        concept=concept,
    )


def multiclass_predict(probe: ConceptProbe, features, n_classes: int | None = None) -> np.ndarray:
    """Softmax over the probe's raw channel outputs, one row per input."""
    if probe.task != "multiclass":
        raise ValueError(f"probe is {probe.task}, not multiclass")
    if n_classes is not None and n_classes != probe.n_outputs:
        raise ValueError(f"probe has {probe.n_outputs} channels, expected {n_classes}")
    return softmax(probe.raw_outputs(features), axis=1)


def extract_direction(probe: ConceptProbe) -> SteeringDirection:
    """Top AGOP eigenvector, oriented toward the positive class.

    The sign is chosen so that the mean input gradient of class-1 training
    samples (of all training samples for regression, i.e. toward larger
    targets) has a nonnegative projection.
    """
    if probe.task == "multiclass":
        raise ValueError("directions are extracted from binary or regression probes")
    lam = float(probe.basis.values[0])
    if lam <= 0:
        raise ValueError("top eigenvalue is zero; probe carries no signal")
    q = probe.basis.top.copy()
    sign = 1
    if probe.orientation is not None and float(q @ probe.orientation) < 0:
        sign = -1
    q = sign * q
    q /= np.linalg.norm(q)
    return SteeringDirection(layer=probe.layer, vector=q, eigenvalue=lam, sign=sign, concept=probe.concept)


# -- serialization -------------------------------------------------------------


def save_probe(path, probe: ConceptProbe) -> None:
    """Write a probe as an ``.npz`` archive with a JSON header (no pickle)."""
    cfg = probe.config
    meta = {
        "format": PROBE_FORMAT,
        "version": PROBE_FORMAT_VERSION,
        "layer": probe.layer,
        "task": probe.task,
        "pooling": probe.pooling,
        "concept": probe.concept,
        "score": probe.score,
        "best_iteration": probe.best_iteration,
        "history": probe.history,
        "target_mean": probe.target_mean,
        "target_std": probe.target_std,
        "kernel": {"bandwidth": cfg.params.bandwidth, "q": cfg.params.q, "p": cfg.params.p},
        "ridge": cfg.ridge,
        "iterations": cfg.iterations,
        "exponent": cfg.exponent,
        "centered": cfg.centered,
        "model_ridge": probe.model.ridge,
    }
    arrays = {
        "train_inputs": probe.model.train_inputs,
        "alpha": probe.model.alpha,
        "transform": probe.transform,
        "eigvecs": probe.basis.vectors,
        "eigvals": probe.basis.values,
    }
    if probe.orientation is not None:
        arrays["orientation"] = probe.orientation
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_probe(path) -> ConceptProbe:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != PROBE_FORMAT:
            raise ValueError(f"{path} is not a probe file")
        if meta["version"] > PROBE_FORMAT_VERSION:
            raise ValueError(f"unsupported probe format version {meta['version']}")
        arrays = {k: z[k] for k in z.files if k != "meta"}
    params = KernelParams(**meta["kernel"])
    config = RfmConfig(
        params=params,
        ridge=meta["ridge"],
        iterations=meta["iterations"],
        exponent=meta["exponent"],
        centered=meta["centered"],
    )
    model = KrrModel(params, arrays["train_inputs"], arrays["alpha"], meta["model_ridge"])
    return ConceptProbe(
        layer=meta["layer"],
        task=meta["task"],
        model=model,
        transform=arrays["transform"],
        basis=EigenBasis(arrays["eigvecs"], arrays["eigvals"]),
        score=meta["score"],
        best_iteration=meta["best_iteration"],
        config=config,
        pooling=meta["pooling"],
        history=meta["history"],
        orientation=arrays.get("orientation"),
        target_mean=meta["target_mean"],
        target_std=meta["target_std"],
        concept=meta["concept"],
    )


def split_indices(n: int, seed: int, fractions=(0.7, 0.15, 0.15)):
    """Seeded shuffled train/val/test index split."""
    if n < 3:
        raise ValueError("need at least three samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(fractions[1] * n))
    return perm[:n_tr], perm[n_tr : n_tr + n_va], perm[n_tr + n_va :]
