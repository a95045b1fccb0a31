"""Seeded random search over RFM hyperparameters and the layer aggregation probe."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .kernels import KernelParams
from .rfm import ConceptProbe, RfmConfig, rfm_train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperSearchSpace:
    bandwidth: tuple = (1.0, 100.0)  # log-uniform
    q: tuple = (0.7, 1.4)  # uniform
    ridge: tuple = (1e-5, 10.0)  # log-uniform
    center: tuple = (False, True)
    general_p: bool = False  # K_{p,q} with p ~ U(q, 2) instead of K_{2,q}
    n_draws: int = 100

    @classmethod
    def layerwise(cls, n_draws: int = 100) -> "HyperSearchSpace":
        return cls(n_draws=n_draws)

    @classmethod
    def aggregation(cls, n_draws: int = 300) -> "HyperSearchSpace":
        return cls(general_p=True, n_draws=n_draws)

    def sample(self, rng: np.random.Generator) -> dict:
        bw = math.exp(rng.uniform(math.log(self.bandwidth[0]), math.log(self.bandwidth[1])))
        q = float(rng.uniform(*self.q))
        p = float(rng.uniform(q, 2.0)) if self.general_p else 2.0
        ridge = math.exp(rng.uniform(math.log(self.ridge[0]), math.log(self.ridge[1])))
        center = bool(self.center[rng.integers(len(self.center))])
        return {"bandwidth": bw, "q": q, "p": p, "ridge": ridge, "centered": center}


def trial_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


@dataclass
class Trial:
    index: int
    config: dict
    score: float | None
    error: str | None = None


@dataclass
class SearchResult:
    best_index: int
    best_config: dict
    best_score: float
    best_artifact: object
    trials: list


def hyperparameter_search(space: HyperSearchSpace, objective, seed: int, n_jobs: int = 1) -> SearchResult:
    """Evaluate ``objective(config)`` on ``space.n_draws`` seeded draws.

    The objective returns a score or ``(score, artifact)``.  Trial ``i`` draws
    from its own generator seeded by ``(seed, i)``, so the log is the same
    whatever ``n_jobs`` is.  Failing trials are logged and skipped; ties go
    to the earliest trial.
    """
    if space.n_draws < 1:
        raise ValueError("need at least one draw")
    configs = [space.sample(trial_rng(seed, i)) for i in range(space.n_draws)]

    def run(i):
        try:
            out = objective(configs[i])
            score, artifact = out if isinstance(out, tuple) else (out, None)
            score = float(score)
            if not math.isfinite(score):
                raise ValueError(f"non-finite score {score}")
            return Trial(i, configs[i], score), artifact
        except Exception as exc:  # noqa: BLE001 - a bad draw must not end the search
            logger.warning("trial %d failed: %s", i, exc)
            return Trial(i, configs[i], None, f"{type(exc).__name__}: {exc}"), None

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(run, range(space.n_draws)))
    else:
        results = [run(i) for i in range(space.n_draws)]

    best = None
    for trial, artifact in results:
        if trial.score is not None and (best is None or trial.score > best[0].score):
            best = (trial, artifact)
    if best is None:
        raise RuntimeError("every search trial failed")
    trials = [r[0] for r in results]
    return SearchResult(best[0].index, best[0].config, best[0].score, best[1], trials)


def config_from_trial(trial: dict, iterations: int = 15, exponent: float = 0.5) -> RfmConfig:
    params = KernelParams(bandwidth=trial["bandwidth"], q=trial["q"], p=trial["p"])
    return RfmConfig(params, ridge=trial["ridge"], iterations=iterations, exponent=exponent,
                     centered=trial["centered"])


def tune_probe(X_train, y_train, X_val, y_val, task, space: HyperSearchSpace, seed: int,
               iterations: int = 15, exponent: float = 0.5, n_jobs: int = 1, **probe_kw):
    """Random search returning ``(best ConceptProbe, SearchResult)``."""

    def objective(trial):
        cfg = config_from_trial(trial, iterations, exponent)
        probe = rfm_train(X_train, y_train, X_val, y_val, task, cfg, **probe_kw)
        return probe.score, probe

    result = hyperparameter_search(space, objective, seed, n_jobs)
    return result.best_artifact, result


def _accuracy_objective(task):
    def score(probe, X, y):
        if task == "multiclass":
            return float(np.mean(probe.predict(X) == y))
        if task == "binary":
            return float(np.mean((probe.predict(X) > 0.5) == (y == 1)))
        return -float(np.mean((probe.predict(X) - y) ** 2))

    return score


def stack_layer_predictions(per_layer, n_layers: int | None = None) -> np.ndarray:
    """``(n, L, C)`` array or list of ``(n, C)`` arrays -> ``(n, L*C)``."""
    if isinstance(per_layer, (list, tuple)):
        arrs = [np.atleast_2d(np.asarray(a, dtype=np.float64).T).T for a in per_layer]
        if len({a.shape for a in arrs}) != 1:
            raise ValueError("per-layer prediction arrays differ in shape")
        P = np.stack(arrs, axis=1)
    else:
        P = np.asarray(per_layer, dtype=np.float64)
        if P.ndim == 2:
            P = P[:, :, None]
    if P.ndim != 3:
        raise ValueError("expected per-layer predictions shaped (n, L, C)")
    if n_layers is not None and P.shape[1] != n_layers:
        raise ValueError(f"expected {n_layers} layers of predictions, got {P.shape[1]}")
    return P.reshape(P.shape[0], -1)


def train_aggregation_model(train_preds, y_train, val_preds, y_val, task: str = "multiclass",
                            space: HyperSearchSpace | None = None, seed: int = 0,
                            iterations: int = 15, exponent: float = 0.5, n_layers: int | None = None,
                            n_jobs: int = 1) -> ConceptProbe:
    """RFM over stacked per-layer probe outputs, tuned for validation accuracy."""
    space = space or HyperSearchSpace.aggregation()
    Xtr = stack_layer_predictions(train_preds, n_layers)
    Xva = stack_layer_predictions(val_preds, n_layers)
    if Xtr.shape[1] != Xva.shape[1]:
        raise ValueError("train and validation predictions have different layer counts")
    acc = _accuracy_objective(task)

    def objective(trial):
        cfg = config_from_trial(trial, iterations, exponent)
        probe = rfm_train(Xtr, y_train, Xva, y_val, task, cfg, layer=-1)
        return acc(probe, Xva, np.asarray(y_val)), probe

    return hyperparameter_search(space, objective, seed, n_jobs).best_artifact
