"""Closed-form ridge linear probe used as a baseline for RFM probes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_RIDGES = tuple(10.0 ** np.arange(-4, 4))


@dataclass(frozen=True)
class LinearProbe:
    task: str
    weights: np.ndarray  # (d + 1, c), last row is the bias
    ridge: float
    score: float

    def raw_outputs(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return X @ self.weights[:-1] + self.weights[-1]

    def predict(self, X):
        out = self.raw_outputs(X)
        if self.task == "multiclass":
            return np.argmax(out, axis=1)
        return out[:, 0]


def _solve(X, Y, ridge):
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    reg = ridge * np.eye(Xb.shape[1])
    reg[-1, -1] = 0.0
    return np.linalg.solve(Xb.T @ Xb + reg, Xb.T @ Y)


def fit_linear_probe(X_train, y_train, X_val, y_val, task: str, ridges=DEFAULT_RIDGES) -> LinearProbe:
    """Least squares on one-hot (or scalar) targets; ridge picked on validation.

    Validation metric is accuracy for classification and negated MSE for
    regression.
    """
    X = np.asarray(X_train, dtype=np.float64)
    Xv = np.asarray(X_val, dtype=np.float64)
    y = np.asarray(y_train)
    yv = np.asarray(y_val)
    if task == "multiclass":
        Y = np.eye(int(max(y.max(), yv.max())) + 1)[y.astype(int)]
    else:
        Y = y.astype(np.float64)[:, None]
    best = None
    for r in ridges:
        probe = LinearProbe(task, _solve(X, Y, r), float(r), 0.0)
        pred = probe.predict(Xv)
        if task == "multiclass":
            score = float(np.mean(pred == yv))
        elif task == "binary":
            score = float(np.mean((pred > 0.5) == (yv == 1)))
        else:
            score = -float(np.mean((pred - yv) ** 2))
        if best is None or score > best.score:
            best = LinearProbe(task, probe.weights, float(r), score)
    return best
