"""Steering plans: layer weights, time schedules, gates and composition.

The strength applied to direction ``m`` at layer ``l`` and step ``t`` is
``eta0_m * w_l * phi_m(t) * gate(t)`` and the stream update is
``h' = h + sum_m strength_m * q_m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

WEIGHT_KINDS = ("uniform", "linear", "exponential", "top-k")
SCHEDULE_KINDS = ("constant", "linear-rise", "linear-decay", "exp-decay", "logistic-rise", "sine")


def normalize_scores(scores) -> np.ndarray:
    """Min-max map of per-layer scores onto [0, 1]; constant input gives ones."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("need at least one score")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.ones_like(s)
    return (s - lo) / (hi - lo)


@dataclass(frozen=True)
class LayerWeightScheme:
    kind: str = "exponential"
    w0: float = 1.0
    kappa: float = 0.95
    k: int | None = None
    scores: tuple = ()

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight scheme {self.kind!r}")
        if self.kind == "exponential" and not (0 < self.kappa <= 1):
            raise ValueError(f"kappa must be in (0, 1], got {self.kappa}")
        if self.kind == "top-k" and (self.k is None or self.k < 1):
            raise ValueError("top-k needs k >= 1")
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))


def layer_weights(scheme: LayerWeightScheme, n_layers: int | None = None) -> np.ndarray:
    """Per-layer weights.  ``uniform`` needs only ``n_layers`` when no scores are given."""
    if scheme.scores:
        s_hat = normalize_scores(scheme.scores)
    elif scheme.kind == "uniform" and n_layers:
        s_hat = np.ones(n_layers)
    else:
        raise ValueError(f"{scheme.kind} weighting needs per-layer scores")
    if n_layers is not None and s_hat.size != n_layers:
        raise ValueError(f"{s_hat.size} layer scores for a {n_layers}-layer model")
    if scheme.kind == "uniform":
        return np.full(s_hat.size, scheme.w0)
    if scheme.kind == "linear":
        return scheme.w0 * s_hat
    if scheme.kind == "exponential":
        return scheme.w0 * s_hat ** (1.0 / scheme.kappa)
    # top-k: stable sort keeps the lower layer index first among ties
    order = np.argsort(-s_hat, kind="stable")
    w = np.zeros(s_hat.size)
    w[order[: min(scheme.k, s_hat.size)]] = scheme.w0
    return w


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    horizon: float = 1500.0
    decay: float = 0.998
    midpoint: float = 750.0
    scale: float = 200.0
    period: float = 1500.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.horizon <= 0 or self.scale <= 0 or self.period <= 0:
            raise ValueError("schedule horizon, scale and period must be positive")
        if not (0 < self.decay <= 1):
            raise ValueError("decay must be in (0, 1]")


def schedule_eval(sched: Schedule, t):
    """phi(t) in [0, 1]; accepts a scalar or an array of step indices."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("step index must be >= 0")
    k = sched.kind
    if k == "constant":
        phi = np.ones_like(t)
    elif k == "linear-rise":
        phi = np.clip(t / sched.horizon, 0.0, 1.0)
    elif k == "linear-decay":
        phi = 1.0 - np.clip(t / sched.horizon, 0.0, 1.0)
    elif k == "exp-decay":
        phi = sched.decay**t
    elif k == "logistic-rise":
        phi = 1.0 / (1.0 + np.exp(-(t - sched.midpoint) / sched.scale))
    else:
        phi = 0.5 * (1.0 + np.sin(2.0 * np.pi * t / sched.period))
    phi = np.clip(phi, 0.0, 1.0)
    return float(phi) if phi.ndim == 0 else phi


@dataclass(frozen=True)
class PlanEntry:
    """One steered concept.

    ``directions`` is an ``(L, d)`` array of unit rows (zero rows for layers
    without a direction) or None while the entry is still declarative.
    """

    concept: str
    eta0: float
    schedule: Schedule = field(default_factory=Schedule)
    weights: LayerWeightScheme = field(default_factory=lambda: LayerWeightScheme("uniform"))
    target: int | None = None
    directions: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.directions is not None:
            D = np.asarray(self.directions, dtype=np.float64)
            if D.ndim != 2:
                raise ValueError("directions must be an (L, d) array")
            norms = np.linalg.norm(D, axis=1)
            if np.any((norms > 0) & (np.abs(norms - 1.0) > 1e-8)):
                raise ValueError("steering directions must be unit norm")
            D = D.copy()
            D.setflags(write=False)
            object.__setattr__(self, "directions", D)


@dataclass(frozen=True)
class SteeringPlan:
    entries: tuple = ()
    gate_p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.gate_p <= 1.0):
            raise ValueError(f"gate probability must be in [0, 1], got {self.gate_p}")
        object.__setattr__(self, "entries", tuple(self.entries))

    def with_seed(self, seed: int) -> "SteeringPlan":
        return replace(self, seed=int(seed))


def gate_stream(seed: int, p: float, steps: int) -> np.ndarray:
    """Bernoulli(p) gate per step; entry ``t`` depends only on ``(seed, t)``.

    Gates for different ``p`` under one seed are nested (open at ``p`` implies
    open at any larger ``p``).
    """
    if p >= 1.0:
        return np.ones(steps, dtype=bool)
    return np.random.default_rng(seed).random(steps) < p


def effective_coefficient(entry: PlanEntry, layer: int, t: int, gate, n_layers=None) -> float:
    w = layer_weights(entry.weights, n_layers)
    return float(entry.eta0 * w[layer] * schedule_eval(entry.schedule, t) * float(gate))


def apply_steering(h, contributions) -> np.ndarray:
    """``h + sum(eta * q)`` over ``(eta, q)`` pairs."""
    h = np.asarray(h, dtype=np.float64)
    out = h.copy()
    for eta, q in contributions:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != h.shape[-1:]:
            raise ValueError(f"direction has shape {q.shape}, state has width {h.shape[-1]}")
        out = out + eta * q
    return out


def compile_plan(plan: SteeringPlan | None, steps: int, n_layers: int, d: int):
    """Dense ``(coef (M, steps, L), dirs (M, L, d), gates (steps,), active)`` arrays."""
    if plan is None or not plan.entries:
        return np.zeros((0, steps, n_layers)), np.zeros((0, n_layers, d)), np.zeros(steps, bool), False
    gates = gate_stream(plan.seed, plan.gate_p, steps)
    t = np.arange(steps)
    coef = np.empty((len(plan.entries), steps, n_layers))
    dirs = np.empty((len(plan.entries), n_layers, d))
    for m, entry in enumerate(plan.entries):
        if entry.directions is None:
            raise ValueError(f"plan entry {entry.concept!r} has no directions")
        if entry.directions.shape != (n_layers, d):
            raise ValueError(f"directions shape {entry.directions.shape} does not match model ({n_layers}, {d})")
        w = layer_weights(entry.weights, n_layers)
        phi = schedule_eval(entry.schedule, t)
        coef[m] = entry.eta0 * (phi * gates)[:, None] * w[None, :]
        dirs[m] = entry.directions
    return coef, dirs, gates, True


def build_crossfade_plan(dir_a, dir_b, eta0: float, window: float, gate_p: float = 1.0,
                         weights: LayerWeightScheme | None = None, seed: int = 0,
                         concepts=("a", "b"), targets=(None, None),
                         weights_b: LayerWeightScheme | None = None) -> SteeringPlan:
    """Linear decay on ``dir_a`` and complementary linear rise on ``dir_b``.

    ``weights_b`` defaults to ``weights`` (uniform when both are omitted).
    """
    if window <= 0:
        raise ValueError("window must be positive")
    weights = weights or LayerWeightScheme("uniform")
    weights_b = weights_b or weights
    a = PlanEntry(concepts[0], eta0, Schedule("linear-decay", horizon=window), weights, targets[0], dir_a)
    b = PlanEntry(concepts[1], eta0, Schedule("linear-rise", horizon=window), weights_b, targets[1], dir_b)
    return SteeringPlan((a, b), gate_p=gate_p, seed=seed)


def directions_matrix(directions, n_layers: int, d: int) -> np.ndarray:
    """Stack ``SteeringDirection`` objects (or a layer -> vector mapping) into ``(L, d)``."""
    D = np.zeros((n_layers, d))
    items = directions.items() if isinstance(directions, dict) else ((x.layer, x.vector) for x in directions)
    for layer, vec in items:
        vec = getattr(vec, "vector", vec)
        D[layer] = vec
    return D


# -- declarative plan files ------------------------------------------------------


def schedule_to_dict(s: Schedule) -> dict:
    out = {"kind": s.kind}
    defaults = Schedule(s.kind)
    for name in ("horizon", "decay", "midpoint", "scale", "period"):
        if getattr(s, name) != getattr(defaults, name):
            out[name] = getattr(s, name)
    return out


def weights_to_dict(w: LayerWeightScheme) -> dict:
    out = {"kind": w.kind, "w0": w.w0}
    if w.kind == "exponential":
        out["kappa"] = w.kappa
    if w.kind == "top-k":
        out["k"] = w.k
    return out


def plan_to_dict(plan: SteeringPlan) -> dict:
    entries = []
    for e in plan.entries:
        d = {"concept": e.concept, "eta0": e.eta0, "schedule": schedule_to_dict(e.schedule),
             "weights": weights_to_dict(e.weights)}
        if e.target is not None:
            d["target"] = e.target
        entries.append(d)
    return {"entries": entries, "p": plan.gate_p, "seed": plan.seed}


def plan_from_dict(d: dict) -> SteeringPlan:
    entries = []
    for e in d.get("entries", []):
        sched = Schedule(**e.get("schedule", {}))
        w = e.get("weights", {"kind": "uniform"})
        weights = LayerWeightScheme(kind=w.get("kind", "uniform"), w0=w.get("w0", 1.0),
                                    kappa=w.get("kappa", 0.95), k=w.get("k"))
        entries.append(PlanEntry(e["concept"], float(e["eta0"]), sched, weights, e.get("target")))
    return SteeringPlan(tuple(entries), gate_p=float(d.get("p", 1.0)), seed=int(d.get("seed", 0)))
