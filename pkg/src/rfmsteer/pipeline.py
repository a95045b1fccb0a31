"""Experiment stages driven by an :class:`ExperimentConfig`.

Stages write under one output directory::

    data/<concept>.tsv                 gen-data
    probes/<concept>/...               train-probes (probe files, directions, scores)
    probes/layer_scores.csv, probes/summary.csv
    steer/metrics.csv, steer/pairwise.csv, steer/<concept>_generations.tsv
    ablate/topk.csv, ablate/weighting.csv, ablate/p.csv
    trace/<schedule>.csv, trace/crossfade.csv, trace/summary.csv
    report.md, report.json             report
    manifest.json                      every file above, with hashes and timings

All randomness is derived from the master seed and a string key, so a cell's
generations do not depend on which other cells run or in what order.  Every
cell of a sweep reuses the same generation seeds and gate streams; this makes
the zero-coefficient row equal to the baseline and removes sampling noise from
the comparison between cells.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import platform
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .baselines import fit_linear_probe
from .config import ExperimentConfig
from .data import ConceptSpec, read_dataset, synth_dataset, write_dataset
from .metrics import (
    causal_pool,
    frechet_distance,
    median_bandwidth,
    mmd,
    moving_average,
    trend_stats,
)
from .model import FrozenModel, build_model, extract_features, generate_batch
from .rfm import ConceptProbe, extract_direction, load_probe, roc_auc, save_probe, softmax, split_indices
from .search import HyperSearchSpace, train_aggregation_model, tune_probe
from .steering import (
    LayerWeightScheme,
    PlanEntry,
    Schedule,
    SteeringPlan,
    build_crossfade_plan,
    schedule_eval,
)

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "train-probes", "steer", "ablate", "trace", "report")
METRIC_COLUMNS = ("run_id", "concept", "eta0", "schedule", "weighting", "p", "kappa", "K",
                  "FD", "MMD", "accuracy", "seed")
PAIRWISE_COLUMNS = ("run_id", "pair", "concept", "eta0", "other_concept", "other_eta0",
                    "FD", "MMD", "accuracy", "seed")
SCORE_COLUMNS = ("concept", "pooling", "model", "layer", "target", "val_score", "test_score")
SUMMARY_COLUMNS = ("concept", "pooling", "model", "layer", "metric", "value")
MANIFEST_FORMAT = "rfmsteer.manifest"


class PipelineError(RuntimeError):
    """A stage could not run (missing inputs, unwritable output, bad artifacts)."""


def derive_seed(master: int, *keys) -> int:
    """32-bit seed from the master seed and a tuple of keys (stable across runs)."""
    words = [int(master)] + [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# -- small IO helpers --------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    return str(v)


def write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    """``manifest.json``: one record per stage listing the files it wrote.

    A file belongs to exactly one stage.  Re-running a stage replaces its
    record and deletes files it listed before but did not write again.
    """

    def __init__(self, out: Path):
        self.out = out
        self.path = out / "manifest.json"
        self.data = {"format": MANIFEST_FORMAT, "version": 1, "stages": {}}
        if self.path.exists():
            try:
                data = json.loads(self.path.read_text())
            except json.JSONDecodeError as exc:
                raise PipelineError(f"{self.path} is corrupt: {exc}") from None
            if data.get("format") == MANIFEST_FORMAT:
                self.data = data

    def files(self) -> list[str]:
        return sorted(f["path"] for s in self.data["stages"].values() for f in s["files"])

    def record(self, stage: str, cfg: ExperimentConfig, files, seeds: dict, seconds: float) -> None:
        rel = sorted({str(Path(f).resolve().relative_to(self.out.resolve())) for f in files})
        old = self.data["stages"].get(stage, {}).get("files", [])
        for entry in old:
            if entry["path"] not in rel:
                (self.out / entry["path"]).unlink(missing_ok=True)
        for name, st in self.data["stages"].items():
            if name != stage:
                st["files"] = [f for f in st["files"] if f["path"] not in rel]
        self.data["config_hash"] = cfg.digest()
        self.data["config_source"] = cfg.source
        self.data["versions"] = versions()
        self.data["stages"][stage] = {
            "config_hash": cfg.digest(),
            "seeds": seeds,
            "seconds": round(seconds, 3),
            "files": [{"path": p, "bytes": (self.out / p).stat().st_size, "sha256": _sha256(self.out / p)}
                      for p in rel],
        }
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def versions() -> dict:
    return {"rfmsteer": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pyyaml": yaml.__version__}


# -- run context -----------------------------------------------------------------------------


@dataclass
class RunContext:
    cfg: ExperimentConfig
    out: Path
    jobs: int = 1

    @cached_property
    def model(self) -> FrozenModel:
        return build_model(self.cfg.model, self.cfg.model_seed)

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def map(self, fn, items):
        items = list(items)
        if self.jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]


def make_context(cfg: ExperimentConfig, out=None, seed=None, jobs=None) -> RunContext:
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    out = Path(out if out is not None else cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PipelineError(f"output directory {out} is not writable: {exc.strerror}") from None
    return RunContext(cfg, out, int(jobs if jobs is not None else cfg.jobs))


def _finish(ctx: RunContext, stage: str, files, seeds: dict, t0: float) -> list[Path]:
    seeds = {"master": ctx.seed, **seeds}
    Manifest(ctx.out).record(stage, ctx.cfg, files, seeds, time.perf_counter() - t0)
    return [Path(f) for f in files]


# -- gen-data ----------------------------------------------------------------------------------


def cmd_gen_data(ctx: RunContext) -> list[Path]:
    t0 = time.perf_counter()
    files, seeds = [], {}
    for cc in ctx.cfg.concepts:
        spec = cc.spec
        seeds[spec.name] = derive_seed(ctx.seed, "data", spec.name)
        ds = synth_dataset(spec, cc.n_per_class, seeds[spec.name])
        path = ctx.path("data", f"{spec.name}.tsv")
        write_dataset(path, ds)
        files.append(path)
        counts = np.bincount(ds.labels, minlength=spec.class_count)
        print(f"{spec.name} ({spec.kind}): {len(ds)} records; per class " + " ".join(map(str, counts)))
    return _finish(ctx, "gen-data", files, seeds, t0)


def _load_dataset(ctx: RunContext, spec: ConceptSpec):
    path = ctx.out / "data" / f"{spec.name}.tsv"
    if not path.exists():
        raise PipelineError(f"missing dataset {path}; run gen-data first")
    ds = read_dataset(path, spec)
    if ds.tokens.shape[1] != spec.seq_len or len(ds) == 0:
        raise PipelineError(f"{path} does not match the configured concept {spec.name!r}")
    return ds


# -- train-probes ---------------------------------------------------------------------------------


def _space(ctx: RunContext) -> HyperSearchSpace:
    pc = ctx.cfg.probes
    return HyperSearchSpace(bandwidth=pc.bandwidth, q=pc.q, ridge=pc.ridge, n_draws=pc.search_draws)


def _balanced(labels, idx, target, cap, rng):
    """Indices of all (or ``cap``) class-``target`` samples plus as many others."""
    pos = idx[labels[idx] == target]
    neg = idx[labels[idx] != target]
    n = min(len(pos), len(neg))
    if cap is not None:
        n = min(n, cap)
    pos = np.sort(rng.choice(pos, n, replace=False))
    neg = np.sort(rng.choice(neg, n, replace=False))
    return np.concatenate([pos, neg])


def _r2(pred, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    sst = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum((pred - y) ** 2)) / sst if sst > 0 else 0.0


def _test_score(probe, X, y) -> float:
    if probe.task == "binary":
        return roc_auc(y, probe.predict(X))
    if probe.task == "regression":
        return _r2(probe.predict(X), y)
    return float(np.mean(probe.predict(X) == y))


def _accuracy(task, pred, y) -> float:
    if task == "binary":
        pred = (pred > 0.5).astype(int)
    return float(np.mean(pred == y))


@dataclass
class _ProbeJob:
    pooling: str
    layer: int
    target: int  # class index for one-vs-rest probes, 0 otherwise


def _train_concept(ctx: RunContext, cc, files, score_rows, summary_rows, seeds):
    spec = cc.spec
    pc = ctx.cfg.probes
    ds = _load_dataset(ctx, spec)
    L = ctx.model.n_layers
    tr, va, te = split_indices(len(ds), derive_seed(ctx.seed, "split", spec.name))
    seeds[f"{spec.name}/split"] = derive_seed(ctx.seed, "split", spec.name)
    feats = extract_features(ctx.model, ds.tokens, tuple(pc.poolings))
    feats = dict(zip(pc.poolings, feats))
    labels, y = ds.labels, ds.y
    space = _space(ctx)
    n_targets = spec.n_classes if spec.kind == "dominance" else 1
    task = "regression" if spec.kind == "period" else "binary"

    def subsets(target):
        rng = np.random.default_rng(derive_seed(ctx.seed, "subset", spec.name, target))
        if spec.kind == "dominance":
            return (_balanced(labels, tr, target, pc.binary_per_class, rng),
                    _balanced(labels, va, target, None, rng), te)
        if spec.kind == "motif" and pc.binary_per_class is not None:
            return _balanced(labels, tr, 1, pc.binary_per_class, rng), va, te
        return tr, va, te

    def job_labels(target, idx):
        if spec.kind == "dominance":
            return (labels[idx] == target).astype(int)
        return y[idx]

    def run(job: _ProbeJob) -> ConceptProbe:
        X = feats[job.pooling][:, job.layer]
        itr, iva, _ = subsets(job.target)
        probe, _ = tune_probe(X[itr], job_labels(job.target, itr), X[iva], job_labels(job.target, iva), task,
                              space, derive_seed(ctx.seed, "search", spec.name, job.pooling, job.layer, job.target),
                              iterations=pc.iterations, exponent=pc.exponent, layer=job.layer,
                              pooling=job.pooling, concept=spec.name)
        return probe

    for pooling in pc.poolings:
        jobs = [_ProbeJob(pooling, layer, t) for layer in range(L) for t in range(n_targets)]
        probes = ctx.map(run, jobs)
        val = np.zeros((n_targets, L))
        dirs = np.zeros((n_targets, L, ctx.model.d_model))
        for job, probe in zip(jobs, probes):
            suffix = f"_c{job.target}" if spec.kind == "dominance" else ""
            path = ctx.path("probes", spec.name, pooling, f"layer{job.layer:02d}{suffix}.npz")
            save_probe(path, probe)
            files.append(path)
            X = feats[pooling][te, job.layer]
            test = _test_score(probe, X, job_labels(job.target, te))
            val[job.target, job.layer] = probe.score
            score_rows.append({"concept": spec.name, "pooling": pooling, "model": f"rfm-{task}",
                               "layer": job.layer, "target": job.target, "val_score": probe.score,
                               "test_score": test})
            if pooling == "mean":
                try:
                    dirs[job.target, job.layer] = extract_direction(probe).vector
                except ValueError:
                    logger.warning("%s layer %d target %d: no direction", spec.name, job.layer, job.target)

        # linear baselines on the concept's native task, one per layer
        native = "multiclass" if spec.kind == "dominance" else task
        best_lin = None
        for layer in range(L):
            X = feats[pooling][:, layer]
            lin = fit_linear_probe(X[tr], y[tr], X[va], y[va], native)
            test = _r2(lin.predict(X[te]), y[te]) if native == "regression" else _accuracy(native, lin.predict(X[te]), y[te])
            score_rows.append({"concept": spec.name, "pooling": pooling, "model": f"linear-{native}",
                               "layer": layer, "target": 0, "val_score": lin.score, "test_score": test})
            if best_lin is None or lin.score > best_lin[0]:
                best_lin = (lin.score, layer, test)
        metric = "r2" if native == "regression" else "accuracy"
        summary_rows.append({"concept": spec.name, "pooling": pooling, "model": "linear", "layer": best_lin[1],
                             "metric": metric, "value": best_lin[2]})

        # the evaluation probe sits at the layer with the best mean validation score
        best_layer = int(np.argmax(val.mean(axis=0)))
        if spec.kind == "dominance":
            X = feats[pooling][:, best_layer]
            ev, _ = tune_probe(X[tr], labels[tr], X[va], labels[va], "multiclass", space,
                               derive_seed(ctx.seed, "search", spec.name, pooling, "eval"),
                               iterations=pc.iterations, exponent=pc.exponent, layer=best_layer,
                               pooling=pooling, concept=spec.name, n_classes=spec.n_classes)
        else:
            ev = probes[best_layer]
        path = ctx.path("probes", spec.name, pooling, "eval.npz")
        save_probe(path, ev)
        files.append(path)
        Xte = feats[pooling][te, best_layer]
        value = _r2(ev.predict(Xte), y[te]) if native == "regression" else _accuracy(native, ev.predict(Xte), y[te])
        summary_rows.append({"concept": spec.name, "pooling": pooling, "model": "rfm", "layer": best_layer,
                             "metric": metric, "value": value})
        print(f"{spec.name} [{pooling}]: RFM {metric} {value:.3f} at layer {best_layer}; "
              f"linear {best_lin[2]:.3f} at layer {best_lin[1]}")

        if pc.aggregation and spec.kind == "dominance":
            P = np.stack([p.raw_outputs(feats[pooling][:, j.layer])[:, 0] for j, p in zip(jobs, probes)], axis=1)
            P = P.reshape(len(P), L, n_targets)
            agg = train_aggregation_model(P[tr], labels[tr], P[va], labels[va], "multiclass",
                                          HyperSearchSpace.aggregation(pc.aggregation_draws),
                                          derive_seed(ctx.seed, "aggregation", spec.name, pooling),
                                          pc.iterations, pc.exponent, n_layers=L, n_jobs=ctx.jobs)
            path = ctx.path("probes", spec.name, pooling, "aggregation.npz")
            save_probe(path, agg)
            files.append(path)
            acc = float(np.mean(agg.predict(P[te].reshape(len(te), -1)) == labels[te]))
            summary_rows.append({"concept": spec.name, "pooling": pooling, "model": "rfm-aggregation",
                                 "layer": -1, "metric": "accuracy", "value": acc})

        if pooling == "mean":
            path = ctx.path("probes", spec.name, "directions.npz")
            with open(path, "wb") as fh:
                np.savez(fh, directions=dirs, scores=val, eval_layer=np.array(best_layer),
                         kind=np.array(spec.kind))
            files.append(path)


def cmd_train_probes(ctx: RunContext) -> list[Path]:
    t0 = time.perf_counter()
    files, score_rows, summary_rows, seeds = [], [], [], {}
    for cc in ctx.cfg.concepts:
        _train_concept(ctx, cc, files, score_rows, summary_rows, seeds)
    files.append(write_csv(ctx.path("probes", "layer_scores.csv"), SCORE_COLUMNS, score_rows))
    files.append(write_csv(ctx.path("probes", "summary.csv"), SUMMARY_COLUMNS, summary_rows))
    return _finish(ctx, "train-probes", files, seeds, t0)


# -- steering assets ---------------------------------------------------------------------------------


@dataclass
class ConceptAssets:
    name: str
    kind: str
    directions: np.ndarray  # (targets, L, d)
    scores: np.ndarray  # (targets, L) validation scores of the direction probes
    eval_layer: int
    eval_probe: ConceptProbe | None

    @property
    def n_targets(self) -> int:
        return self.directions.shape[0]

    def targets(self, n: int, fixed: int | None = None):
        """Per-generation (direction index, coefficient sign) pairs.

        Dominance concepts steer every generation toward class ``fixed``, or
        rotate through the classes when it is None.  Other concepts use their
        single direction with a positive sign.
        """
        if self.kind == "dominance":
            if fixed is not None:
                return [(int(fixed), 1.0)] * n
            return [(i % self.n_targets, 1.0) for i in range(n)]
        return [(0, 1.0)] * n

    def entry(self, target: int, eta0: float, schedule: Schedule, weighting: LayerWeightScheme) -> PlanEntry:
        scheme = replace(weighting, scores=tuple(self.scores[target]))
        return PlanEntry(self.name, float(eta0), schedule, scheme, int(target), self.directions[target])

    def accuracy(self, feats_eval, targets) -> float | None:
        """Mean per-target probe accuracy on generations (None for regression)."""
        if self.eval_probe is None or self.kind == "period":
            return None
        targets = np.asarray(targets)
        if self.kind == "motif":
            return float(np.mean(self.eval_probe.predict(feats_eval) > 0.5))
        pred = self.eval_probe.predict(feats_eval)
        return float(np.mean([np.mean(pred[targets == c] == c) for c in np.unique(targets)]))


def load_assets(ctx: RunContext, name: str) -> ConceptAssets:
    base = ctx.out / "probes" / name
    dpath = base / "directions.npz"
    if not dpath.exists():
        raise PipelineError(f"missing {dpath}; run train-probes first")
    with np.load(dpath, allow_pickle=False) as z:
        dirs, scores = z["directions"], z["scores"]
        layer, kind = int(z["eval_layer"]), str(z["kind"])
    if dirs.shape[1:] != (ctx.model.n_layers, ctx.model.d_model):
        raise PipelineError(f"{dpath}: directions {dirs.shape[1:]} do not match the model "
                            f"({ctx.model.n_layers}, {ctx.model.d_model})")
    probe = load_probe(base / "mean" / "eval.npz") if (base / "mean" / "eval.npz").exists() else None
    if probe is not None and probe.transform.shape[0] != ctx.model.d_model:
        raise PipelineError(f"{name}: evaluation probe width does not match the model")
    return ConceptAssets(name, kind, dirs, scores, layer, probe)


# -- generation and cell evaluation -----------------------------------------------------------------


def _prompts(ctx: RunContext, key, n: int) -> np.ndarray:
    P = ctx.cfg.steer.prompt_length
    return np.stack([np.random.default_rng(derive_seed(ctx.seed, key, "prompt", i)).integers(0, ctx.model.vocab_size, P)
                     for i in range(n)])


def _pooled(model: FrozenModel, tokens, layers, chunk=64) -> np.ndarray:
    """Mean-pooled ``(N, len(layers), d)`` features of whole sequences."""
    out = np.empty((len(tokens), len(layers), model.d_model))
    for s in range(0, len(tokens), chunk):
        _, h = model.forward(tokens[s : s + chunk], layers=layers)
        out[s : s + chunk] = h.mean(axis=1)
    return out


@dataclass
class _Batch:
    """Fixed generation inputs shared by all cells of one sweep."""

    key: tuple
    prompts: np.ndarray
    seeds: np.ndarray
    gate_seeds: np.ndarray

    @classmethod
    def make(cls, ctx, key, n):
        seeds = np.array([derive_seed(ctx.seed, *key, "gen", i) for i in range(n)], dtype=np.int64)
        gates = np.array([derive_seed(ctx.seed, *key, "gate", i) for i in range(n)], dtype=np.int64)
        return cls(key, _prompts(ctx, key, n), seeds, gates)


class _Evaluator:
    """Generates a batch under per-row plans and scores it against the unsteered batch."""

    def __init__(self, ctx: RunContext, batch: _Batch, steps: int, assets: list):
        self.ctx, self.batch, self.steps, self.assets = ctx, batch, steps, assets
        L = ctx.model.n_layers
        self.layers = sorted({L - 1} | {a.eval_layer for a in assets})
        self.base_tokens = self._generate(None)
        self.base = self._features(self.base_tokens)
        self.bandwidth = median_bandwidth(self.base[L - 1])

    def _generate(self, plans):
        traces = generate_batch(self.ctx.model, self.batch.prompts, self.steps, self.batch.seeds, plans)
        return np.stack([t.tokens for t in traces])

    def _features(self, tokens):
        f = _pooled(self.ctx.model, tokens, self.layers)
        return {layer: f[:, i] for i, layer in enumerate(self.layers)}

    def score(self, plans, targets_by_concept):
        tokens = self.base_tokens if plans is None else self._generate(plans)
        feats = self.base if plans is None else self._features(tokens)
        final = self.ctx.model.n_layers - 1
        fd = frechet_distance(self.base[final], feats[final])
        dist = mmd(self.base[final], feats[final], self.bandwidth)
        accs = {a.name: a.accuracy(feats[a.eval_layer], targets_by_concept[a.name]) for a in self.assets}
        return tokens, fd, dist, accs


def _weight_fields(w: LayerWeightScheme, L: int) -> dict:
    return {"weighting": w.kind, "kappa": w.kappa if w.kind == "exponential" else None,
            "K": (min(w.k, L) if w.kind == "top-k" else None)}


def _sweep(ctx, assets: ConceptAssets, batch: _Batch, steps: int, cells, run_prefix: str):
    """Evaluate ``cells`` of (eta0, schedule, weighting, p); returns rows and token records."""
    ev = _Evaluator(ctx, batch, steps, [assets])
    tg = assets.targets(len(batch.seeds), ctx.cfg.steer.target_class)
    targets = {assets.name: [t for t, _ in tg]}
    L = ctx.model.n_layers

    def run(indexed):
        idx, (eta0, schedule, weighting, p) = indexed
        plans = [SteeringPlan((assets.entry(t, sign * eta0, schedule, weighting),), gate_p=p, seed=int(gs))
                 for (t, sign), gs in zip(tg, batch.gate_seeds)]
        tokens, fd, dist, accs = ev.score(plans, targets)
        row = {"run_id": f"{run_prefix}-{idx:03d}", "concept": assets.name, "eta0": abs(eta0),
               "schedule": schedule.kind, "p": p, **_weight_fields(weighting, L),
               "FD": fd, "MMD": dist, "accuracy": accs[assets.name], "seed": ctx.seed}
        return row, tokens

    results = ctx.map(run, enumerate(cells))
    _, fd0, mmd0, base_acc = ev.score(None, targets)
    baseline = {"run_id": f"{run_prefix}-base", "concept": assets.name, "eta0": 0.0, "schedule": "none",
                "weighting": "none", "p": 0.0, "FD": fd0, "MMD": mmd0, "accuracy": base_acc[assets.name],
                "seed": ctx.seed}
    return baseline, results, ev.base_tokens, tg


def _write_generations(path: Path, records) -> Path:
    rows = []
    for run_id, tokens, tg, seeds in records:
        for i, (seq, (t, sign), s) in enumerate(zip(tokens, tg, seeds)):
            rows.append({"run_id": run_id, "generation": i, "target": t, "sign": int(sign), "seed": int(s),
                         "tokens": " ".join(map(str, seq))})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        cols = ("run_id", "generation", "target", "sign", "seed", "tokens")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])
    return path


# -- steer ------------------------------------------------------------------------------------------


def cmd_steer(ctx: RunContext) -> list[Path]:
    t0 = time.perf_counter()
    sc = ctx.cfg.steer
    files, rows, seeds = [], [], {}
    for name in sc.concepts:
        assets = load_assets(ctx, name)
        batch = _Batch.make(ctx, ("steer", name), sc.n_generations)
        seeds[f"steer/{name}"] = [int(s) for s in batch.seeds]
        cells = list(itertools.product(sc.schedules, sc.weightings, sc.p, sc.eta0))
        cells = [(eta0, sched, w, p) for sched, w, p, eta0 in cells]
        baseline, results, base_tokens, tg = _sweep(ctx, assets, batch, sc.steps, cells, f"steer-{name}")
        rows.append(baseline)
        records = [(baseline["run_id"], base_tokens, tg, batch.seeds)]
        for row, tokens in results:
            rows.append(row)
            records.append((row["run_id"], tokens, tg, batch.seeds))
            acc = "n/a" if row["accuracy"] is None else f"{row['accuracy']:.3f}"
            print(f"{row['run_id']}: eta0={row['eta0']:.2f} {row['schedule']} {row['weighting']} p={row['p']:.2f} "
                  f"FD={row['FD']:.4f} MMD={row['MMD']:.4f} acc={acc}")
        files.append(_write_generations(ctx.path("steer", f"{name}_generations.tsv"), records))
    files.append(write_csv(ctx.path("steer", "metrics.csv"), METRIC_COLUMNS, rows))

    if sc.pairwise is not None:
        files.append(_pairwise(ctx, sc, seeds))
    return _finish(ctx, "steer", files, seeds, t0)


def _pairwise(ctx: RunContext, sc, seeds) -> Path:
    pw = sc.pairwise
    weighting = sc.weightings[0]
    sched = Schedule("constant")
    rows = []
    for a_name, b_name in pw.pairs:
        a, b = load_assets(ctx, a_name), load_assets(ctx, b_name)
        batch = _Batch.make(ctx, ("pair", a_name, b_name), pw.n_generations)
        seeds[f"pair/{a_name}+{b_name}"] = [int(s) for s in batch.seeds]
        ev = _Evaluator(ctx, batch, sc.steps, [a, b])
        fixed = ctx.cfg.steer.target_class
        ta, tb = a.targets(pw.n_generations, fixed), b.targets(pw.n_generations, fixed)
        targets = {a_name: [t for t, _ in ta], b_name: [t for t, _ in tb]}
        pair = f"{a_name}+{b_name}"
        _, fd0, mmd0, acc0 = ev.score(None, targets)
        runs = [("base", 0.0, 0.0, fd0, mmd0, acc0)]
        for k, (ea, eb) in enumerate(pw.combos):
            plans = [SteeringPlan((a.entry(t1, s1 * ea, sched, weighting), b.entry(t2, s2 * eb, sched, weighting)),
                                  gate_p=pw.p, seed=int(gs))
                     for (t1, s1), (t2, s2), gs in zip(ta, tb, batch.gate_seeds)]
            _, fd, dist, accs = ev.score(plans, targets)
            runs.append((f"{k:02d}", ea, eb, fd, dist, accs))
        for tag, ea, eb, fd, dist, accs in runs:
            for name, eta, other, other_eta in ((a_name, ea, b_name, eb), (b_name, eb, a_name, ea)):
                rows.append({"run_id": f"pair-{pair}-{tag}", "pair": pair, "concept": name, "eta0": eta,
                             "other_concept": other, "other_eta0": other_eta, "FD": fd, "MMD": dist,
                             "accuracy": accs[name], "seed": ctx.seed})
            print(f"pair-{pair}-{tag}: ({ea:.2f}, {eb:.2f}) FD={fd:.4f} acc=" +
                  ", ".join(f"{n}={'n/a' if v is None else f'{v:.3f}'}" for n, v in accs.items()))
    return write_csv(ctx.path("steer", "pairwise.csv"), PAIRWISE_COLUMNS, rows)


# -- ablate ------------------------------------------------------------------------------------------


def cmd_ablate(ctx: RunContext) -> list[Path]:
    t0 = time.perf_counter()
    ac = ctx.cfg.ablate
    if not ac.concept:
        raise PipelineError("ablations need a classification concept in the config")
    assets = load_assets(ctx, ac.concept)
    L = ctx.model.n_layers
    batch = _Batch.make(ctx, ("ablate", ac.concept), ac.n_generations)
    const = Schedule("constant")
    uniform = LayerWeightScheme("uniform")
    sweeps = {
        "topk": [(ac.eta0, const, LayerWeightScheme("top-k", k=L if k is None else k), 1.0) for k in ac.k_values],
        "weighting": ([(ac.eta0, const, LayerWeightScheme("linear"), 1.0)]
                      + [(ac.eta0, const, LayerWeightScheme("exponential", kappa=k), 1.0) for k in ac.kappas]
                      + [(ac.eta0, const, uniform, 1.0)]),
        "p": [(ac.eta0, const, uniform, p) for p in ac.p_values],
    }
    files = []
    for name, cells in sweeps.items():
        _, results, _, _ = _sweep(ctx, assets, batch, ctx.cfg.steer.steps, cells, f"ablate-{name}")
        rows = [r for r, _ in results]
        for r in rows:
            if name == "topk" and r["K"] is None:
                r["K"] = L
            print(f"{r['run_id']}: {r['weighting']} K={r['K']} kappa={r['kappa']} p={r['p']} "
                  f"FD={r['FD']:.4f} MMD={r['MMD']:.4f} acc={r['accuracy']:.3f}")
        files.append(write_csv(ctx.path("ablate", f"{name}.csv"), METRIC_COLUMNS, rows))
    return _finish(ctx, "ablate", files, {"ablate": [int(s) for s in batch.seeds]}, t0)


# -- trace --------------------------------------------------------------------------------------------


def _trace_probs(ctx: RunContext, assets: ConceptAssets, tokens, prompt_len: int) -> np.ndarray:
    """``(N, steps, C)`` probe softmax from causally pooled states of the generated tokens."""
    tc = ctx.cfg.trace
    probe = assets.eval_probe
    out = []
    for s in range(0, len(tokens), 8):
        _, h = ctx.model.forward(tokens[s : s + 8], layers=[assets.eval_layer])
        for states in h[:, prompt_len:, 0]:
            pooled = causal_pool(states, tc.pool_window)
            out.append(softmax(probe.raw_outputs(pooled), axis=1))
    return np.stack(out)


def _crossings(x) -> int:
    s = np.sign(x)
    s = s[s != 0]
    return int(np.sum(s[1:] != s[:-1]))


def cmd_trace(ctx: RunContext) -> list[Path]:
    t0 = time.perf_counter()
    tc = ctx.cfg.trace
    if not tc.concept:
        raise PipelineError("traces need a dominance concept in the config")
    assets = load_assets(ctx, tc.concept)
    if assets.eval_probe is None or assets.eval_probe.task != "multiclass":
        raise PipelineError(f"{tc.concept} has no multiclass evaluation probe")
    N, steps, C = tc.n_generations, tc.steps, assets.n_targets
    batch = _Batch.make(ctx, ("trace", tc.concept), N)
    P = batch.prompts.shape[1]
    t = np.arange(steps)
    files, summary = [], []

    def stats(series, phi, label):
        st = trend_stats(phi, series) if np.ptp(phi) > 0 else {"pearson": None, "spearman": None}
        return {"series": label, "pearson": st["pearson"], "spearman": st["spearman"],
                "start": series[0], "end": series[-1]}

    for kind in tc.schedules:
        sched = Schedule(kind)
        tg = assets.targets(N)
        plans = [SteeringPlan((assets.entry(c, tc.eta0, sched, tc.weighting),), gate_p=tc.p, seed=int(gs))
                 for (c, _), gs in zip(tg, batch.gate_seeds)]
        tokens = np.stack([g.tokens for g in generate_batch(ctx.model, batch.prompts, steps, batch.seeds, plans)])
        probs = _trace_probs(ctx, assets, tokens, P)
        target = np.array([c for c, _ in tg])
        raw = probs[np.arange(N), :, target].mean(axis=0)
        smooth = moving_average(raw, tc.smoothing)
        phi = schedule_eval(sched, t)
        rows = [{"t": i, "phi": phi[i], "softmax": smooth[i]} for i in range(steps)]
        files.append(write_csv(ctx.path("trace", f"{kind}.csv"), ("t", "phi", "softmax"), rows))
        summary.append(stats(smooth, phi, kind))
        print(f"trace {kind}: pearson={summary[-1]['pearson']}")

    if tc.crossfade:
        pairs = [(i % C, (i % C + 1 + (i // C) % (C - 1)) % C) for i in range(N)]
        plans = [build_crossfade_plan(assets.directions[a], assets.directions[b], tc.eta0, tc.window,
                                      gate_p=tc.p, seed=int(gs), concepts=(assets.name, assets.name),
                                      targets=(a, b),
                                      weights=replace(tc.weighting, scores=tuple(assets.scores[a])),
                                      weights_b=replace(tc.weighting, scores=tuple(assets.scores[b])))
                 for (a, b), gs in zip(pairs, batch.gate_seeds)]
        tokens = np.stack([g.tokens for g in generate_batch(ctx.model, batch.prompts, steps, batch.seeds, plans)])
        probs = _trace_probs(ctx, assets, tokens, P)
        ia = np.array([a for a, _ in pairs])
        ib = np.array([b for _, b in pairs])
        sa = moving_average(probs[np.arange(N), :, ia].mean(axis=0), tc.smoothing)
        sb = moving_average(probs[np.arange(N), :, ib].mean(axis=0), tc.smoothing)
        pa = schedule_eval(Schedule("linear-decay", horizon=tc.window), t)
        pb = schedule_eval(Schedule("linear-rise", horizon=tc.window), t)
        rows = [{"t": i, "phi_a": pa[i], "phi_b": pb[i], "softmax_a": sa[i], "softmax_b": sb[i]}
                for i in range(steps)]
        files.append(write_csv(ctx.path("trace", "crossfade.csv"),
                               ("t", "phi_a", "phi_b", "softmax_a", "softmax_b"), rows))
        summary.append(stats(sa, pa, "crossfade-a"))
        summary.append(stats(sb, pb, "crossfade-b"))
        summary[-1]["crossings"] = summary[-2]["crossings"] = _crossings(sa - sb)
        print(f"crossfade: A {sa[0]:.3f} -> {sa[-1]:.3f}, B {sb[0]:.3f} -> {sb[-1]:.3f}, "
              f"crossings={summary[-1]['crossings']}")

    files.append(write_csv(ctx.path("trace", "summary.csv"),
                           ("series", "pearson", "spearman", "start", "end", "crossings"), summary))
    return _finish(ctx, "trace", files, {"trace": [int(s) for s in batch.seeds]}, t0)


# -- report ----------------------------------------------------------------------------------------------

ACC_TOL = 0.02
DIST_REL_TOL = 0.05


def _num(v):
    return None if v in ("", None) else float(v)


def _trend(rows, x, y, tol=0.0, rel_tol=0.0):
    pts = [(_num(r[x]), _num(r[y])) for r in rows if _num(r[y]) is not None]
    if len(pts) < 3:
        return None
    xs, ys = zip(*pts)
    return trend_stats(xs, ys, tol=tol, rel_tol=rel_tol)


def collect_checks(out: Path) -> dict:
    """Trend statistics over whatever stage outputs exist in ``out``."""
    checks = {}
    path = out / "probes" / "summary.csv"
    if path.exists():
        checks["probes"] = read_csv(path)
    path = out / "steer" / "metrics.csv"
    if path.exists():
        rows = [r for r in read_csv(path) if r["schedule"] != "none"]
        groups = {}
        for r in rows:
            groups.setdefault((r["concept"], r["schedule"], r["weighting"], r["kappa"], r["K"], r["p"]), []).append(r)
        checks["steer"] = [
            {"group": "/".join(k), "accuracy": _trend(g, "eta0", "accuracy", ACC_TOL),
             "FD": _trend(g, "eta0", "FD", rel_tol=DIST_REL_TOL), "MMD": _trend(g, "eta0", "MMD", rel_tol=DIST_REL_TOL)}
            for k, g in groups.items()
        ]
    for name, x in (("topk", "K"), ("p", "p")):
        path = out / "ablate" / f"{name}.csv"
        if path.exists():
            rows = read_csv(path)
            checks[f"ablate-{name}"] = {"accuracy": _trend(rows, x, "accuracy", ACC_TOL),
                                        "FD": _trend(rows, x, "FD", rel_tol=DIST_REL_TOL)}
    path = out / "trace" / "summary.csv"
    if path.exists():
        checks["trace"] = read_csv(path)
    path = out / "steer" / "pairwise.csv"
    if path.exists():
        checks["pairwise"] = read_csv(path)
    return checks


def _md_table(rows, cols):
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r.get(c)) if not isinstance(r.get(c), str) else r.get(c) for c in cols) + " |")
    return "\n".join(lines)


def cmd_report(ctx: RunContext) -> list[Path]:
    t0 = time.perf_counter()
    checks = collect_checks(ctx.out)
    if not checks:
        raise PipelineError(f"nothing to report in {ctx.out}; run the other stages first")
    parts = ["# Run report", "", f"Config hash `{ctx.cfg.digest()[:16]}`, master seed {ctx.seed}.", "",
             "FD and MMD compare final-layer mean-pooled features of steered generations against unsteered "
             "generations drawn with the same seeds."]
    if "probes" in checks:
        parts += ["", "## Probes (test split)", "", _md_table(checks["probes"], SUMMARY_COLUMNS)]
    if "steer" in checks:
        parts += ["", "## Steering trends over eta0", "",
                  f"Violations count adjacent drops beyond {ACC_TOL} (accuracy) or {DIST_REL_TOL:.0%} relative (FD, MMD).", ""]
        rows = []
        for g in checks["steer"]:
            row = {"group": g["group"]}
            for m in ("accuracy", "FD", "MMD"):
                st = g[m]
                row[m] = "n/a" if st is None else f"spearman {_fmt(st['spearman'])}, violations {st['monotone_violations']}"
            rows.append(row)
        parts.append(_md_table(rows, ("group", "accuracy", "FD", "MMD")))
    for name in ("ablate-topk", "ablate-p"):
        if name in checks:
            c = checks[name]
            parts += ["", f"## {name}", "",
                      "\n".join(f"- {m}: spearman {_fmt(st['spearman'])}, violations {st['monotone_violations']}"
                                for m, st in c.items() if st is not None)]
    if "trace" in checks:
        parts += ["", "## Temporal traces", "",
                  _md_table(checks["trace"], ("series", "pearson", "spearman", "start", "end", "crossings"))]
    if "pairwise" in checks:
        parts += ["", "## Pairwise steering", "", _md_table(checks["pairwise"], PAIRWISE_COLUMNS)]
    md = ctx.path("report.md")
    md.write_text("\n".join(parts) + "\n")
    js = ctx.path("report.json")
    js.write_text(json.dumps(checks, indent=2, sort_keys=True) + "\n")
    print(md.read_text())
    return _finish(ctx, "report", [md, js], {}, t0)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-probes": cmd_train_probes,
    "steer": cmd_steer,
    "ablate": cmd_ablate,
    "trace": cmd_trace,
    "report": cmd_report,
}


def run_all(ctx: RunContext, stages=STAGES) -> None:
    for stage in stages:
        logger.info("stage %s", stage)
        COMMANDS[stage](ctx)
