"""Experiment configuration: YAML in, validated frozen dataclasses out.

Every rejected value is reported as ``<file>:<line>: <dotted.key>: <reason>``
so a bad config can be fixed without guessing.  Unknown and duplicate keys
are errors too.  Defaults reproduce the reference steering setting (gate
probability 0.3, exponential layer weighting with kappa 0.95 and w0 1).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import CONCEPT_KINDS, ConceptSpec
from .model import ModelConfig
from .steering import SCHEDULE_KINDS, WEIGHT_KINDS, LayerWeightScheme, Schedule

_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_-]*$")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = "", line: int | None = None, source: str = "<config>"):
        self.key, self.line, self.source, self.reason = key, line, source, message
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {key}: {message}" if key else f"{where}: {message}")


# -- settings ----------------------------------------------------------------------


@dataclass(frozen=True)
class ConceptConfig:
    spec: ConceptSpec
    n_per_class: int


@dataclass(frozen=True)
class ProbeSettings:
    iterations: int = 15
    exponent: float = 0.5
    search_draws: int = 100
    aggregation_draws: int = 300
    aggregation: bool = False
    bandwidth: tuple = (1.0, 100.0)
    q: tuple = (0.7, 1.4)
    ridge: tuple = (1e-5, 10.0)
    poolings: tuple = ("mean",)
    binary_per_class: int | None = None  # balanced subsample for one-vs-rest probes


@dataclass(frozen=True)
class PairwiseSettings:
    pairs: tuple = ()
    combos: tuple = ((0.3, 0.3), (0.3, 0.6), (0.6, 0.3), (0.6, 0.6))
    n_generations: int = 50
    p: float = 0.3


@dataclass(frozen=True)
class SteerSettings:
    concepts: tuple = ()
    eta0: tuple = (0.15, 0.3, 0.45, 0.6)
    schedules: tuple = (Schedule("constant"),)
    weightings: tuple = (LayerWeightScheme("exponential", w0=1.0, kappa=0.95),)
    p: tuple = (0.3,)
    n_generations: int = 50
    steps: int = 64
    prompt_length: int = 1
    target_class: int | None = 0  # dominance class steered toward; None rotates through classes
    pairwise: PairwiseSettings | None = None


@dataclass(frozen=True)
class AblateSettings:
    concept: str = ""
    eta0: float = 0.45
    k_values: tuple = (4, 8, 12, 16, 24, 32, None)  # None = all layers
    kappas: tuple = (0.98, 0.95, 0.92)
    p_values: tuple = (0.15, 0.3, 0.45, 0.6, 0.75, 0.9, 1.0)
    n_generations: int = 50


@dataclass(frozen=True)
class TraceSettings:
    concept: str = ""
    schedules: tuple = ("linear-rise", "linear-decay", "exp-decay", "logistic-rise", "sine")
    eta0: float = 0.45
    p: float = 1.0
    weighting: LayerWeightScheme = LayerWeightScheme("exponential", w0=1.0, kappa=0.95)
    steps: int = 1500
    n_generations: int = 100
    crossfade: bool = True
    window: int = 1500
    pool_window: int | None = 64
    smoothing: int = 25


@dataclass(frozen=True)
class ExperimentConfig:
    concepts: tuple
    model: ModelConfig = ModelConfig()
    model_seed: int = 0
    seed: int = 0
    output_dir: str = "runs/default"
    jobs: int = 1
    probes: ProbeSettings = ProbeSettings()
    steer: SteerSettings = SteerSettings()
    ablate: AblateSettings = AblateSettings()
    trace: TraceSettings = TraceSettings()
    source: str = field(default="<config>", compare=False)
    text_hash: str = field(default="", compare=False)

    def concept(self, name: str) -> ConceptConfig:
        for c in self.concepts:
            if c.spec.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        d.pop("text_hash")
        return d

    def digest(self) -> str:
        """Hash of the resolved settings (stable under comment or key-order edits)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


# -- YAML with positions ---------------------------------------------------------------


def _index_nodes(node, source, path=(), out=None):
    """Map every key path to the 1-based line it appears on."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for k, v in node.value:
            key = k.value
            if key in seen:
                raise ConfigError("duplicate key", ".".join(map(str, path + (key,))), k.start_mark.line + 1, source)
            seen.add(key)
            _index_nodes(v, source, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _index_nodes(v, source, path + (i,), out)
    return out


_MISSING = object()


class _Reader:
    def __init__(self, data, lines, source):
        self.data, self.lines, self.source = data, lines, source
        self.used = set()

    def _key(self, path):
        out = ""
        for p in path:
            out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
        return out

    def _line(self, path):
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)

    def fail(self, path, msg):
        raise ConfigError(msg, self._key(path), self._line(path), self.source)

    def raw(self, path):
        node = self.data
        for p in path:
            if isinstance(p, int):
                node = node[p]
            elif isinstance(node, dict) and p in node:
                node = node[p]
            else:
                return _MISSING
        return node

    def mapping(self, path, required=False):
        self.used.add(path)
        v = self.raw(path)
        if v is _MISSING or v is None:
            if required:
                self.fail(path, "required section is missing")
            return {}
        if not isinstance(v, dict):
            self.fail(path, "expected a mapping")
        return v

    def get(self, path, kind, default=None, *, required=False, lo=None, hi=None,
            lo_open=False, choices=None, nullable=False):
        self.used.add(path)
        v = self.raw(path)
        if v is _MISSING:
            if required:
                self.fail(path, "required key is missing")
            return default
        return self.check(path, v, kind, lo=lo, hi=hi, lo_open=lo_open, choices=choices, nullable=nullable)

    def check(self, path, v, kind, *, lo=None, hi=None, lo_open=False, choices=None, nullable=False):
        if v is None:
            if nullable:
                return None
            self.fail(path, "value must not be empty")
        if kind is bool:
            if not isinstance(v, bool):
                self.fail(path, f"expected true/false, got {v!r}")
            return v
        if kind is int:
            if isinstance(v, bool) or not isinstance(v, int):
                self.fail(path, f"expected an integer, got {v!r}")
        elif kind is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                self.fail(path, f"expected a number, got {v!r}")
            v = float(v)
            if v != v or v in (float("inf"), float("-inf")):
                self.fail(path, "value must be finite")
        elif kind is str:
            if not isinstance(v, str):
                self.fail(path, f"expected a string, got {v!r}")
        if choices is not None and v not in choices:
            self.fail(path, f"{v!r} is not one of {', '.join(map(str, choices))}")
        if lo is not None and (v <= lo if lo_open else v < lo):
            self.fail(path, f"{v} is below the allowed range ({'>' if lo_open else '>='} {lo})")
        if hi is not None and v > hi:
            self.fail(path, f"{v} is above the allowed range (<= {hi})")
        return v

    def seq(self, path, default=None, *, min_len=1):
        self.used.add(path)
        v = self.raw(path)
        if v is _MISSING:
            return default
        if not isinstance(v, list):
            self.fail(path, "expected a list")
        if len(v) < min_len:
            self.fail(path, f"list needs at least {min_len} item(s)")
        for i in range(len(v)):
            self.used.add(path + (i,))
        return v

    def unknown_keys(self):
        def walk(node, path):
            if isinstance(node, dict):
                for k, v in node.items():
                    p = path + (k,)
                    if p not in self.used:
                        self.fail(p, "unknown key")
                    walk(v, p)
            elif isinstance(node, list):
                for i, v in enumerate(node):
                    walk(v, path + (i,))

        walk(self.data, ())


# -- section parsers -------------------------------------------------------------------


def _range(r, path, lo, hi, positive=False):
    v = r.seq(path, None)
    if v is None:
        return None
    if len(v) != 2:
        r.fail(path, "expected [low, high]")
    a = r.check(path + (0,), v[0], float, lo=0.0 if positive else None, lo_open=positive)
    b = r.check(path + (1,), v[1], float)
    if not (a < b):
        r.fail(path, f"low {a} must be below high {b}")
    if (lo is not None and a < lo) or (hi is not None and b > hi):
        r.fail(path, f"range must lie within [{lo}, {hi}]")
    return (a, b)


def _model(r):
    base = ("model",)
    r.mapping(base)
    d = ModelConfig()
    kw = {
        "n_layers": r.get(base + ("n_layers",), int, d.n_layers, lo=1, hi=256),
        "d_model": r.get(base + ("d_model",), int, d.d_model, lo=8, hi=4096),
        "vocab_size": r.get(base + ("vocab_size",), int, d.vocab_size, lo=4, hi=100000),
        "embed_scale": r.get(base + ("embed_scale",), float, d.embed_scale, lo=0.0, lo_open=True),
        "context_gain": r.get(base + ("context_gain",), float, d.context_gain, lo=0.0),
        "prev_gain": r.get(base + ("prev_gain",), float, d.prev_gain, lo=0.0),
        "block_scale": r.get(base + ("block_scale",), float, d.block_scale, lo=0.0),
        "logit_scale": r.get(base + ("logit_scale",), float, d.logit_scale, lo=0.0, lo_open=True),
        "inject": r.get(base + ("inject",), str, d.inject, choices=("pre", "post")),
    }
    seed = r.get(base + ("seed",), int, 0, lo=0)
    return ModelConfig(**kw), seed


def _concepts(r, vocab_size):
    items = r.seq(("concepts",), None)
    if items is None:
        r.fail(("concepts",), "required key is missing")
    out, names = [], set()
    for i, _ in enumerate(items):
        base = ("concepts", i)
        r.mapping(base, required=True)
        name = r.get(base + ("name",), str, required=True)
        if not _NAME_RE.match(name):
            r.fail(base + ("name",), "names must start with a letter and use only letters, digits, '-' or '_'")
        if name in names:
            r.fail(base + ("name",), f"concept name {name!r} is used twice")
        names.add(name)
        kind = r.get(base + ("kind",), str, required=True, choices=CONCEPT_KINDS)
        d = ConceptSpec(name, kind)
        kw = {
            "seq_len": r.get(base + ("seq_len",), int, d.seq_len, lo=8, hi=100000),
            "purity": r.get(base + ("purity",), float, d.purity, lo=0.0, hi=1.0, lo_open=True),
            "vocab_size": vocab_size,
        }
        n = r.get(base + ("n_per_class",), int, 400, lo=2)
        if kind == "dominance":
            kw["n_classes"] = r.get(base + ("n_classes",), int, d.n_classes, lo=2, hi=vocab_size)
        if kind == "motif":
            m = r.seq(base + ("motif",), None)
            if m is not None:
                if len(m) != 2:
                    r.fail(base + ("motif",), "expected a bigram [a, b]")
                kw["motif"] = tuple(r.check(base + ("motif", j), m[j], int, lo=0, hi=vocab_size - 1)
                                    for j in range(2))
            kw["min_count"] = r.get(base + ("min_count",), int, d.min_count, lo=1)
        if kind == "period":
            ps = r.seq(base + ("periods",), None, min_len=2)
            if ps is not None:
                kw["periods"] = tuple(r.check(base + ("periods", j), v, int, lo=1, hi=vocab_size)
                                      for j, v in enumerate(ps))
                if len(set(kw["periods"])) != len(kw["periods"]):
                    r.fail(base + ("periods",), "period values must be distinct")
        try:
            spec = ConceptSpec(name, kind, **kw)
        except ValueError as exc:
            r.fail(base, str(exc))
        out.append(ConceptConfig(spec, n))
    return tuple(out)


def _weighting(r, path, default):
    if r.raw(path) is _MISSING:
        r.used.add(path)
        return default
    r.mapping(path, required=True)
    kind = r.get(path + ("kind",), str, "exponential", choices=WEIGHT_KINDS)
    w0 = r.get(path + ("w0",), float, 1.0, lo=0.0, lo_open=True)
    kappa = r.get(path + ("kappa",), float, 0.95, lo=0.0, hi=1.0, lo_open=True)
    k = r.get(path + ("k",), int, None, lo=1, nullable=True)
    if kind == "top-k" and k is None:
        r.fail(path + ("k",), "top-k weighting needs k")
    return LayerWeightScheme(kind, w0=w0, kappa=kappa, k=k)


def _schedule(r, path):
    v = r.raw(path)
    r.used.add(path)
    if isinstance(v, str):
        return Schedule(r.check(path, v, str, choices=SCHEDULE_KINDS))
    r.mapping(path, required=True)
    d = Schedule()
    return Schedule(
        kind=r.get(path + ("kind",), str, required=True, choices=SCHEDULE_KINDS),
        horizon=r.get(path + ("horizon",), float, d.horizon, lo=0.0, lo_open=True),
        decay=r.get(path + ("decay",), float, d.decay, lo=0.0, hi=1.0, lo_open=True),
        midpoint=r.get(path + ("midpoint",), float, d.midpoint),
        scale=r.get(path + ("scale",), float, d.scale, lo=0.0, lo_open=True),
        period=r.get(path + ("period",), float, d.period, lo=0.0, lo_open=True),
    )


def _concept_ref(r, path, names, default):
    v = r.get(path, str, default, required=default is None)
    if v not in names:
        r.fail(path, f"unknown concept {v!r} (known: {', '.join(sorted(names))})")
    return v


def _floats(r, path, default, **bounds):
    v = r.seq(path, None)
    if v is None:
        return default
    return tuple(r.check(path + (i,), x, float, **bounds) for i, x in enumerate(v))


def _probes(r):
    base = ("probes",)
    r.mapping(base)
    d = ProbeSettings()
    poolings = r.seq(base + ("poolings",), None)
    if poolings is not None:
        poolings = tuple(r.check(base + ("poolings", i), v, str, choices=("mean", "last"))
                         for i, v in enumerate(poolings))
        if "mean" not in poolings:
            r.fail(base + ("poolings",), "mean pooling is required (steering uses mean-pooled probes)")
    return ProbeSettings(
        iterations=r.get(base + ("iterations",), int, d.iterations, lo=0, hi=1000),
        exponent=r.get(base + ("exponent",), float, d.exponent, lo=0.0, lo_open=True),
        search_draws=r.get(base + ("search_draws",), int, d.search_draws, lo=1),
        aggregation_draws=r.get(base + ("aggregation_draws",), int, d.aggregation_draws, lo=1),
        aggregation=r.get(base + ("aggregation",), bool, d.aggregation),
        bandwidth=_range(r, base + ("bandwidth",), None, None, positive=True) or d.bandwidth,
        q=_range(r, base + ("q",), 0.0, 2.0, positive=True) or d.q,
        ridge=_range(r, base + ("ridge",), None, None, positive=True) or d.ridge,
        poolings=poolings or d.poolings,
        binary_per_class=r.get(base + ("binary_per_class",), int, None, lo=2, nullable=True),
    )


def _steer(r, names, n_classes):
    base = ("steer",)
    r.mapping(base)
    d = SteerSettings()
    cs = r.seq(base + ("concepts",), None)
    if cs is None:
        concepts = tuple(names)
    else:
        concepts = tuple(_concept_ref(r, base + ("concepts", i), names, None) for i in range(len(cs)))
    sch = r.seq(base + ("schedules",), None)
    schedules = d.schedules if sch is None else tuple(_schedule(r, base + ("schedules", i)) for i in range(len(sch)))
    ws = r.seq(base + ("weightings",), None)
    weightings = d.weightings if ws is None else tuple(
        _weighting(r, base + ("weightings", i), None) for i in range(len(ws)))
    pw = None
    if r.raw(base + ("pairwise",)) not in (_MISSING, None):
        pb = base + ("pairwise",)
        r.mapping(pb)
        pd = PairwiseSettings()
        pairs = []
        for i, pair in enumerate(r.seq(pb + ("pairs",), [], min_len=1) or []):
            pp = pb + ("pairs", i)
            if not isinstance(pair, list) or len(pair) != 2:
                r.fail(pp, "each pair lists exactly two concepts")
            a = _concept_ref(r, pp + (0,), names, None)
            b = _concept_ref(r, pp + (1,), names, None)
            r.used.update({pp + (0,), pp + (1,)})
            if a == b:
                r.fail(pp, "a pair needs two different concepts")
            pairs.append((a, b))
        if not pairs:
            r.fail(pb + ("pairs",), "required key is missing")
        combos = pd.combos
        raw_c = r.seq(pb + ("combos",), None)
        if raw_c is not None:
            combos = []
            for i, c in enumerate(raw_c):
                cp = pb + ("combos", i)
                if not isinstance(c, list) or len(c) != 2:
                    r.fail(cp, "each combo lists two coefficients")
                combos.append(tuple(r.check(cp + (j,), c[j], float, lo=-10.0, hi=10.0) for j in range(2)))
            combos = tuple(combos)
        pw = PairwiseSettings(tuple(pairs), combos,
                              r.get(pb + ("n_generations",), int, pd.n_generations, lo=2),
                              r.get(pb + ("p",), float, pd.p, lo=0.0, hi=1.0))
    else:
        r.used.add(base + ("pairwise",))
    return SteerSettings(
        concepts=concepts,
        eta0=_floats(r, base + ("eta0",), d.eta0, lo=-10.0, hi=10.0),
        schedules=schedules,
        weightings=weightings,
        p=_floats(r, base + ("p",), d.p, lo=0.0, hi=1.0),
        n_generations=r.get(base + ("n_generations",), int, d.n_generations, lo=2),
        steps=r.get(base + ("steps",), int, d.steps, lo=1, hi=100000),
        prompt_length=r.get(base + ("prompt_length",), int, d.prompt_length, lo=1, hi=1024),
        target_class=r.get(base + ("target_class",), int, d.target_class, lo=0, hi=n_classes - 1,
                           nullable=True),
        pairwise=pw,
    )


def _ablate(r, names, classification):
    base = ("ablate",)
    r.mapping(base)
    d = AblateSettings()
    default = classification[0] if classification else None
    concept = ""
    if default or r.raw(base + ("concept",)) is not _MISSING:
        concept = _concept_ref(r, base + ("concept",), names, default)
        if concept not in classification:
            r.fail(base + ("concept",), "ablations need a classification concept")
    ks = r.seq(base + ("k_values",), None)
    k_values = d.k_values if ks is None else tuple(
        r.check(base + ("k_values", i), v, int, lo=1, nullable=True) for i, v in enumerate(ks))
    return AblateSettings(
        concept=concept,
        eta0=r.get(base + ("eta0",), float, d.eta0, lo=-10.0, hi=10.0),
        k_values=k_values,
        kappas=_floats(r, base + ("kappas",), d.kappas, lo=0.0, hi=1.0, lo_open=True),
        p_values=_floats(r, base + ("p_values",), d.p_values, lo=0.0, hi=1.0),
        n_generations=r.get(base + ("n_generations",), int, d.n_generations, lo=2),
    )


def _trace(r, names, multiclass):
    base = ("trace",)
    r.mapping(base)
    d = TraceSettings()
    default = multiclass[0] if multiclass else None
    concept = ""
    if default or r.raw(base + ("concept",)) is not _MISSING:
        concept = _concept_ref(r, base + ("concept",), names, default)
        if concept not in multiclass:
            r.fail(base + ("concept",), "traces need a dominance (multiclass) concept")
    sch = r.seq(base + ("schedules",), None)
    schedules = d.schedules if sch is None else tuple(
        r.check(base + ("schedules", i), v, str, choices=SCHEDULE_KINDS) for i, v in enumerate(sch))
    if len(set(schedules)) != len(schedules):
        r.fail(base + ("schedules",), "schedule kinds must be distinct")
    return TraceSettings(
        concept=concept,
        schedules=schedules,
        eta0=r.get(base + ("eta0",), float, d.eta0, lo=-10.0, hi=10.0),
        p=r.get(base + ("p",), float, d.p, lo=0.0, hi=1.0),
        weighting=_weighting(r, base + ("weighting",), d.weighting),
        steps=r.get(base + ("steps",), int, d.steps, lo=2, hi=100000),
        n_generations=r.get(base + ("n_generations",), int, d.n_generations, lo=1),
        crossfade=r.get(base + ("crossfade",), bool, d.crossfade),
        window=r.get(base + ("window",), int, d.window, lo=1),
        pool_window=r.get(base + ("pool_window",), int, d.pool_window, lo=1, nullable=True),
        smoothing=r.get(base + ("smoothing",), int, d.smoothing, lo=1),
    )


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        loader = yaml.SafeLoader(text)
        try:
            node = loader.get_single_node()
            data = loader.construct_document(node) if node is not None else None
        finally:
            loader.dispose()
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ConfigError(f"invalid YAML: {exc.problem}", "", mark.line + 1 if mark else None, source) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", "", None, source) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", "", 1, source)
    lines = _index_nodes(node, source)
    r = _Reader(data, lines, source)

    model, model_seed = _model(r)
    concepts = _concepts(r, model.vocab_size)
    names = [c.spec.name for c in concepts]
    classification = [c.spec.name for c in concepts if c.spec.kind != "period"]
    multiclass = [c.spec.name for c in concepts if c.spec.kind == "dominance"]
    cfg = ExperimentConfig(
        concepts=concepts,
        model=model,
        model_seed=model_seed,
        seed=r.get(("seed",), int, 0, lo=0, hi=2**32 - 1),
        output_dir=r.get(("output_dir",), str, "runs/default"),
        jobs=r.get(("jobs",), int, 1, lo=1, hi=256),
        probes=_probes(r),
        steer=_steer(r, names, min((c.spec.n_classes for c in concepts if c.spec.kind == "dominance"),
                                   default=2)),
        ablate=_ablate(r, names, classification),
        trace=_trace(r, names, multiclass),
        source=source,
        text_hash=hashlib.sha256(text.encode()).hexdigest(),
    )
    r.unknown_keys()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", "", None, str(path)) from None
    return parse_config(text, str(path))
