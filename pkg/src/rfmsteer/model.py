"""Frozen toy autoregressive model with recording and steering hooks.

Each block updates a residual stream ``h[l+1] = h[l] + Block_l(h[l])``.  A
block sees the RMS-normalized current state, the previous position's state
and the causal running mean of all states so far at that layer (a cheap
stand-in for attention), mixes them through a gated tanh unit and writes
back to the stream.  Next-token logits come from the final stream through the
(tied) token embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .rfm import POOLINGS

_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    d_model: int = 64
    vocab_size: int = 32
    embed_scale: float = 0.5
    context_gain: float = 1.0
    prev_gain: float = 1.0
    block_scale: float = 0.5
    logit_scale: float = 0.6
    inject: str = "post"  # add steering after ("post") or before ("pre") each block

    def __post_init__(self):
        if self.n_layers < 1 or self.d_model < 8 or self.vocab_size < 4:
            raise ValueError("need n_layers >= 1, d_model >= 8, vocab_size >= 4")
        if self.inject not in ("pre", "post"):
            raise ValueError(f"inject must be 'pre' or 'post', got {self.inject!r}")


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _rmsnorm(x):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _EPS)


class FrozenModel:
    """Immutable weights; all methods are pure functions of their inputs."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        L, d, V = config.n_layers, config.d_model, config.vocab_size
        s = 1.0 / np.sqrt(d)
        self.embed = _frozen(config.embed_scale * rng.normal(size=(V, d)))
        # input mixing for [current, previous, context] -> hidden, plus gate
        self.w_in = _frozen(
            np.concatenate(
                [
                    rng.normal(scale=s, size=(L, d, d)),
                    config.prev_gain * rng.normal(scale=s, size=(L, d, d)),
                    config.context_gain * rng.normal(scale=s, size=(L, d, d)),
                ],
                axis=1,
            )
        )
        self.w_gate = _frozen(rng.normal(scale=s, size=(L, d, d)))
        self.b_in = _frozen(rng.normal(scale=0.1, size=(L, d)))
        # block outputs share the embedding scale so the normalized dynamics do not depend on it
        self.w_out = _frozen(
            config.embed_scale * config.block_scale * rng.normal(scale=s, size=(L, d, d))
        )

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def d_model(self) -> int:
        return self.config.d_model

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.embed, self.w_in, self.w_gate, self.b_in, self.w_out):
            h.update(a.tobytes())
        return h.hexdigest()

    def _block(self, layer, u, u_prev, ctx):
        z = np.concatenate([u, u_prev, ctx], axis=-1) @ self.w_in[layer] + self.b_in[layer]
        gate = 1.0 / (1.0 + np.exp(-(u @ self.w_gate[layer])))
        return (gate * np.tanh(z)) @ self.w_out[layer]

    def logits(self, h_final):
        d = self.config.d_model
        cfg = self.config
        return cfg.logit_scale * (_rmsnorm(h_final) @ self.embed.T) / (cfg.embed_scale * np.sqrt(d))

    def forward(self, tokens, layers=None) -> tuple[np.ndarray, np.ndarray]:
        """Unsteered pass over whole sequences.

        ``tokens`` is ``(B, T)``.  Returns ``(logits (B, T, V), hidden
        (B, T, k, d))`` where ``hidden[:, t, i]`` is the output of block
        ``layers[i]`` (all blocks by default).
        """
        tokens = self._check_tokens(tokens)
        B, T = tokens.shape
        keep = list(range(self.n_layers)) if layers is None else [int(x) for x in layers]
        slot = {layer: i for i, layer in enumerate(keep)}
        h = self.embed[tokens]
        hidden = np.empty((B, T, len(keep), self.d_model))
        steps = np.arange(1, T + 1, dtype=np.float64)[None, :, None]
        for layer in range(self.n_layers):
            u = _rmsnorm(h)
            u_prev = np.zeros_like(u)
            u_prev[:, 1:] = u[:, :-1]
            ctx = np.cumsum(u, axis=1) / steps
            h = h + self._block(layer, u, u_prev, ctx)
            if layer in slot:
                hidden[:, :, slot[layer]] = h
        return self.logits(h), hidden

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ValueError("need a non-empty token sequence")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise ValueError("tokens must be integers")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ValueError("token id out of range")
        return tokens


def build_model(config: ModelConfig | None = None, seed: int = 0) -> FrozenModel:
    return FrozenModel(config or ModelConfig(), seed)


class _StepState:
    """Per-layer running sums and previous states for incremental decoding."""

    def __init__(self, B, L, d):
        self.sum_u = np.zeros((L, B, d))
        self.prev_u = np.zeros((L, B, d))
        self.count = 0


def _step(model: FrozenModel, state: _StepState, tok, inject=None, record=None):
    """Advance one position for a batch; ``inject`` is ``(B, L, d)`` or None."""
    h = model.embed[tok]
    state.count += 1
    pre = model.config.inject == "pre"
    for layer in range(model.n_layers):
        if inject is not None and pre:
            h = h + inject[:, layer]
        u = _rmsnorm(h)
        state.sum_u[layer] += u
        ctx = state.sum_u[layer] / state.count
        h = h + model._block(layer, u, state.prev_u[layer], ctx)
        state.prev_u[layer] = u
        if inject is not None and not pre:
            h = h + inject[:, layer]
        if record is not None:
            record[:, layer] = h
    return model.logits(h)


@dataclass
class GenerationTrace:
    """One generated sequence.

    ``coefficients`` has shape ``(entries, steps, L)`` and holds the realized
    per-layer steering strengths; ``gates`` the per-step Bernoulli gate.
    ``hidden`` is ``(steps, L, d)`` when recording was requested (NaN for
    layers not recorded).
    """

    tokens: np.ndarray
    prompt_length: int
    coefficients: np.ndarray
    gates: np.ndarray
    hidden: np.ndarray | None = None
    softmax: dict = field(default_factory=dict)

    @property
    def generated(self) -> np.ndarray:
        return self.tokens[self.prompt_length :]


def _sample(probs, u):
    cdf = np.cumsum(probs, axis=1)
    idx = np.sum(cdf < u[:, None] * cdf[:, -1:], axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def generate_batch(
    model: FrozenModel,
    prompts,
    steps: int,
    seeds,
    plans=None,
    record_layers=None,
) -> list[GenerationTrace]:
    """Sample ``steps`` tokens after each prompt, optionally steered.

    ``plans`` is None, a single plan applied to every row, or one plan (or
    None) per row.  Each row samples with its own seeded stream, so a row's
    output depends only on its prompt, seed and plan.  Step ``t`` is the
    forward pass that produces generated token ``t``; the prompt prefix is
    consumed unsteered.
    """
    from .steering import compile_plan  # local import to avoid a cycle

    if steps < 1:
        raise ValueError("steps must be >= 1")
    prompts = model._check_tokens(prompts)
    B, P = prompts.shape
    seeds = np.atleast_1d(np.asarray(seeds, dtype=np.int64))
    if seeds.shape != (B,):
        raise ValueError(f"need one seed per prompt row, got {seeds.shape} for {B} rows")
    if plans is None or not isinstance(plans, (list, tuple)):
        plans = [plans] * B
    if len(plans) != B:
        raise ValueError("need one plan per prompt row")
    L, d = model.n_layers, model.d_model

    compiled = [compile_plan(p, steps, L, d) for p in plans]
    n_entries = max(1, max(c[0].shape[0] for c in compiled))
    coef = np.zeros((B, n_entries, steps, L))
    dirs = np.zeros((B, n_entries, L, d))
    gates = np.zeros((B, steps), dtype=bool)
    steered = np.zeros(B, dtype=bool)
    for b, (cf, dr, gt, active) in enumerate(compiled):
        m = cf.shape[0]
        coef[b, :m] = cf
        dirs[b, :m] = dr
        gates[b] = gt
        steered[b] = active
    any_steered = bool(steered.any())

    uniforms = np.stack([np.random.default_rng(int(s)).random(steps) for s in seeds])
    rec_layers = [] if record_layers is None else list(record_layers)
    hidden = np.full((B, steps, L, d), np.nan) if rec_layers else None
    rec_buf = np.empty((B, L, d)) if rec_layers else None

    state = _StepState(B, L, d)
    for t in range(P - 1):
        _step(model, state, prompts[:, t])
    out = np.empty((B, P + steps), dtype=np.int64)
    out[:, :P] = prompts
    tok = prompts[:, -1]
    for t in range(steps):
        inject = None
        if any_steered:
            inject = np.einsum("bml,bmld->bld", coef[:, :, t, :], dirs)
        logits = _step(model, state, tok, inject, rec_buf)
        if rec_layers:
            hidden[:, t, rec_layers] = rec_buf[:, rec_layers]
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        tok = _sample(probs, uniforms[:, t])
        out[:, P + t] = tok

    return [
        GenerationTrace(
            tokens=out[b],
            prompt_length=P,
            coefficients=coef[b, : max(1, compiled[b][0].shape[0])],
            gates=gates[b],
            hidden=None if hidden is None else hidden[b],
        )
        for b in range(B)
    ]


def generate(model, prompt, steps, seed, plan=None, record_layers=None) -> GenerationTrace:
    return generate_batch(model, np.asarray(prompt)[None, :], steps, [seed], plan, record_layers)[0]


def pool(hidden, pooling: str = "mean") -> np.ndarray:
    """Pool ``(..., T, L, d)`` states over the time axis."""
    if pooling not in POOLINGS:
        raise ValueError(f"unknown pooling {pooling!r}")
    if hidden.shape[-3] == 0:
        raise ValueError("empty sequence")
    if pooling == "mean":
        return hidden.mean(axis=-3)
    return hidden[..., -1, :, :]


def extract_features(model: FrozenModel, tokens, pooling: str = "mean", chunk: int = 64) -> np.ndarray:
    """Per-layer pooled hidden states.

    A 1-D token sequence gives an ``(L, d)`` matrix; a ``(N, T)`` batch gives
    ``(N, L, d)``.  ``pooling`` may also be a tuple of modes, in which case a
    tuple of arrays is returned from a single forward pass.
    """
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if tokens.size == 0:
        raise ValueError("empty sequence")
    tokens = model._check_tokens(tokens)
    modes = (pooling,) if isinstance(pooling, str) else tuple(pooling)
    outs = [np.empty((tokens.shape[0], model.n_layers, model.d_model)) for _ in modes]
    for start in range(0, tokens.shape[0], chunk):
        _, hidden = model.forward(tokens[start : start + chunk])
        for o, mode in zip(outs, modes):
            o[start : start + chunk] = pool(hidden, mode)
    if single:
        outs = [o[0] for o in outs]
    return outs[0] if isinstance(pooling, str) else tuple(outs)
