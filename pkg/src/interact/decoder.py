"""Multi-arm decoder: per-arm decoder stacks joined by a synchronization block."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import EncodedState
from .errors import DimensionError
from .nn import DecoderLayer, EncoderLayer, Linear, Module, sinusoidal_pe
from .tensor import Tensor


@dataclass
class ArmContext:
    memory: Tensor
    cls_span: tuple | None
    spans: dict = field(default_factory=dict)


@dataclass
class AttnTrace:
    """Decoder cross-attention weights keyed by (arm, layer), each (B, heads, k, M)."""

    weights: dict
    cls_spans: dict
    n_layers: int

    def cls_mass(self) -> np.ndarray:
        """(B, 2, n_layers, heads): query-averaged mass on the other arm's CLS rows."""
        first = self.weights[(1, 0)]
        b, h = first.shape[:2]
        out = np.zeros((b, 2, self.n_layers, h))
        for arm in (1, 2):
            span = self.cls_spans.get(arm)
            if span is None:
                continue
            lo, hi = span
            for layer in range(self.n_layers):
                w = self.weights[(arm, layer)]
                out[:, arm - 1, layer] = w[..., lo:hi].sum(axis=-1).mean(axis=-1)
        return out


class QuerySet(Module):
    """Per-arm target tokens, initialised from the sinusoidal table."""

    def __init__(self, k, d):
        self.table = self.param(sinusoidal_pe(k, d))


class MultiArmDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        make_dec = lambda: DecoderLayer(d, cfg.n_heads, cfg.ffn_dim, cfg.dropout, rng, cfg.pre_norm)
        self.queries = [QuerySet(cfg.chunk_size, d), QuerySet(cfg.chunk_size, d)]
        self.arm1_layers = [make_dec() for _ in range(cfg.l_dec)]
        self.arm2_layers = [make_dec() for _ in range(cfg.l_dec)]
        self.sync_layers = [EncoderLayer(d, cfg.n_heads, cfg.ffn_dim, cfg.dropout, rng, cfg.pre_norm)
                            for _ in range(cfg.l_sync)]
        self.heads = [Linear(d, cfg.joints_per_arm, rng), Linear(d, cfg.joints_per_arm, rng)]

    def stack(self, arm_id):
        return self.arm1_layers if arm_id == 1 else self.arm2_layers

    def forward(self, enc: EncodedState, extra_memory: Tensor | None = None):
        return multiarm_decode(enc, self, extra_memory)

    __call__ = forward


def build_context(arm_id: int, enc: EncodedState, no_cls: bool = False,
                  extra_memory: Tensor | None = None) -> ArmContext:
    """Decoder memory for one arm: own payload, other-arm CLS, visual CLS, visual payload."""
    if arm_id == 1:
        own, other_cls = enc.s_arm1, enc.cls_arm2
    else:
        own, other_cls = enc.s_arm2, enc.cls_arm1
    parts = [("own_payload", own)]
    if not no_cls:
        parts.append(("other_cls", other_cls))
        if enc.has_visual:
            parts.append(("visual_cls", enc.cls_visual))
    if enc.has_visual:
        parts.append(("visual_payload", enc.s_visual))
    if extra_memory is not None:
        parts.append(("latent", extra_memory))
    spans, start = {}, 0
    for name, t in parts:
        spans[name] = (start, start + t.shape[1])
        start += t.shape[1]
    keep = [t for _, t in parts if t.shape[1] > 0]
    memory = T.concat(keep, axis=1)
    cls_span = spans.get("other_cls")
    if cls_span is not None and cls_span[0] == cls_span[1]:
        cls_span = None
    return ArmContext(memory, cls_span, spans)


def _expand_queries(queries: Tensor, batch: int) -> Tensor:
    return T.broadcast_to(queries, (batch, *queries.shape))


def decode_front(layers, ctx: ArmContext, queries: Tensor, s: int):
    """Run decoder layers 1..s; returns the intermediate stream and cross weights."""
    h = queries if queries.ndim == 3 else _expand_queries(queries, ctx.memory.shape[0])
    weights = []
    for layer in layers[:s]:
        h, w = layer(h, ctx.memory)
        weights.append(w)
    return h, weights


def sync_exchange(h1: Tensor, h2: Tensor, sync_layers, enabled: bool = True):
    """Self-attention over the concatenated arm streams, split back per arm.

    Each arm's queries see keys ordered (own, other); this is the same
    function as attending over concat(h1, h2) but keeps the arm relabeling
    symmetry exact in floating point.
    """
    if h1.shape != h2.shape:
        raise DimensionError(f"sync streams differ in shape: {h1.shape} vs {h2.shape}")
    if not enabled or not sync_layers:
        return h1, h2
    b = h1.shape[0]
    for layer in sync_layers:
        x = T.concat([h1, h2], axis=0)
        ctx = T.concat([T.concat([h1, h2], axis=1), T.concat([h2, h1], axis=1)], axis=0)
        y, _ = layer(x, ctx)
        h1, h2 = y[:b], y[b:]
    return h1, h2


def decode_back(layers, ctx: ArmContext, shared: Tensor, s: int):
    """Run decoder layers s+1..L with the shared stream as targets."""
    h = shared
    weights = []
    for layer in layers[s:]:
        h, w = layer(h, ctx.memory)
        weights.append(w)
    return h, weights


def action_head(head: Linear, hidden: Tensor) -> Tensor:
    return head(hidden)


def multiarm_decode(enc: EncodedState, dec: MultiArmDecoder, extra_memory: Tensor | None = None):
    """Full decoder pass; returns the (B, k, 2J) action chunk and its attention trace."""
    cfg = dec.cfg
    s = cfg.sync_position
    ctxs = {arm: build_context(arm, enc, cfg.no_cls, extra_memory) for arm in (1, 2)}
    fronts = {}
    weights = {}
    for arm in (1, 2):
        h, ws = decode_front(dec.stack(arm), ctxs[arm], dec.queries[arm - 1].table, s)
        fronts[arm] = h
        for l, w in enumerate(ws):
            weights[(arm, l)] = w
    s1, s2 = sync_exchange(fronts[1], fronts[2], dec.sync_layers, enabled=not cfg.no_sync)
    outs = []
    for arm, shared in ((1, s1), (2, s2)):
        h, ws = decode_back(dec.stack(arm), ctxs[arm], shared, s)
        for l, w in enumerate(ws):
            weights[(arm, s + l)] = w
        outs.append(action_head(dec.heads[arm - 1], h))
    chunk = T.concat(outs, axis=-1)
    trace = AttnTrace(weights, {arm: ctxs[arm].cls_span for arm in (1, 2)}, cfg.l_dec)
    return chunk, trace
