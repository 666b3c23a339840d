"""Transformer building blocks on top of :mod:`interact.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor


class Module:
    """Container that discovers parameters and submodules from its attributes."""

    training = False
    rng = None

    def param(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=T.default_dtype()), requires_grad=True)

    def _children(self):
        for key in sorted(vars(self)):
            val = vars(self)[key]
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        out = []
        for key in sorted(vars(self)):
            val = vars(self)[key]
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + key, val))
        for key, child in self._children():
            out.extend(child.named_parameters(f"{prefix}{key}."))
        return out

    def parameters(self) -> T.ParameterStore:
        return T.ParameterStore(dict(self.named_parameters()))

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, rng: np.random.Generator | None = None):
        for m in self.modules():
            m.training = True
            if rng is not None:
                m.rng = rng
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = self.param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = self.param(rng.uniform(-bound, bound, size=(d_out,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = self.param(np.ones(d))
        self.bias = self.param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def sinusoidal_pe(n: int, d: int) -> np.ndarray:
    """Interleaved sine/cosine table: column 2j is sin, 2j+1 is cos."""
    if d % 2:
        raise ConfigError(f"sinusoidal encoding needs an even width, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    rate = 10000.0 ** (-2.0 * np.arange(d // 2) / d)
    table = np.empty((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate)
    return table


def sinusoidal_pe_2d(h: int, w: int, d: int) -> np.ndarray:
    """(h*w, d) table; first half of the channels encode rows, second half columns."""
    if d % 4:
        raise ConfigError(f"2-D sinusoidal encoding needs width divisible by 4, got {d}")
    rows = sinusoidal_pe(h, d // 2)
    cols = sinusoidal_pe(w, d // 2)
    grid = np.concatenate([np.repeat(rows, w, axis=0), np.tile(cols, (h, 1))], axis=1)
    return grid


class PositionalEncoding(Module):
    def __init__(self, n_max: int, d: int, mode: str = "sinusoidal", rng=None):
        self.mode = mode
        if mode == "sinusoidal":
            self._fixed = sinusoidal_pe(n_max, d)
        elif mode == "learned":
            if rng is None:
                raise ConfigError("learned positional encoding needs an rng")
            self.table = self.param(rng.normal(0.0, 0.02, size=(n_max, d)))
        else:
            raise ConfigError(f"unknown positional encoding mode {mode!r}")

    def __call__(self, n: int) -> Tensor:
        if self.mode == "sinusoidal":
            return Tensor(self._fixed[:n].astype(T.default_dtype()))
        return self.table if n == self.table.shape[0] else self.table[:n]


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_model = d_model
        self.head_dim = d_model // n_heads
        shape = (d_model, d_model)
        self.w_q = self.param(T.glorot(rng, d_model, d_model, shape))
        self.w_k = self.param(T.glorot(rng, d_model, d_model, shape))
        self.w_v = self.param(T.glorot(rng, d_model, d_model, shape))
        self.w_o = self.param(T.glorot(rng, d_model, d_model, shape))


def attend(mha: MultiHeadAttention, queries: Tensor, keys: Tensor, values: Tensor):
    """Scaled dot-product attention over heads.

    Accepts (n, d) or (batch, n, d) inputs. Returns the attended tokens and a
    numpy array of weights shaped (heads, n_q, n_k), with a leading batch axis
    when the inputs were batched.
    """
    d = mha.d_model
    for label, t in (("queries", queries), ("keys", keys), ("values", values)):
        if t.shape[-1] != d:
            raise DimensionError(f"{label} width {t.shape[-1]} != d_model {d}")
    if keys.shape[-2] != values.shape[-2]:
        raise DimensionError(f"keys length {keys.shape[-2]} != values length {values.shape[-2]}")
    unbatched = queries.ndim == 2
    if unbatched:
        queries, keys, values = (T.reshape(t, (1, *t.shape)) for t in (queries, keys, values))
    b, nq, _ = queries.shape
    nk = keys.shape[1]
    h, hd = mha.n_heads, mha.head_dim
    q = T.transpose(T.reshape(T.matmul(queries, mha.w_q), (b, nq, h, hd)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(T.matmul(keys, mha.w_k), (b, nk, h, hd)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(T.matmul(values, mha.w_v), (b, nk, h, hd)), (0, 2, 1, 3))
    scores = T.matmul(q, k) * (1.0 / math.sqrt(hd))
    weights = T.softmax_rows(scores)
    ctx = T.matmul(weights, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, nq, d))
    out = T.matmul(ctx, mha.w_o)
    w = weights.data
    if unbatched:
        return T.reshape(out, (nq, d)), w[0]
    return out, w


class FeedForward(Module):
    def __init__(self, d_model: int, ffn_dim: int, rng: np.random.Generator):
        self.lin1 = Linear(d_model, ffn_dim, rng)
        self.lin2 = Linear(ffn_dim, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))


class EncoderLayer(Module):
    def __init__(self, d_model, n_heads, ffn_dim, dropout, rng, pre_norm=False):
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ffn = FeedForward(d_model, ffn_dim, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.dropout = dropout
        self.pre_norm = pre_norm

    def _drop(self, x):
        return T.dropout(x, self.dropout, self.rng, self.training)

    def __call__(self, x: Tensor, context: Tensor | None = None):
        """Self-attention block; ``context`` overrides the key/value sequence."""
        if self.pre_norm:
            xn = self.norm1(x)
            kv = xn if context is None else self.norm1(context)
            a, w = attend(self.attn, xn, kv, kv)
            x = x + self._drop(a)
            x = x + self._drop(self.ffn(self.norm2(x)))
            return x, w
        kv = x if context is None else context
        a, w = attend(self.attn, x, kv, kv)
        x = self.norm1(x + self._drop(a))
        x = self.norm2(x + self._drop(self.ffn(x)))
        return x, w


class DecoderLayer(Module):
    def __init__(self, d_model, n_heads, ffn_dim, dropout, rng, pre_norm=False):
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ffn = FeedForward(d_model, ffn_dim, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.norm3 = LayerNorm(d_model)
        self.dropout = dropout
        self.pre_norm = pre_norm

    def _drop(self, x):
        return T.dropout(x, self.dropout, self.rng, self.training)

    def __call__(self, targets: Tensor, memory: Tensor):
        if memory.shape[-2] == 0:
            raise UsageError("decoder memory is empty")
        if self.pre_norm:
            tn = self.norm1(targets)
            a, _ = attend(self.self_attn, tn, tn, tn)
            t = targets + self._drop(a)
            c, w = attend(self.cross_attn, self.norm2(t), memory, memory)
            t = t + self._drop(c)
            t = t + self._drop(self.ffn(self.norm3(t)))
            return t, w
        a, _ = attend(self.self_attn, targets, targets, targets)
        t = self.norm1(targets + self._drop(a))
        c, w = attend(self.cross_attn, t, memory, memory)
        t = self.norm2(t + self._drop(c))
        t = self.norm3(t + self._drop(self.ffn(t)))
        return t, w


def encoder_layer_forward(layer: EncoderLayer, x: Tensor, train_mode: bool = False) -> Tensor:
    if x.shape[-1] != layer.attn.d_model:
        raise DimensionError(f"input width {x.shape[-1]} != d_model {layer.attn.d_model}")
    prev = layer.training
    layer.training = train_mode
    try:
        out, _ = layer(x)
    finally:
        layer.training = prev
    return out


def decoder_layer_forward(layer: DecoderLayer, targets: Tensor, memory: Tensor,
                          train_mode: bool = False):
    d = layer.self_attn.d_model
    if targets.shape[-1] != d or memory.shape[-1] != d:
        raise DimensionError(f"targets {targets.shape} / memory {memory.shape} width != d_model {d}")
    prev = layer.training
    layer.training = train_mode
    try:
        return layer(targets, memory)
    finally:
        layer.training = prev
