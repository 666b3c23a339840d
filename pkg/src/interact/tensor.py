"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active tape when at
least one operand requires a gradient. ``backward`` replays the tape in
reverse and clears it. Inference code should run under ``no_grad()`` so the
tape does not grow.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DimensionError, UsageError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_KINK_LOG: list | None = None


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes = []

    def record(self, out, parents, backward_fn):
        out._node = len(self.nodes)
        out._tape = self
        self.nodes.append((out, parents, backward_fn))

    def clear(self):
        for out, _, _ in self.nodes:
            out._node = None
            out._tape = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def node_id(self):
        return self._node

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(arr.astype(dtype, copy=False))


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else _DEFAULT_DTYPE))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


@contextlib.contextmanager
def kink_log():
    """Collect the branch pattern of every piecewise op evaluated inside the block."""
    global _KINK_LOG
    prev = _KINK_LOG
    _KINK_LOG = []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def _log_branch(mask):
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.packbits(mask).tobytes())


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,))


def tabs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    _log_branch(sign > 0)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    _log_branch(inside)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise UsageError("train-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= p)
    scale = (keep / (1.0 - p)).astype(x.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    fancy = _is_fancy(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    out = x.data[idx]
    if not fancy:
        out = out.copy()
    return _result(out, (x,), backward)


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def split(x: Tensor, sizes, axis: int = 0) -> list:
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + n)
        out.append(getitem(x, tuple(sl)))
        start += n
    return out


def pad_edge(x: Tensor, pad: int) -> Tensor:
    """Replicate-pad axes 1 and 2 of a (B, H, W, C) tensor."""
    if pad == 0:
        return x
    out = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")

    def backward(g):
        g = g.copy()
        g[:, pad, :] += g[:, :pad, :].sum(axis=1)
        g[:, -pad - 1, :] += g[:, -pad:, :].sum(axis=1)
        g = g[:, pad:-pad]
        g[:, :, pad] += g[:, :, :pad].sum(axis=2)
        g[:, :, -pad - 1] += g[:, :, -pad:].sum(axis=2)
        return (np.ascontiguousarray(g[:, :, pad:-pad]),)

    return _result(out, (x,), backward)


def im2col(x: Tensor, k: int, stride: int) -> Tensor:
    """Gather k*k patches of a (B, H, W, C) tensor into (B, Ho, Wo, k*k*C)."""
    b, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {x.shape} smaller than kernel {k}")
    xd = x.data
    offsets = [(i, j) for i in range(k) for j in range(k)]
    cols = np.concatenate(
        [xd[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
         for i, j in offsets], axis=-1)

    def backward(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        for n, (i, j) in enumerate(offsets):
            gx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                g[..., n * c:(n + 1) * c]
        return (gx,)

    return _result(cols, (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes of ``a`` broadcast against a rank-2 ``b``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        lead = ad.shape[:-1]
        flat = ad.reshape(-1, ad.shape[-1])
        out = (flat @ bd).reshape(*lead, bd.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), flat.T @ g2

        return _result(out, (a, b), backward)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), backward)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, params: "ParameterStore | None" = None) -> None:
    """Propagate d(loss) to every leaf that requires a gradient.

    When ``params`` is given, trainable parameters the loss does not reach
    get an explicit zero gradient.
    """
    if loss._tape is None or loss._node is None:
        raise UsageError("backward() called on a tensor that is not part of a recorded computation")
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    grads = {loss._node: np.ones_like(loss.data)}
    for node_id in range(loss._node, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        out, parents, fn = tape.nodes[node_id]
        for p, pg in zip(parents, fn(g)):
            if not p.requires_grad or pg is None:
                continue
            if p._node is not None and p._tape is tape:
                prev = grads.get(p._node)
                grads[p._node] = pg if prev is None else prev + pg
            else:
                pg = np.asarray(pg, dtype=p.dtype)
                p.grad = pg.copy() if p.grad is None else p.grad + pg
    tape.clear()
    if params is not None:
        for _, p in params.trainable():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Named parameter tensors, iterated in lexicographic name order."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None, frozen: Iterable[str] = ()):
        self._entries = {}
        self._frozen = set(frozen)
        for name, t in (entries or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor, trainable: bool = True):
        if name in self._entries:
            raise UsageError(f"duplicate parameter name {name!r}")
        tensor.name = name
        tensor.requires_grad = trainable
        self._entries[name] = tensor
        if not trainable:
            self._frozen.add(name)

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return sorted(self._entries)

    def items(self):
        return [(n, self._entries[n]) for n in self.names()]

    def trainable(self):
        return [(n, t) for n, t in self.items() if n not in self._frozen]

    def is_trainable(self, name):
        return name not in self._frozen

    def zero_grad(self):
        for _, t in self._entries.items():
            t.grad = None

    def count(self):
        return sum(t.size for t in self._entries.values())


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are cleared afterwards."""
    trainable = params.trainable()
    for name, p in trainable:
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient; run backward() first")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in trainable:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------- gradient check


def gradient_errors(f: Callable[[], Tensor], params: ParameterStore, eps: float = 1e-3,
                    max_coords: int | None = None, rng: np.random.Generator | None = None,
                    metric: str = "elementwise", kink_retries: int = 3) -> dict:
    """Relative analytic-vs-central-difference error per parameter.

    A probe whose two sides evaluate a ReLU, abs or clip on different
    branches straddles a kink; it is repeated with a 10x smaller step, up
    to ``kink_retries`` times.

    ``max_coords`` bounds the number of coordinates probed per tensor; the
    probed coordinates are drawn from ``rng`` without replacement.

    ``metric="elementwise"`` reports the worst coordinate,
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``metric="norm"`` reports
    ``||a - n|| / max(||a||, ||n||)`` over the probed coordinates of each
    tensor, which is not swamped by coordinates whose true gradient sits
    below the finite-difference noise floor.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    if metric not in ("elementwise", "norm"):
        raise UsageError(f"unknown metric {metric!r}; use 'elementwise' or 'norm'")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise UsageError(f"gradient checks need float64 parameters; {name!r} is {p.dtype}")
    params.zero_grad()
    loss = f()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise UsageError("gradient check needs a scalar-valued function")
    backward(loss, params)
    analytic = {n: p.grad.copy() for n, p in params.trainable()}
    params.zero_grad()
    if rng is None:
        rng = np.random.default_rng(0)
    errors = {}
    with no_grad():
        for name, p in params.trainable():
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a_flat = analytic[name].reshape(-1)
            probed_a, probed_n = [], []
            for i in coords:
                probed_n.append(_central_difference(f, flat, i, eps, kink_retries))
                probed_a.append(float(a_flat[i]))
            a_vec, n_vec = np.array(probed_a), np.array(probed_n)
            if metric == "norm":
                scale = max(np.linalg.norm(a_vec), np.linalg.norm(n_vec))
                errors[name] = float(np.linalg.norm(a_vec - n_vec) / scale) if scale > 0 else 0.0
            else:
                denom = np.maximum(np.maximum(np.abs(a_vec), np.abs(n_vec)), 1e-8)
                errors[name] = float(np.max(np.abs(a_vec - n_vec) / denom, initial=0.0))
    return errors


def _central_difference(f, flat, i, eps, retries):
    orig = flat[i]
    h = eps
    while True:
        flat[i] = orig + h
        with kink_log() as plus:
            fp = float(f().data)
        flat[i] = orig - h
        with kink_log() as minus:
            fm = float(f().data)
        flat[i] = orig
        if plus == minus or retries <= 0:
            return (fp - fm) / (2.0 * h)
        h *= 0.1
        retries -= 1


def finite_diff_check(f: Callable[[], Tensor], params: ParameterStore, eps: float = 1e-3,
                      max_coords: int | None = None, rng: np.random.Generator | None = None,
                      metric: str = "elementwise") -> float:
    """Maximum relative gradient error over all probed parameters."""
    errs = gradient_errors(f, params, eps, max_coords, rng, metric)
    return max(errs.values()) if errs else 0.0


# ---------------------------------------------------------------- randomness


class Streams:
    """Named, independent random substreams derived from one seed.

    Each name maps to a Philox (counter-based) generator keyed by the seed
    and a hash of the name, so drawing from one stream never shifts another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def _key(self, name: str):
        digest = hashlib.blake2b(name.encode("utf-8"), digest_size=16).digest()
        words = np.frombuffer(digest, dtype="<u4").tolist()
        return np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, *words])

    def generator(self, name: str) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self._key(name)))

    def child(self, name: str) -> "Streams":
        return Streams(int(self._key(name).generate_state(1, dtype=np.uint64)[0]))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype or _DEFAULT_DTYPE)
