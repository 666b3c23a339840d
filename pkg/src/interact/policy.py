"""InterACT policy: CVAE-style chunk prediction, temporal ensembling, training."""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .dataio import DemoEpisode, NormStats, compute_stats, save_checkpoint
from .decoder import AttnTrace, MultiArmDecoder
from .encoder import HierarchicalEncoder
from .errors import ConfigError, DimensionError, UsageError
from .nn import EncoderLayer, Linear, Module, sinusoidal_pe
from .tensor import Tensor

LOGVAR_CLAMP = 10.0


class StyleEncoder(Module):
    """Encoder over [CLS_z, qpos, action_1..k] producing the latent posterior."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.cls = self.param(rng.normal(0.0, 1.0, size=(1, d)))
        self.qpos_proj = Linear(cfg.action_dim, d, rng)
        self.action_proj = Linear(cfg.action_dim, d, rng)
        self.layers = [EncoderLayer(d, cfg.n_heads, cfg.ffn_dim, cfg.dropout, rng, cfg.pre_norm)
                       for _ in range(cfg.style_layers)]
        self.out = Linear(d, 2 * cfg.latent_dim, rng)
        self.latent_dim = cfg.latent_dim
        self._pe = sinusoidal_pe(cfg.chunk_size + 2, d)

    def __call__(self, qpos: Tensor, actions: Tensor):
        b = qpos.shape[0]
        q = T.reshape(self.qpos_proj(qpos), (b, 1, -1))
        a = self.action_proj(actions)
        cls = T.broadcast_to(self.cls, (b, *self.cls.shape))
        x = T.concat([cls, q, a], axis=1)
        x = x + Tensor(self._pe[:x.shape[1]].astype(x.dtype))
        for layer in self.layers:
            x, _ = layer(x)
        stats = self.out(x[:, 0])
        mu = stats[:, :self.latent_dim]
        logvar = T.clip(stats[:, self.latent_dim:], -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mu, logvar


class InterACT(Module):
    def __init__(self, cfg: ModelConfig, streams: T.Streams | None = None):
        self.cfg = cfg
        streams = streams or T.Streams(cfg.seed)
        rng = streams.generator("init")
        with T.precision(cfg.precision):
            self.encoder = HierarchicalEncoder(cfg, rng)
            self.decoder = MultiArmDecoder(cfg, rng)
            if cfg.use_latent:
                self.style = StyleEncoder(cfg, rng)
                self.latent_proj = Linear(cfg.latent_dim, cfg.d_model, rng)
        self.last_trace: AttnTrace | None = None

    @property
    def dtype(self):
        return np.dtype(self.cfg.precision)

    def load_arrays(self, arrays: dict, strict: bool = True):
        store = self.parameters()
        missing = set(store.names()) - set(arrays)
        extra = set(arrays) - set(store.names())
        if strict and (missing or extra):
            raise UsageError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in store.items():
            if name in arrays:
                arr = np.asarray(arrays[name])
                if arr.shape != p.shape:
                    raise DimensionError(f"{name}: checkpoint {arr.shape} != model {p.shape}")
                p.data = arr.astype(self.dtype)

    def state_arrays(self) -> dict:
        return {n: p.data for n, p in self.parameters().items()}

    def posterior(self, qpos: Tensor, actions: Tensor):
        if not self.training:
            raise UsageError("posterior is only available in training mode; inference uses z = 0")
        if not self.cfg.use_latent:
            raise UsageError("latent pathway disabled in this config")
        return self.style(qpos, actions)

    def forward(self, qpos, image=None, actions=None, noise_rng: np.random.Generator | None = None):
        """Normalized qpos (B, 2J) [+ image, normalized actions (B, k, 2J)] -> chunk (B, k, 2J).

        Returns ``(chunk, mu, logvar)``; mu/logvar are None when no posterior ran.
        """
        cfg = self.cfg
        qpos = T.as_tensor(qpos, self.dtype)
        if qpos.ndim == 1:
            qpos = T.reshape(qpos, (1, -1))
        if qpos.shape[-1] != cfg.action_dim:
            raise DimensionError(f"qpos width {qpos.shape[-1]} != 2J = {cfg.action_dim}")
        b = qpos.shape[0]
        J = cfg.joints_per_arm
        img = None
        if cfg.use_visual:
            if image is None:
                raise UsageError("this model needs an image observation")
            img = T.as_tensor(image, self.dtype)
            if img.ndim == 3:
                img = T.reshape(img, (1, *img.shape))
        enc = self.encoder(qpos[:, :J], qpos[:, J:], img)
        mu = logvar = None
        extra = None
        if cfg.use_latent:
            if actions is not None and self.training:
                actions = T.as_tensor(actions, self.dtype)
                mu, logvar = self.posterior(qpos, actions)
                if noise_rng is None:
                    raise UsageError("latent sampling needs a noise generator")
                eps = noise_rng.standard_normal(mu.shape).astype(self.dtype)
                z = mu + T.exp(logvar * 0.5) * Tensor(eps)
            else:
                z = Tensor(np.zeros((b, cfg.latent_dim), dtype=self.dtype))
            extra = T.reshape(self.latent_proj(z), (b, 1, cfg.d_model))
        chunk, trace = self.decoder(enc, extra)
        self.last_trace = trace
        return chunk, mu, logvar

    __call__ = forward


# ---------------------------------------------------------------- objective


def kl_to_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """0.5 * sum(exp(logvar) + mu^2 - 1 - logvar), summed over latent dims, averaged over batch."""
    terms = T.exp(logvar) + T.square(mu) - 1.0 - logvar
    per = T.tsum(terms, axis=-1) * 0.5
    return T.mean(per) if per.ndim else per


def l1_loss(pred: Tensor, target, mask=None) -> Tensor:
    target = T.as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = T.tabs(pred - target)
    if mask is None:
        return T.mean(diff)
    m = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
    return T.tsum(diff * Tensor(m)) * (1.0 / max(float(m.sum()), 1.0))


def loss_terms(pred, target, mu, logvar, beta, mask=None):
    l1 = l1_loss(pred, target, mask)
    if mu is None:
        return l1, l1, None
    kl = kl_to_standard_normal(mu, logvar)
    return l1 + kl * beta, l1, kl


def loss(pred, target, mu, logvar, beta, mask=None) -> Tensor:
    return loss_terms(pred, target, mu, logvar, beta, mask)[0]


# ---------------------------------------------------------------- inference


def predict_chunk(obs: dict, model: InterACT, stats: NormStats | None) -> np.ndarray:
    """Denormalized (k, 2J) chunk for one observation {qpos1, qpos2, image}."""
    if stats is None:
        raise UsageError("normalization statistics are required for prediction")
    qpos = np.concatenate([np.asarray(obs["qpos1"]), np.asarray(obs["qpos2"])])
    q = stats.normalize_qpos(qpos.astype(np.float32))
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            chunk, _, _ = model(q[None], None if obs.get("image") is None else np.asarray(obs["image"])[None])
    finally:
        if was_training:
            model.train()
    return stats.denormalize_action(chunk.data[0].astype(np.float32))


class ChunkBuffer:
    """Recent chunk predictions together with the timestep that emitted them."""

    def __init__(self, k: int):
        self.k = k
        self.entries = deque()

    def add(self, t: int, chunk: np.ndarray):
        chunk = np.asarray(chunk)
        if chunk.shape[0] != self.k:
            raise DimensionError(f"chunk length {chunk.shape[0]} != k = {self.k}")
        self.entries.append((t, chunk))
        while self.entries and self.entries[0][0] <= t - self.k:
            self.entries.popleft()

    def contributions(self, t: int) -> list:
        """Predictions for timestep t, newest first."""
        out = [chunk[t - t0] for t0, chunk in self.entries if t0 <= t < t0 + self.k]
        return out[::-1]

    def __len__(self):
        return len(self.entries)


def temporal_ensemble(buf: ChunkBuffer, t: int, m: float) -> np.ndarray:
    preds = buf.contributions(t)
    if not preds:
        raise UsageError(f"no buffered prediction covers timestep {t}")
    w = np.exp(-m * np.arange(len(preds)))
    stacked = np.stack(preds).astype(np.float64)
    return (w[:, None] * stacked).sum(axis=0) / w.sum()


class EnsemblePolicy:
    """Queries the model every step and blends overlapping chunks."""

    def __init__(self, model: InterACT, stats: NormStats, m: float | None = None,
                 keep_traces: bool = False):
        self.model = model
        self.stats = stats
        self.m = model.cfg.ensemble_m if m is None else m
        self.keep_traces = keep_traces
        self.reset()

    def reset(self, seed: int | None = None):
        self.t = 0
        self.buffer = ChunkBuffer(self.model.cfg.chunk_size)
        self.traces = []

    def act(self, obs: dict) -> np.ndarray:
        """``obs`` carries ``qpos`` (2J,) and ``image`` (H, W, C)."""
        qpos, image = np.asarray(obs["qpos"], dtype=np.float32), obs.get("image")
        J = self.model.cfg.joints_per_arm
        obs = {"qpos1": qpos[:J], "qpos2": qpos[J:], "image": image if self.model.cfg.use_visual else None}
        chunk = predict_chunk(obs, self.model, self.stats)
        if self.keep_traces:
            self.traces.append(self.model.last_trace)
        self.buffer.add(self.t, chunk)
        action = temporal_ensemble(self.buffer, self.t, self.m)
        self.t += 1
        return action


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: InterACT
    stats: NormStats
    metrics: list = field(default_factory=list)


def sample_batch(episodes, stats: NormStats, cfg: ModelConfig, rng: np.random.Generator, index=None):
    """Uniform (episode, start) windows; tails padded with the last action and masked."""
    if index is None:
        index = window_index(episodes)
    k = cfg.chunk_size
    picks = rng.integers(0, len(index), size=cfg.batch_size)
    qpos, images, actions, mask = [], [], [], []
    for p in picks:
        e, t = index[p]
        ep = episodes[e]
        window = ep.action[t:t + k]
        valid = window.shape[0]
        if valid < k:
            window = np.concatenate([window, np.repeat(window[-1:], k - valid, axis=0)])
        m = np.zeros((k, 1), dtype=np.float32)
        m[:valid] = 1.0
        qpos.append(stats.normalize_qpos(ep.qpos[t]))
        images.append(ep.image[t])
        actions.append(stats.normalize_action(window))
        mask.append(m)
    return (np.stack(qpos), np.stack(images), np.stack(actions), np.stack(mask))


def window_index(episodes):
    return [(e, t) for e, ep in enumerate(episodes) for t in range(ep.length)]


def train(episodes, cfg: ModelConfig, stats: NormStats | None = None, log_path=None,
          checkpoint_dir=None, progress=None) -> TrainResult:
    """Train a fresh model; every random draw comes from named substreams of ``cfg.seed``."""
    episodes = list(episodes)
    if not episodes:
        raise UsageError("training needs at least one episode")
    if all(ep.length < cfg.chunk_size for ep in episodes):
        raise ConfigError(f"chunk size {cfg.chunk_size} exceeds every episode length")
    J = episodes[0].joints_per_arm
    if J != cfg.joints_per_arm:
        raise ConfigError(f"dataset has {J} joints per arm, config expects {cfg.joints_per_arm}")
    stats = stats or compute_stats(episodes)
    streams = T.Streams(cfg.seed)
    model = InterACT(cfg, streams)
    params = model.parameters()
    opt = T.AdamState(lr=cfg.lr)
    batch_rng = streams.generator("batch")
    noise_rng = streams.generator("latent")
    model.train(streams.generator("dropout"))
    index = window_index(episodes)
    metrics = []
    log = open(log_path, "w") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            qpos, image, actions, mask = sample_batch(episodes, stats, cfg, batch_rng, index)
            T.active_tape().clear()
            pred, mu, logvar = model(qpos, image if cfg.use_visual else None, actions, noise_rng)
            total, l1, kl = loss_terms(pred, actions, mu, logvar, cfg.beta, mask)
            T.backward(total, params)
            T.adam_step(params, opt)
            rec = {"step": step, "l1": float(l1.data), "kl": float(kl.data) if kl is not None else 0.0,
                   "total": float(total.data), "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            if not all(math.isfinite(rec[k]) for k in ("l1", "kl", "total")):
                raise FloatingPointError(f"non-finite loss at step {step}: {rec}")
            metrics.append(rec)
            if log:
                log.write(json.dumps(rec) + "\n")
            if progress:
                progress(rec)
            if checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step_{step:06d}.ckpt", cfg,
                                model.state_arrays(), stats)
    finally:
        if log:
            log.close()
    model.eval()
    return TrainResult(model, stats, metrics)


def smoothed(values, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        window = max(len(values), 1)
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


# ---------------------------------------------------------------- whole-model gradient check


def model_gradient_errors(cfg: ModelConfig, batch: int = 2, max_coords: int | None = 8,
                          eps: float = 1e-5) -> dict:
    """Per-parameter finite-difference errors for the full training loss in float64.

    Dropout masks and latent noise are redrawn from the same seeded streams on
    every evaluation, so the loss is a fixed function of the parameters.
    """
    cfg = cfg.replace(precision="float64", batch_size=batch)
    streams = T.Streams(cfg.seed)
    model = InterACT(cfg, streams)
    data = streams.generator("grad-check-data")
    qpos = data.normal(size=(batch, cfg.action_dim))
    actions = data.normal(size=(batch, cfg.chunk_size, cfg.action_dim))
    image = None
    if cfg.use_visual:
        image = data.uniform(size=(batch, cfg.image_size, cfg.image_size, cfg.image_channels))

    def objective():
        model.train(streams.generator("dropout"))
        pred, mu, logvar = model(qpos, image, actions, streams.generator("latent"))
        return loss(pred, actions, mu, logvar, cfg.beta)

    return T.gradient_errors(objective, model.parameters(), eps, max_coords,
                             streams.generator("grad-check-coords"), metric="norm")
