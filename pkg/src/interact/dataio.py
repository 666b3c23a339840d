"""Binary episode and checkpoint files, dataset statistics.

Episode file (little-endian)::

    "IACT" | u32 version | u32 J_per_arm | u32 T | u32 H | u32 W | u32 C
    f32 qpos[T][2J] | f32 action[T][2J] | f32 image[T][H][W][C]

Checkpoint file (little-endian)::

    "IAPT" | u32 version | u64 config digest | u32 config_len | config text
    u32 n_entries | n x (u32 name_len | name | u32 rank | u32 extents[rank] | f32 payload)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DigestMismatch, FormatError, UsageError

EPISODE_MAGIC = b"IACT"
EPISODE_VERSION = 1
CHECKPOINT_MAGIC = b"IAPT"
CHECKPOINT_VERSION = 1
STD_FLOOR = 1e-6

_EP_HEADER = struct.Struct("<4sIIIIII")
_CK_HEADER = struct.Struct("<4sIQI")


@dataclass
class DemoEpisode:
    qpos: np.ndarray      # (T, 2J)
    action: np.ndarray    # (T, 2J)
    image: np.ndarray     # (T, H, W, C)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.qpos = np.ascontiguousarray(self.qpos, dtype="<f4")
        self.action = np.ascontiguousarray(self.action, dtype="<f4")
        self.image = np.ascontiguousarray(self.image, dtype="<f4")
        if self.image.ndim == 3:
            self.image = self.image[..., None]
        t = self.qpos.shape[0]
        if self.qpos.ndim != 2 or self.qpos.shape[1] % 2:
            raise FormatError(f"qpos must be (T, 2J), got {self.qpos.shape}")
        if self.action.shape != self.qpos.shape:
            raise FormatError(f"action shape {self.action.shape} != qpos shape {self.qpos.shape}")
        if self.image.ndim != 4 or self.image.shape[0] != t:
            raise FormatError(f"image must be (T, H, W, C) with T={t}, got {self.image.shape}")

    @property
    def length(self) -> int:
        return self.qpos.shape[0]

    @property
    def joints_per_arm(self) -> int:
        return self.qpos.shape[1] // 2


def episode_bytes(ep: DemoEpisode) -> bytes:
    t, h, w, c = ep.image.shape
    header = _EP_HEADER.pack(EPISODE_MAGIC, EPISODE_VERSION, ep.joints_per_arm, t, h, w, c)
    return header + ep.qpos.tobytes() + ep.action.tobytes() + ep.image.tobytes()


def write_episode(ep: DemoEpisode, path) -> None:
    Path(path).write_bytes(episode_bytes(ep))


def parse_episode(buf: bytes) -> DemoEpisode:
    if len(buf) < _EP_HEADER.size:
        raise FormatError(
            f"episode header needs {_EP_HEADER.size} bytes, file has {len(buf)}", offset=len(buf))
    magic, version, j, t, h, w, c = _EP_HEADER.unpack_from(buf, 0)
    if magic != EPISODE_MAGIC:
        raise FormatError(f"bad episode magic {magic!r}", offset=0)
    if version != EPISODE_VERSION:
        raise FormatError(f"unsupported episode version {version}", offset=4)
    if min(j, t, h, w, c) == 0:
        raise FormatError("episode header declares a zero dimension", offset=8)
    n_q = t * 2 * j
    n_img = t * h * w * c
    expected = _EP_HEADER.size + 4 * (2 * n_q + n_img)
    if len(buf) != expected:
        raise FormatError(
            f"episode length mismatch: header implies {expected} bytes, file has {len(buf)}",
            offset=min(len(buf), expected))
    off = _EP_HEADER.size
    qpos = np.frombuffer(buf, "<f4", n_q, off).reshape(t, 2 * j)
    off += 4 * n_q
    action = np.frombuffer(buf, "<f4", n_q, off).reshape(t, 2 * j)
    off += 4 * n_q
    image = np.frombuffer(buf, "<f4", n_img, off).reshape(t, h, w, c)
    return DemoEpisode(qpos.copy(), action.copy(), image.copy())


def read_episode(path) -> DemoEpisode:
    return parse_episode(Path(path).read_bytes())


def episode_payload_size(j: int, t: int, h: int, w: int, c: int) -> int:
    return 4 * (2 * t * 2 * j + t * h * w * c)


# ---------------------------------------------------------------- statistics


@dataclass
class NormStats:
    qpos_mean: np.ndarray
    qpos_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def __post_init__(self):
        for name in ("qpos_mean", "qpos_std", "action_mean", "action_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))
        self.qpos_std = np.maximum(self.qpos_std, np.float32(STD_FLOOR))
        self.action_std = np.maximum(self.action_std, np.float32(STD_FLOOR))

    def normalize_qpos(self, q):
        return (q - self.qpos_mean) / self.qpos_std

    def normalize_action(self, a):
        return (a - self.action_mean) / self.action_std

    def denormalize_action(self, a):
        return a * self.action_std + self.action_mean

    def denormalize_qpos(self, q):
        return q * self.qpos_std + self.qpos_mean

    def as_arrays(self) -> dict:
        return {f"stats.{k}": getattr(self, k)
                for k in ("action_mean", "action_std", "qpos_mean", "qpos_std")}


class _Running:
    """Chan et al. pairwise merge of (count, mean, M2) per dimension."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def update(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        nb = x.shape[0]
        if nb == 0:
            return
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * nb / n
        self.m2 = self.m2 + m2b + delta ** 2 * self.n * nb / n
        self.n = n

    def std(self):
        return np.sqrt(self.m2 / self.n)


def compute_stats(dataset: Iterable) -> NormStats:
    """Per-dimension mean / population std over all timesteps of all episodes.

    ``dataset`` yields episode paths or DemoEpisode objects.
    """
    q, a = _Running(), _Running()
    for item in dataset:
        ep = item if isinstance(item, DemoEpisode) else read_episode(item)
        q.update(ep.qpos)
        a.update(ep.action)
    if q.n == 0:
        raise UsageError("cannot compute statistics of an empty dataset")
    return NormStats(q.mean, q.std(), a.mean, a.std())


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(cfg: ModelConfig, params: dict, stats: NormStats | None = None) -> bytes:
    text = cfg.to_text().encode("utf-8")
    entries = {name: np.asarray(arr) for name, arr in sorted(params.items())}
    if stats is not None:
        entries.update(stats.as_arrays())
    chunks = [_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.digest(), len(text)), text,
              struct.pack("<I", len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_checkpoint(path, cfg: ModelConfig, params: dict, stats: NormStats | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(cfg, params, stats))


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    stats: NormStats | None
    digest: int


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n, what):
        if n < 0 or self.off + n > len(self.buf):
            raise FormatError(
                f"truncated checkpoint reading {what}: need {n} bytes, "
                f"{len(self.buf) - self.off} remain", offset=self.off)
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(buf: bytes, expected: ModelConfig | None = None, force: bool = False) -> Checkpoint:
    r = _Reader(buf)
    magic, version, digest, text_len = _CK_HEADER.unpack(r.take(_CK_HEADER.size, "header"))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    text_off = r.off
    raw = r.take(text_len, "config text")
    try:
        cfg = ModelConfig.from_dict(json.loads(raw.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError, TypeError, ValueError) as exc:
        raise FormatError(f"unreadable config text: {exc}", offset=text_off) from None
    if cfg.digest() != digest and not force:
        raise FormatError(
            f"config text digest {cfg.digest():016x} does not match header digest {digest:016x}",
            offset=8)
    if expected is not None and expected.digest() != digest and not force:
        raise DigestMismatch(expected.digest(), digest)
    count = r.u32("entry count")
    params = {}
    for _ in range(count):
        name_off = r.off
        try:
            name = r.take(r.u32("name length"), "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not valid UTF-8", offset=name_off) from None
        rank = r.u32("rank")
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank} for {name!r}", offset=r.off - 4)
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents"))
        n = int(np.prod(shape, dtype=object)) if rank else 1
        payload = r.take(4 * n, f"payload of {name!r}")
        if name in params:
            raise FormatError(f"duplicate entry {name!r}", offset=name_off)
        params[name] = np.frombuffer(payload, "<f4").reshape(shape).copy()
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} trailing bytes after last entry", offset=r.off)
    stats = None
    keys = ("action_mean", "action_std", "qpos_mean", "qpos_std")
    if all(f"stats.{k}" in params for k in keys):
        stats = NormStats(*(params.pop(f"stats.{k}") for k in ("qpos_mean", "qpos_std", "action_mean", "action_std")))
    return Checkpoint(cfg, params, stats, digest)


def load_checkpoint(path, expected: ModelConfig | None = None, force: bool = False) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), expected, force)
