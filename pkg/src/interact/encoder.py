"""Hierarchical attention encoder: segment-wise and cross-segment passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import DimensionError, UsageError
from .nn import EncoderLayer, Linear, Module, PositionalEncoding, sinusoidal_pe, sinusoidal_pe_2d
from .tensor import Tensor

SEGMENT_NAMES = ("arm1", "arm2", "visual")


@dataclass
class SegmentSet:
    """Batched segments (B, cls + payload, d) with their CLS slot counts."""

    segments: list
    cls_counts: list
    names: tuple = SEGMENT_NAMES

    def lengths(self):
        return [s.shape[1] for s in self.segments]

    def cls(self, i) -> Tensor:
        return self.segments[i][:, :self.cls_counts[i]]

    def payload(self, i) -> Tensor:
        return self.segments[i][:, self.cls_counts[i]:]

    def replace(self, segments) -> "SegmentSet":
        return SegmentSet(list(segments), list(self.cls_counts), self.names)


@dataclass
class EncodedState:
    cls_arm1: Tensor
    s_arm1: Tensor
    cls_arm2: Tensor
    s_arm2: Tensor
    cls_visual: Tensor | None = None
    s_visual: Tensor | None = None

    @property
    def has_visual(self):
        return self.s_visual is not None

    def swapped(self) -> "EncodedState":
        return EncodedState(self.cls_arm2, self.s_arm2, self.cls_arm1, self.s_arm1,
                            self.cls_visual, self.s_visual)


class CLSBank(Module):
    def __init__(self, cls_counts, d_model, rng):
        self.counts = list(cls_counts)
        for i, n in enumerate(self.counts):
            setattr(self, f"seg{i}", self.param(rng.normal(0.0, 1.0, size=(n, d_model))) if n else None)

    def tokens(self, i) -> Tensor | None:
        return getattr(self, f"seg{i}")


class VisualStem(Module):
    """Three 3x3 stride-2 conv blocks with replicate padding: (B,H,W,C) -> (B, H/8*W/8, d)."""

    def __init__(self, in_channels, channels, d_model, rng):
        widths = [in_channels, *channels, d_model]
        self.convs = [Linear(9 * widths[i], widths[i + 1], rng) for i in range(3)]

    def __call__(self, image: Tensor) -> Tensor:
        x = image
        for i, conv in enumerate(self.convs):
            x = conv(T.im2col(T.pad_edge(x, 1), 3, 2))
            if i < 2:
                x = T.relu(x)
        b, h, w, d = x.shape
        return T.reshape(x, (b, h * w, d))


class HierarchicalEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.joint_embed = [Linear(1, d, rng), Linear(1, d, rng)]
        counts = list(cfg.cls_counts) if cfg.use_visual else list(cfg.cls_counts[:2])
        self.cls_bank = CLSBank(counts, d, rng)
        if cfg.use_visual:
            self.stem = VisualStem(cfg.image_channels, cfg.stem_channels, d, rng)
            side = cfg.image_size // 8
            self._visual_pe = sinusoidal_pe_2d(side, side, d)
        layer = lambda: EncoderLayer(d, cfg.n_heads, cfg.ffn_dim, cfg.dropout, rng, cfg.pre_norm)
        self.seg_layers = [layer() for _ in range(cfg.l_seg)]
        self.cross_layers = [layer() for _ in range(cfg.l_cross)]
        total_cls = sum(counts)
        self.role_pe = PositionalEncoding(total_cls, d, "learned", rng) if total_cls else None

    def embed_joints(self, qpos: Tensor, arm_id: int) -> Tensor:
        J = self.cfg.joints_per_arm
        if qpos.shape[-1] != J:
            raise DimensionError(f"arm {arm_id} qpos has {qpos.shape[-1]} entries, expected {J}")
        x = T.reshape(qpos, (*qpos.shape, 1))
        return self.joint_embed[arm_id - 1](x)

    def embed_visual(self, image: Tensor) -> Tensor:
        cfg = self.cfg
        expected = (cfg.image_size, cfg.image_size, cfg.image_channels)
        if tuple(image.shape[-3:]) != expected:
            raise DimensionError(f"image shape {image.shape[-3:]} != configured {expected}")
        unbatched = image.ndim == 3
        if unbatched:
            image = T.reshape(image, (1, *image.shape))
        tokens = self.stem(image) + Tensor(self._visual_pe.astype(image.dtype))
        return T.reshape(tokens, tokens.shape[1:]) if unbatched else tokens

    def forward(self, qpos1: Tensor, qpos2: Tensor, image: Tensor | None) -> EncodedState:
        visual = None
        if self.cfg.use_visual:
            if image is None:
                raise UsageError("visual segment enabled but no image given")
            visual = self.embed_visual(image)
        segs = assemble(self.embed_joints(qpos1, 1), self.embed_joints(qpos2, 2), visual, bank=self.cls_bank)
        return encode(segs, self)

    __call__ = forward


def assemble(arm1_tokens: Tensor, arm2_tokens: Tensor, visual_tokens: Tensor | None,
             bank: CLSBank) -> SegmentSet:
    """Prepend each segment's CLS tokens and add within-segment sinusoidal positions."""
    payloads = [arm1_tokens, arm2_tokens] + ([visual_tokens] if visual_tokens is not None else [])
    d = arm1_tokens.shape[-1]
    for p in payloads:
        if p.shape[-1] != d:
            raise DimensionError(f"segment widths differ: {p.shape[-1]} vs {d}")
    batch = arm1_tokens.shape[0]
    segments = []
    for i, p in enumerate(payloads):
        cls = bank.tokens(i)
        parts = [] if cls is None else [T.broadcast_to(cls, (batch, *cls.shape))]
        seg = T.concat(parts + [p], axis=1) if parts else p
        pe = Tensor(sinusoidal_pe(seg.shape[1], d).astype(seg.dtype))
        segments.append(seg + pe)
    return SegmentSet(segments, list(bank.counts[:len(payloads)]), SEGMENT_NAMES[:len(payloads)])


def segment_wise_pass(s: SegmentSet, layer: EncoderLayer) -> SegmentSet:
    """Apply one shared layer to each segment on its own."""
    return s.replace(layer(seg)[0] for seg in s.segments)


def cross_segment_pass(s: SegmentSet, layer: EncoderLayer, role_pe: PositionalEncoding | None) -> SegmentSet:
    """Self-attention over the gathered CLS tokens; payload tokens pass through untouched."""
    counts = s.cls_counts
    total = sum(counts)
    if total == 0:
        return s
    gathered = T.concat([s.cls(i) for i in range(len(counts)) if counts[i]], axis=1)
    gathered = gathered + role_pe(total)
    mixed, _ = layer(gathered)
    pieces = T.split(mixed, [c for c in counts if c], axis=1)
    out, j = [], 0
    for i, seg in enumerate(s.segments):
        if counts[i] == 0:
            out.append(seg)
            continue
        out.append(T.concat([pieces[j], s.payload(i)], axis=1))
        j += 1
    return s.replace(out)


def encode(s: SegmentSet, encoder: HierarchicalEncoder) -> EncodedState:
    cfg = encoder.cfg
    seg_layers, cross_layers = encoder.seg_layers, encoder.cross_layers
    if cfg.no_cross:
        cross_layers = []
    if cfg.stacking == "interleaved":
        for l in range(max(len(seg_layers), len(cross_layers))):
            if l < len(seg_layers):
                s = segment_wise_pass(s, seg_layers[l])
            if l < len(cross_layers):
                s = cross_segment_pass(s, cross_layers[l], encoder.role_pe)
    else:
        for layer in seg_layers:
            s = segment_wise_pass(s, layer)
        for layer in cross_layers:
            s = cross_segment_pass(s, layer, encoder.role_pe)
    parts = []
    for i in range(len(s.segments)):
        parts += [s.cls(i), s.payload(i)]
    return EncodedState(*parts)
