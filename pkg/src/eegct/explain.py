"""Interpretability exports: channel-attention summaries, per-segment
self-attention traces, composed equivalent conv kernels, and feature tables
for external projection (e.g. t-SNE).  Everything here is a read-only
consumer of a frozen model.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import ConvTransformer


def _minmax(x: np.ndarray, lo: float, hi: float, axis=-1) -> np.ndarray:
    xmin = x.min(axis=axis, keepdims=True)
    xmax = x.max(axis=axis, keepdims=True)
    span = xmax - xmin
    unit = np.where(span > 0, (x - xmin) / np.where(span > 0, span, 1.0), 0.0)
    return lo + (hi - lo) * unit


# ---------------------------------------------------------------------------
# channel attention


@dataclass
class ChannelAttentionReport:
    stream_kernel_sizes: tuple[int, ...]
    feature_weights: np.ndarray     # (n_streams, K2) mean over samples
    channel_weights: np.ndarray     # (n_streams, M) grouped per EEG channel
    normalized: np.ndarray          # (n_streams, M) min-max rescaled to [-1, 1]
    n_samples: int


def extract_channel_attention(model: ConvTransformer, segments: np.ndarray,
                              batch_size: int = 64) -> ChannelAttentionReport:
    """Average the per-channel stream weights over a sample set, aggregate
    feature channels back to their EEG channels, and min-max normalize."""
    if len(segments) == 0:
        raise ValueError("empty sample set")
    cfg = model.config
    if not cfg.use_sk_attention:
        raise ValueError("model has no selective-kernel attention to inspect")
    sums = None
    count = 0
    with T.no_grad():
        for lo in range(0, len(segments), batch_size):
            _, tr = model.forward(segments[lo:lo + batch_size], training=False, trace=True)
            batch_sum = tr.sk_weights.sum(axis=0)
            sums = batch_sum if sums is None else sums + batch_sum
            count += tr.sk_weights.shape[0]
    feature_weights = sums / count                        # (n_streams, K2)
    mult = cfg.channel_multiplier if cfg.use_depth_block else 1
    m = cfg.feature_channels // mult
    channel_weights = feature_weights.reshape(len(cfg.sk_kernel_sizes), m, mult).mean(axis=-1)
    return ChannelAttentionReport(
        tuple(cfg.sk_kernel_sizes), feature_weights, channel_weights,
        _minmax(channel_weights, -1.0, 1.0), count)


# ---------------------------------------------------------------------------
# self-attention traces


@dataclass
class SelfAttentionTrace:
    trace: np.ndarray        # (d_seq,) min-max normalized to [0, 1]
    per_layer: np.ndarray    # (n_layers, d_seq) head-averaged class-token rows
    raw: np.ndarray          # (d_seq,) layer+head average before normalization
    seconds_per_token: float


def extract_self_attention(model: ConvTransformer, segment: np.ndarray,
                           input_len_s: float) -> SelfAttentionTrace:
    """Class-token attention over time tokens: average the class-token query
    row over heads and encoder layers, drop the token's self-entry, min-max
    normalize to [0, 1]."""
    cfg = model.config
    if not cfg.use_transformer:
        raise ValueError("model has no transformer encoder to inspect")
    seg = np.asarray(segment, dtype=np.float64)
    if seg.ndim != 2:
        raise ValueError(f"expected one (channels, samples) segment, got {seg.shape}")
    with T.no_grad():
        _, tr = model.forward(seg, training=False, trace=True)
    rows = np.stack([a[0].mean(axis=0)[0] for a in tr.attention])  # (L, S+1)
    per_layer = rows[:, 1:]
    raw = per_layer.mean(axis=0)
    return SelfAttentionTrace(_minmax(raw, 0.0, 1.0), per_layer, raw,
                              input_len_s / cfg.seq_len)


# ---------------------------------------------------------------------------
# composed kernels


@dataclass
class ComposedKernel:
    taps: np.ndarray
    feature_channel: int
    source: tuple[str, str]
    exact: bool
    duration_s: float | None = None


def compose_taps(k1: np.ndarray, k2: np.ndarray) -> np.ndarray:
    """Effective taps of two chained cross-correlations: full convolution of
    the tap sequences (length k1 + k2 - 1)."""
    return np.convolve(np.asarray(k1, float), np.asarray(k2, float))


_BLOCK_NAMES = ("depth", "sconv1", "sconv2")


def compose_kernels(model: ConvTransformer, block: str,
                    fs: float | None = None) -> list[ComposedKernel]:
    """Per-feature-channel equivalent kernel of a conv block's two chained
    per-channel stages.  Exact: no nonlinearity sits between the stages
    (activation and norm come after the second stage).  Per-channel
    pointwise scalars are folded into the taps."""
    cfg = model.config
    kernels: list[ComposedKernel] = []
    if block == "depth":
        if not cfg.use_depth_block:
            raise ValueError("depth block disabled in this model")
        w1, w2 = model.depth1.w.data, model.depth2.w.data
        names = ("depth.conv1", "depth.conv2")
        mult = cfg.channel_multiplier
        for o in range(cfg.feature_channels):
            # conv1 output channel o reads input channel o // mult
            taps = compose_taps(w1[o, 0], w2[o, 0])
            kernels.append(ComposedKernel(taps, o, names, True,
                                          len(taps) / fs if fs else None))
        return kernels
    if block.startswith("sconv"):
        idx = int(block[len("sconv"):]) - 1
        if idx < 0 or idx >= len(model.sconv_blocks):
            raise ValueError(f"unknown block {block!r}; have {_BLOCK_NAMES[:1 + len(model.sconv_blocks)]}")
        blk = model.sconv_blocks[idx]
        (d1, p1), (d2, p2) = blk.layers
        names = (f"{block}.l1", f"{block}.l2")
        for o in range(cfg.feature_channels):
            taps1 = d1.w.data[o, 0] * p1.w.data[o, 0, 0]
            taps2 = d2.w.data[o, 0] * p2.w.data[o, 0, 0]
            taps = compose_taps(taps1, taps2)
            kernels.append(ComposedKernel(taps, o, names, True,
                                          len(taps) / fs if fs else None))
        return kernels
    raise ValueError(f"unknown block {block!r}")


# ---------------------------------------------------------------------------
# feature export

FEATURE_STAGES = ("post_conv", "post_encoder")


def export_features(model: ConvTransformer, segments: np.ndarray, labels: np.ndarray,
                    stage: str, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows for external projection.  post_conv: flattened conv
    front-end output; post_encoder: the class-token embedding."""
    if stage not in FEATURE_STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {FEATURE_STAGES}")
    rows = []
    with T.no_grad():
        for lo in range(0, len(segments), batch_size):
            _, tr = model.forward(segments[lo:lo + batch_size], training=False, trace=True)
            feats = tr.post_conv if stage == "post_conv" else tr.token_embedding
            rows.append(feats.reshape(feats.shape[0], -1))
    features = np.concatenate(rows)
    return features, np.asarray(labels)


def write_feature_csv(features: np.ndarray, labels: np.ndarray, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(f"f{i}" for i in range(features.shape[1])) + ",label\n")
        for row, label in zip(features, labels):
            fh.write(",".join(f"{v:.17g}" for v in row) + f",{int(label)}\n")


def write_table_csv(header: list[str], columns: list, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(str(v) if isinstance(v, (str, int)) else f"{v:.17g}"
                              for v in row) + "\n")


# ---------------------------------------------------------------------------
# SVG rendering (dependency-free, intentionally plain)


def _svg_color(v: float) -> str:
    """Map [0,1] to a blue->white->red gradient."""
    v = min(max(float(v), 0.0), 1.0)
    if v < 0.5:
        t = v / 0.5
        r, g, b = int(60 + 195 * t), int(90 + 165 * t), 255
    else:
        t = (v - 0.5) / 0.5
        r, g, b = 255, int(255 - 165 * t), int(255 - 195 * t)
    return f"rgb({r},{g},{b})"


def svg_bar_chart(values, names, path, title: str = "") -> None:
    values = np.asarray(values, dtype=float)
    n = len(values)
    bar_w, gap, height, base = 18, 4, 160, 40
    width = n * (bar_w + gap) + 60
    vmax = max(abs(values).max(), 1e-12)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 80}">',
             f'<text x="10" y="16" font-size="12">{title}</text>',
             f'<line x1="40" y1="{base + height / 2}" x2="{width - 10}" '
             f'y2="{base + height / 2}" stroke="#999"/>']
    for i, (v, name) in enumerate(zip(values, names)):
        h = abs(v) / vmax * (height / 2)
        x = 45 + i * (bar_w + gap)
        y = base + height / 2 - (h if v >= 0 else 0)
        color = _svg_color(0.5 + 0.5 * v / vmax)
        parts.append(f'<rect x="{x}" y="{y:.1f}" width="{bar_w}" height="{h:.1f}" fill="{color}"/>')
        parts.append(f'<text x="{x}" y="{base + height + 14}" font-size="8" '
                     f'transform="rotate(45 {x} {base + height + 14})">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def svg_heat_strip(values, path, title: str = "", seconds_per_cell: float | None = None) -> None:
    values = np.asarray(values, dtype=float)
    n = len(values)
    cell_w, cell_h = max(4, int(720 / max(n, 1))), 40
    width = n * cell_w + 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="110">',
             f'<text x="10" y="16" font-size="12">{title}</text>']
    for i, v in enumerate(values):
        parts.append(f'<rect x="{20 + i * cell_w}" y="30" width="{cell_w}" '
                     f'height="{cell_h}" fill="{_svg_color(v)}"/>')
    if seconds_per_cell is not None:
        for frac in (0.0, 0.5, 1.0):
            i = int(frac * (n - 1)) if n > 1 else 0
            sec = i * seconds_per_cell
            parts.append(f'<text x="{20 + i * cell_w}" y="92" font-size="10">{sec:.1f}s</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
