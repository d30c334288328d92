"""Signal preprocessing: bipolar montage re-referencing, Butterworth IIR
filtering in second-order sections, integer downsampling, sliding-window
segmentation and per-segment z-scoring.

Filter design goes analog prototype -> band transform -> bilinear transform
with corner prewarping -> paired second-order sections.  Band filters of
design order N realize 2N poles (N sections).  The dataset pipelines apply
filters zero-phase (forward pass, then a second pass over the reversed
signal) so the effective magnitude response is |H|^2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PreprocessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# montage


@dataclass(frozen=True)
class MontageSpec:
    """Bipolar derivations: output row i = source[pos_i] - source[neg_i]."""

    pairs: tuple[tuple[str, str], ...]
    source_names: tuple[str, ...]

    def __post_init__(self):
        known = set(self.source_names)
        for pos, neg in self.pairs:
            if pos not in known or neg not in known:
                raise PreprocessError(f"montage pair ({pos}, {neg}) references unknown channel")

    @property
    def n_out(self) -> int:
        return len(self.pairs)


def parse_montage_text(text: str, source_names: list[str] | tuple[str, ...]) -> MontageSpec:
    """One pair per line, names comma-separated; '#' starts a comment."""
    pairs = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise PreprocessError(f"montage line {raw!r} is not 'positive,negative'")
        pairs.append((parts[0], parts[1]))
    return MontageSpec(tuple(pairs), tuple(source_names))


def load_montage(path, source_names) -> MontageSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_montage_text(fh.read(), source_names)


def apply_montage(x: np.ndarray, channel_names, spec: MontageSpec) -> np.ndarray:
    index = {name: i for i, name in enumerate(channel_names)}
    for pos, neg in spec.pairs:
        if pos not in index or neg not in index:
            raise PreprocessError(f"montage pair ({pos}, {neg}) missing from data channels")
    rows = [x[index[pos]] - x[index[neg]] for pos, neg in spec.pairs]
    return np.stack(rows, axis=0)


# 32-electrode cap layout; the mastoids (M1, M2) are dropped before montaging.
THU_EP_SOURCE_CHANNELS = (
    "FP1", "FP2", "FZ", "F3", "F4", "F7", "F8", "FC1", "FC2", "FC5", "FC6",
    "CZ", "C3", "C4", "T7", "T8", "CP1", "CP2", "CP5", "CP6", "PZ", "P3",
    "P4", "P7", "P8", "PO3", "PO4", "OZ", "O1", "O2", "M1", "M2",
)

# Editable default: 30 bipolar chains over the 30 retained electrodes.
# Pairs 21 and 28 (1-based) are antisymmetric, so their derived signals are
# mirror images about 0 uV.
DEFAULT_THU_EP_MONTAGE_TEXT = """\
FP1,F7
F7,T7
T7,CP5
CP5,P7
P7,O1
FP1,F3
F3,C3
C3,P3
P3,O1
FP2,F4
F4,C4
C4,P4
P4,O2
FP2,F8
F8,T8
T8,CP6
CP6,P8
P8,O2
FZ,CZ
CZ,PZ
FP1,FP2
FC5,FC1
FC6,FC2
CP5,CP1
CP6,CP2
PO3,PZ
PO4,PZ
FP2,FP1
PZ,OZ
OZ,O1
"""


def default_thu_ep_montage() -> MontageSpec:
    return parse_montage_text(DEFAULT_THU_EP_MONTAGE_TEXT, THU_EP_SOURCE_CHANNELS)


# DEAP's 32-channel order (Geneva layout).
DEAP_SOURCE_CHANNELS = (
    "Fp1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3",
    "P7", "PO3", "O1", "Oz", "Pz", "Fp2", "AF4", "Fz", "F4", "F8", "FC6",
    "FC2", "Cz", "C4", "T8", "CP6", "CP2", "P4", "P8", "PO4", "O2",
)

# 28 channels: everything except the 4 midline electrodes, hemisphere-paired.
DEAP_28_CHANNELS = (
    "Fp1", "Fp2", "AF3", "AF4", "F3", "F4", "F7", "F8", "FC5", "FC6",
    "FC1", "FC2", "C3", "C4", "T7", "T8", "CP5", "CP6", "CP1", "CP2",
    "P3", "P4", "P7", "P8", "PO3", "PO4", "O1", "O2",
)


def select_channels(x: np.ndarray, channel_names, subset) -> np.ndarray:
    index = {name: i for i, name in enumerate(channel_names)}
    missing = [name for name in subset if name not in index]
    if missing:
        raise PreprocessError(f"channels {missing} not present in data")
    return x[[index[name] for name in subset]]


# ---------------------------------------------------------------------------
# Butterworth design


@dataclass(frozen=True)
class FilterSpec:
    kind: str                 # "bandpass" | "bandstop"
    design_order: int         # prototype order (the conventional "Nth order")
    order: int                # realized order: 2 * design_order for band filters
    low_hz: float
    high_hz: float
    sample_rate_hz: float
    sos: np.ndarray = field(repr=False)  # (order/2, 6) rows [b0 b1 b2 1 a1 a2]

    def __post_init__(self):
        if self.kind not in ("bandpass", "bandstop"):
            raise PreprocessError(f"unknown filter kind {self.kind!r}")
        if not 0 < self.low_hz < self.high_hz < self.sample_rate_hz / 2:
            raise PreprocessError(
                f"corners must satisfy 0 < {self.low_hz} < {self.high_hz} < "
                f"Nyquist {self.sample_rate_hz / 2}")
        if self.sos.shape != (self.order // 2, 6):
            raise PreprocessError(f"expected {self.order // 2} sections, got {self.sos.shape}")
        poles = []
        for sec in self.sos:
            poles.extend(np.roots([1.0, sec[4], sec[5]]))
        if np.max(np.abs(poles)) >= 1.0:
            raise PreprocessError("unstable filter: pole on or outside the unit circle")


def _conjugate_pairs(vals: np.ndarray) -> list[tuple[complex, complex]]:
    vals = np.asarray(vals, dtype=complex)
    complex_vals = sorted(vals[vals.imag > 1e-12], key=lambda v: (v.real, v.imag))
    real_vals = sorted(v.real for v in vals if abs(v.imag) <= 1e-12)
    pairs = [(v, np.conj(v)) for v in complex_vals]
    for i in range(0, len(real_vals), 2):
        pairs.append((complex(real_vals[i]), complex(real_vals[i + 1])))
    return pairs


def design_butterworth(kind: str, low_hz: float, high_hz: float, order: int,
                       sample_rate_hz: float) -> FilterSpec:
    """Design a digital Butterworth band filter.

    `order` is the design (prototype) order, e.g. 6 for the conventional
    "6th-order Butterworth"; the realized band filter has 2*order poles.
    """
    if order < 1 or order % 2:
        raise PreprocessError(f"design order must be a positive even integer, got {order}")
    if kind not in ("bandpass", "bandstop"):
        raise PreprocessError(f"unknown filter kind {kind!r}")
    fs = float(sample_rate_hz)
    if not 0 < low_hz < high_hz < fs / 2:
        raise PreprocessError(
            f"corners must satisfy 0 < {low_hz} < {high_hz} < Nyquist {fs / 2}")

    # Analog lowpass prototype, cutoff 1 rad/s: n poles, unity gain.
    n = order
    theta = np.pi * (2 * np.arange(1, n + 1) - 1) / (2 * n)
    proto = -np.sin(theta) + 1j * np.cos(theta)

    # Prewarp the corners so the bilinear transform lands them exactly.
    w_lo = 2 * fs * np.tan(np.pi * low_hz / fs)
    w_hi = 2 * fs * np.tan(np.pi * high_hz / fs)
    bw = w_hi - w_lo
    w0 = np.sqrt(w_lo * w_hi)

    if kind == "bandpass":
        # s -> (s^2 + w0^2) / (bw * s)
        poles = []
        for p in proto:
            disc = np.sqrt((p * bw) ** 2 - 4 * w0 ** 2 + 0j)
            poles.extend([(p * bw + disc) / 2, (p * bw - disc) / 2])
        zeros = [0.0 + 0j] * n
        gain = bw ** n
    else:
        # s -> bw * s / (s^2 + w0^2)
        poles = []
        for p in proto:
            q = bw / p
            disc = np.sqrt(q ** 2 - 4 * w0 ** 2 + 0j)
            poles.extend([(q + disc) / 2, (q - disc) / 2])
        zeros = [1j * w0, -1j * w0] * n
        gain = 1.0
    poles = np.asarray(poles)
    zeros = np.asarray(zeros)

    # Bilinear transform; degree deficit becomes zeros at z = -1.
    fs2 = 2 * fs
    gain = gain * np.real(np.prod(fs2 - zeros) / np.prod(fs2 - poles))
    z_d = (fs2 + zeros) / (fs2 - zeros)
    p_d = (fs2 + poles) / (fs2 - poles)
    if len(z_d) < len(p_d):
        z_d = np.concatenate([z_d, -np.ones(len(p_d) - len(z_d))])

    pole_pairs = _conjugate_pairs(p_d)
    pole_pairs.sort(key=lambda pair: abs(pair[0]))  # highest-Q section last
    if kind == "bandpass":
        # digital zeros: n at +1 and n at -1; one of each per section
        zero_pairs = [(1.0 + 0j, -1.0 + 0j)] * n
    else:
        zero_pairs = _conjugate_pairs(z_d)

    if gain <= 0:
        raise PreprocessError("nonpositive filter gain")
    sec_gain = gain ** (1.0 / n)
    sos = np.zeros((n, 6))
    for i, ((p1, p2), (q1, q2)) in enumerate(zip(pole_pairs, zero_pairs)):
        b = np.real(np.poly([q1, q2])) * sec_gain
        a = np.real(np.poly([p1, p2]))
        sos[i, :3] = b
        sos[i, 3:] = a
    return FilterSpec(kind, order, 2 * order, float(low_hz), float(high_hz), fs, sos)


def filter_response(spec: FilterSpec, freqs_hz) -> np.ndarray:
    """Complex frequency response H(e^{j 2 pi f / fs}) at the given frequencies."""
    f = np.atleast_1d(np.asarray(freqs_hz, dtype=float))
    zinv = np.exp(-2j * np.pi * f / spec.sample_rate_hz)
    h = np.ones_like(zinv)
    for b0, b1, b2, _, a1, a2 in spec.sos:
        h *= (b0 + b1 * zinv + b2 * zinv ** 2) / (1 + a1 * zinv + a2 * zinv ** 2)
    return h


def apply_filter(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Forward (causal) filtering along the last axis, zero initial state.
    Direct form II transposed per second-order section."""
    y = np.array(x, dtype=np.float64, copy=True)
    lead = y.shape[:-1]
    t_len = y.shape[-1]
    for b0, b1, b2, _, a1, a2 in spec.sos:
        s1 = np.zeros(lead)
        s2 = np.zeros(lead)
        out = np.empty_like(y)
        for t in range(t_len):
            xt = y[..., t]
            yt = b0 * xt + s1
            s1 = b1 * xt - a1 * yt + s2
            s2 = b2 * xt - a2 * yt
            out[..., t] = yt
        y = out
    return y


def apply_filter_zero_phase(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Forward-backward filtering: zero phase, squared magnitude response."""
    fwd = apply_filter(x, spec)
    return apply_filter(fwd[..., ::-1], spec)[..., ::-1]


# ---------------------------------------------------------------------------
# resampling / segmentation / normalization


def resample_down(x: np.ndarray, factor: int) -> np.ndarray:
    """Keep every factor-th sample starting at index 0.  The caller must have
    band-limited the signal below the new Nyquist."""
    if int(factor) != factor or factor < 1:
        raise PreprocessError(f"downsample factor must be a positive integer, got {factor}")
    return np.ascontiguousarray(x[..., ::int(factor)])


@dataclass(frozen=True)
class WindowSpec:
    window_len_s: float
    step_s: float
    sample_rate_hz: float

    def __post_init__(self):
        if not self.window_len_s >= self.step_s > 0:
            raise PreprocessError(
                f"need window_len_s >= step_s > 0, got {self.window_len_s}, {self.step_s}")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_len_s * self.sample_rate_hz))

    @property
    def step_samples(self) -> int:
        return int(round(self.step_s * self.sample_rate_hz))


def segment_count(total_samples: int, win: WindowSpec) -> int:
    if total_samples < win.window_samples:
        return 0
    return (total_samples - win.window_samples) // win.step_samples + 1


def segment_sliding(x: np.ndarray, win: WindowSpec) -> np.ndarray:
    """Slide a window over the last axis; returns (n_segments, ..., window).
    Segments are independent copies."""
    n = segment_count(x.shape[-1], win)
    w, s = win.window_samples, win.step_samples
    if n == 0:
        return np.zeros((0,) + x.shape[:-1] + (w,))
    return np.stack([x[..., i * s:i * s + w].copy() for i in range(n)], axis=0)


def zscore_segment(seg: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-channel z-score: (x - mean) / (std + eps); eps guards constant rows."""
    mean = seg.mean(axis=-1, keepdims=True)
    std = seg.std(axis=-1, keepdims=True)
    return (seg - mean) / (std + eps)


# ---------------------------------------------------------------------------
# dataset pipelines


@dataclass(frozen=True)
class PipelineProfile:
    """End-to-end preprocessing recipe for one dataset layout."""

    name: str
    native_fs: float
    window_s: float
    step_s: float
    montage: MontageSpec | None = None
    channel_subset: tuple[str, ...] | None = None
    notch: tuple[float, float] | None = None
    bandpass: tuple[float, float] | None = None
    filter_design_order: int = 6
    downsample: int = 1
    zero_phase: bool = True

    @property
    def model_fs(self) -> float:
        return self.native_fs / self.downsample

    @property
    def out_channels(self) -> int | None:
        if self.montage is not None:
            return self.montage.n_out
        if self.channel_subset is not None:
            return len(self.channel_subset)
        return None


def thu_ep_profile(montage: MontageSpec | None = None,
                   window_s: float = 14.0, step_s: float = 4.0) -> PipelineProfile:
    return PipelineProfile(
        name="thu_ep",
        native_fs=250.0,
        window_s=window_s,
        step_s=step_s,
        montage=montage or default_thu_ep_montage(),
        notch=(48.0, 52.0),
        bandpass=(0.5, 45.0),
        downsample=2,
    )


def deap_profile(channel_subset: tuple[str, ...] = DEAP_28_CHANNELS,
                 window_s: float = 12.0, step_s: float = 4.0) -> PipelineProfile:
    # DEAP ships already filtered, artifact-cleaned and downsampled to 128 Hz.
    return PipelineProfile(
        name="deap",
        native_fs=128.0,
        window_s=window_s,
        step_s=step_s,
        channel_subset=channel_subset,
    )


@dataclass
class SegmentSet:
    """Windowed, normalized model inputs with per-segment provenance."""

    segments: np.ndarray            # (n, channels, samples) float64
    labels: np.ndarray              # (n,) int64
    subjects: np.ndarray            # (n,) unicode
    trials: np.ndarray              # (n,) int64
    fs: float
    window_s: float
    channel_names: tuple[str, ...]
    warnings: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.segments)

    def subset(self, mask: np.ndarray) -> "SegmentSet":
        return SegmentSet(self.segments[mask], self.labels[mask], self.subjects[mask],
                          self.trials[mask], self.fs, self.window_s, self.channel_names)


def concat_segment_sets(sets: list[SegmentSet]) -> SegmentSet:
    first = sets[0]
    return SegmentSet(
        np.concatenate([s.segments for s in sets]),
        np.concatenate([s.labels for s in sets]),
        np.concatenate([s.subjects for s in sets]),
        np.concatenate([s.trials for s in sets]),
        first.fs, first.window_s, first.channel_names,
        warnings=[w for s in sets for w in s.warnings],
    )


def preprocess_pipeline(bundle, profile: PipelineProfile) -> SegmentSet:
    """Turn one subject's raw recordings into model-ready segments.

    Stage order: montage / channel subset -> sliding-window segmentation at
    the native rate -> notch -> bandpass -> integer downsample -> per-channel
    z-score.  Segmentation deliberately precedes filtering, so each segment
    carries its own filter edge transient.
    """
    if abs(bundle.sample_rate_hz - profile.native_fs) > 1e-9:
        raise PreprocessError(
            f"bundle at {bundle.sample_rate_hz} Hz, profile expects {profile.native_fs} Hz")
    filters = []
    if profile.notch is not None:
        filters.append(design_butterworth("bandstop", *profile.notch,
                                          profile.filter_design_order, profile.native_fs))
    if profile.bandpass is not None:
        filters.append(design_butterworth("bandpass", *profile.bandpass,
                                          profile.filter_design_order, profile.native_fs))
    win = WindowSpec(profile.window_s, profile.step_s, profile.native_fs)

    seg_list, labels, trial_ids, warnings = [], [], [], []
    for trial in bundle.trials:
        if not isinstance(trial.label, (int, np.integer)):
            raise PreprocessError(
                f"trial {trial.trial_id} has non-integer label {trial.label!r}; "
                "binarize ratings first")
        x = trial.data
        if profile.montage is not None:
            x = apply_montage(x, bundle.channel_names, profile.montage)
            names = tuple(f"{p}-{n}" for p, n in profile.montage.pairs)
        elif profile.channel_subset is not None:
            x = select_channels(x, bundle.channel_names, profile.channel_subset)
            names = tuple(profile.channel_subset)
        else:
            names = tuple(bundle.channel_names)
        segs = segment_sliding(x, win)
        if len(segs) == 0:
            warnings.append(
                f"subject {bundle.subject_id} trial {trial.trial_id}: "
                f"{x.shape[-1]} samples shorter than window {win.window_samples}; skipped")
            continue
        for f in filters:
            segs = apply_filter_zero_phase(segs, f) if profile.zero_phase else apply_filter(segs, f)
        if profile.downsample > 1:
            segs = resample_down(segs, profile.downsample)
        segs = zscore_segment(segs)
        seg_list.append(segs)
        labels.extend([int(trial.label)] * len(segs))
        trial_ids.extend([int(trial.trial_id)] * len(segs))

    if seg_list:
        segments = np.concatenate(seg_list)
    else:
        segments = np.zeros((0, profile.out_channels or 0, win.window_samples // profile.downsample))
    subjects = np.array([bundle.subject_id] * len(segments))
    return SegmentSet(segments, np.asarray(labels, dtype=np.int64),
                      subjects, np.asarray(trial_ids, dtype=np.int64),
                      profile.model_fs, profile.window_s, names if seg_list else (),
                      warnings=warnings)
