"""Dataset containers and serialization: recording bundles, windowed
segment sets, model checkpoints, label handling and synthetic EEG.

On-disk formats (all little-endian, documented with hex examples in the
README):
  bundle dir:     manifest.json + trial_<id>.raw     (float32, channel-major)
  segment set:    segments.json + segments.raw       (float32, segment-major)
  checkpoint dir: model.manifest + model.blob        (float64)
Checksums are 8-byte BLAKE2b hex digests of the raw file bytes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ConvTransformer, ModelConfig
from .preprocess import SegmentSet

FORMAT_VERSION = "1"


class BundleError(Exception):
    pass


class MissingFileError(BundleError):
    pass


class SizeMismatchError(BundleError):
    pass


class FormatVersionError(BundleError):
    pass


class ChecksumError(BundleError):
    pass


def _digest(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# raw recording bundles


@dataclass
class Trial:
    trial_id: int
    label: int | dict
    n_samples: int
    data: np.ndarray  # (channels, n_samples) float64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape[-1] != self.n_samples:
            raise BundleError(
                f"trial {self.trial_id}: declared {self.n_samples} samples, "
                f"data has {self.data.shape[-1]}")


@dataclass
class EegBundle:
    subject_id: str
    sample_rate_hz: float
    channel_names: tuple[str, ...]
    trials: list[Trial] = field(default_factory=list)

    def __post_init__(self):
        self.channel_names = tuple(self.channel_names)
        for tr in self.trials:
            if tr.data.shape[0] != len(self.channel_names):
                raise BundleError(
                    f"trial {tr.trial_id}: {tr.data.shape[0]} channels, "
                    f"bundle declares {len(self.channel_names)}")


def write_bundle(bundle: EegBundle, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    trials_meta = []
    for tr in bundle.trials:
        fname = f"trial_{tr.trial_id:03d}.raw"
        raw = np.ascontiguousarray(tr.data, dtype="<f4").tobytes()
        (root / fname).write_bytes(raw)
        trials_meta.append({
            "trial_id": int(tr.trial_id),
            "label": tr.label,
            "n_samples": int(tr.n_samples),
            "file": fname,
            "checksum": _digest(raw),
        })
    _dump_json({
        "format_version": FORMAT_VERSION,
        "subject_id": bundle.subject_id,
        "sample_rate_hz": bundle.sample_rate_hz,
        "channel_names": list(bundle.channel_names),
        "trials": trials_meta,
    }, root / "manifest.json")


def load_bundle(path) -> EegBundle:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingFileError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"unknown format_version {manifest.get('format_version')!r} "
            f"(expected {FORMAT_VERSION!r})")
    names = tuple(manifest["channel_names"])
    trials = []
    for meta in manifest["trials"]:
        fpath = root / meta["file"]
        if not fpath.exists():
            raise MissingFileError(f"trial {meta['trial_id']}: missing {fpath.name}")
        raw = fpath.read_bytes()
        expected = 4 * len(names) * meta["n_samples"]
        if len(raw) != expected:
            raise SizeMismatchError(
                f"trial {meta['trial_id']}: {fpath.name} has {len(raw)} bytes, "
                f"expected {expected}")
        if _digest(raw) != meta["checksum"]:
            raise ChecksumError(f"trial {meta['trial_id']}: checksum mismatch in {fpath.name}")
        data = np.frombuffer(raw, dtype="<f4").reshape(len(names), meta["n_samples"])
        label = meta["label"]
        trials.append(Trial(meta["trial_id"], label, meta["n_samples"],
                            data.astype(np.float64)))
    return EegBundle(manifest["subject_id"], manifest["sample_rate_hz"], names, trials)


def write_dataset(bundles: list[EegBundle], root) -> None:
    root = Path(root)
    for b in bundles:
        write_bundle(b, root / f"sub_{b.subject_id}")


def load_dataset(root) -> list[EegBundle]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.json").exists())
    if not dirs:
        raise MissingFileError(f"no bundle directories under {root}")
    return [load_bundle(p) for p in dirs]


# ---------------------------------------------------------------------------
# labels


def binarize_deap_labels(ratings: dict, dimension: str, threshold: float = 5.0) -> int:
    """Binary class from a 1-9 rating: 1 iff rating > threshold (strict)."""
    if dimension not in ratings:
        raise BundleError(f"rating dimension {dimension!r} not in {sorted(ratings)}")
    rating = float(ratings[dimension])
    if not 1.0 <= rating <= 9.0:
        raise BundleError(f"rating {rating} outside [1, 9]")
    return int(rating > threshold)


def binarize_bundle(bundle: EegBundle, dimension: str, threshold: float = 5.0) -> EegBundle:
    trials = [
        Trial(tr.trial_id,
              binarize_deap_labels(tr.label, dimension, threshold)
              if isinstance(tr.label, dict) else int(tr.label),
              tr.n_samples, tr.data)
        for tr in bundle.trials
    ]
    return EegBundle(bundle.subject_id, bundle.sample_rate_hz, bundle.channel_names, trials)


# ---------------------------------------------------------------------------
# synthetic EEG


@dataclass(frozen=True)
class ClassBand:
    center_hz: float
    bandwidth_hz: float
    amplitude: float


@dataclass(frozen=True)
class SynthProfile:
    """Band-limited class oscillations over 1/f background noise with
    per-subject channel gains and optional 50 Hz line interference."""

    n_subjects: int = 12
    n_classes: int = 3
    n_trials_per_class: int = 4
    trial_len_s: float = 20.0
    fs: float = 125.0
    n_channels: int = 8
    class_bands: tuple[ClassBand, ...] = (
        ClassBand(6.0, 2.0, 1.0),
        ClassBand(10.0, 2.0, 1.0),
        ClassBand(20.0, 2.0, 1.0),
    )
    subject_gain_spread: float = 0.2
    noise_level: float = 1.0
    line_noise_hz: float = 50.0
    line_noise_amplitude: float = 0.0

    def __post_init__(self):
        if len(self.class_bands) != self.n_classes:
            raise ValueError("need one class band per class")
        for band in self.class_bands:
            if band.center_hz + band.bandwidth_hz / 2 >= self.fs / 2:
                raise ValueError(f"class band {band} reaches the Nyquist frequency")
            if band.amplitude < 0:
                raise ValueError("band amplitude must be >= 0")

    @property
    def n_samples(self) -> int:
        return int(round(self.trial_len_s * self.fs))


def _pink_noise(rng: np.random.Generator, shape: tuple, fs: float) -> np.ndarray:
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(shape[-1], d=1.0 / fs)
    scale = 1.0 / np.sqrt(np.maximum(freqs, freqs[1]))
    spec *= scale
    spec[..., 0] = 0.0
    out = np.fft.irfft(spec, n=shape[-1], axis=-1)
    return out / out.std(axis=-1, keepdims=True)


def _narrowband(rng: np.random.Generator, shape: tuple, band: ClassBand, fs: float) -> np.ndarray:
    """Unit-variance narrowband noise: white noise with spectrum masked to
    [center - bw/2, center + bw/2]."""
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(shape[-1], d=1.0 / fs)
    lo, hi = band.center_hz - band.bandwidth_hz / 2, band.center_hz + band.bandwidth_hz / 2
    spec *= (freqs >= lo) & (freqs <= hi)
    out = np.fft.irfft(spec, n=shape[-1], axis=-1)
    return out / out.std(axis=-1, keepdims=True)


def synth_generate(profile: SynthProfile, seed: int) -> list[EegBundle]:
    """Deterministic synthetic dataset; one bundle per subject, trials
    interleaved across classes."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = profile.n_samples
    t = np.arange(n) / profile.fs
    names = tuple(f"ch{c:02d}" for c in range(profile.n_channels))
    bundles = []
    for s in range(profile.n_subjects):
        gains = np.exp(rng.normal(0.0, profile.subject_gain_spread, profile.n_channels))
        trials = []
        trial_id = 0
        for _rep in range(profile.n_trials_per_class):
            for cls in range(profile.n_classes):
                band = profile.class_bands[cls]
                noise = _pink_noise(rng, (profile.n_channels, n), profile.fs)
                signal = _narrowband(rng, (profile.n_channels, n), band, profile.fs)
                x = profile.noise_level * noise + band.amplitude * gains[:, None] * signal
                phase = rng.uniform(0.0, 2 * np.pi)
                if profile.line_noise_amplitude > 0:
                    x = x + profile.line_noise_amplitude * np.sin(
                        2 * np.pi * profile.line_noise_hz * t + phase)
                trials.append(Trial(trial_id, cls, n, x))
                trial_id += 1
        bundles.append(EegBundle(f"s{s:02d}", profile.fs, names, trials))
    return bundles


# ---------------------------------------------------------------------------
# segment sets


def save_segment_set(segset: SegmentSet, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(segset.segments, dtype="<f4").tobytes()
    (root / "segments.raw").write_bytes(raw)
    _dump_json({
        "format_version": FORMAT_VERSION,
        "shape": list(segset.segments.shape),
        "labels": [int(v) for v in segset.labels],
        "subjects": [str(v) for v in segset.subjects],
        "trials": [int(v) for v in segset.trials],
        "fs": segset.fs,
        "window_s": segset.window_s,
        "channel_names": list(segset.channel_names),
        "checksum": _digest(raw),
    }, root / "segments.json")


def load_segment_set(path) -> SegmentSet:
    root = Path(path)
    meta_path = root / "segments.json"
    if not meta_path.exists():
        raise MissingFileError(f"no segments.json under {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"unknown format_version {meta.get('format_version')!r}")
    raw = (root / "segments.raw").read_bytes()
    shape = tuple(meta["shape"])
    if len(raw) != 4 * int(np.prod(shape)):
        raise SizeMismatchError(
            f"segments.raw has {len(raw)} bytes, expected {4 * int(np.prod(shape))}")
    if _digest(raw) != meta["checksum"]:
        raise ChecksumError("segments.raw checksum mismatch")
    segments = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return SegmentSet(segments, np.asarray(meta["labels"], dtype=np.int64),
                      np.asarray(meta["subjects"]), np.asarray(meta["trials"], dtype=np.int64),
                      float(meta["fs"]), float(meta["window_s"]),
                      tuple(meta["channel_names"]))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ConvTransformer, path, optimizer_state: dict | None = None,
                    seed_record: dict | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    arrays: list[tuple[str, str, np.ndarray]] = []
    for name, tensor in model.params.items():
        arrays.append(("param", name, tensor.data))
    for name, buf in model.buffers().items():
        arrays.append(("buffer", name, buf))
    opt_t = None
    if optimizer_state is not None:
        opt_t = optimizer_state["t"]
        for name, (m, v) in optimizer_state["moments"].items():
            arrays.append(("opt", f"{name}.m", m))
            arrays.append(("opt", f"{name}.v", v))

    blob = bytearray()
    entries = []
    offset = 0
    for kind, name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
        blob.extend(data)
        offset += arr.size
    blob = bytes(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "arrays": entries,
        "blob_elements": offset,
        "blob_checksum": _digest(blob),
        "seed_record": {"model_seed": model.seed, **(seed_record or {})},
    }
    if opt_t is not None:
        manifest["optimizer_t"] = int(opt_t)
    (root / "model.blob").write_bytes(blob)
    _dump_json(manifest, root / "model.manifest")


def load_checkpoint(path) -> tuple[ConvTransformer, dict]:
    """Rebuild the model; returns (model, manifest).  Optimizer moments, if
    present, are under manifest["optimizer_state"]."""
    root = Path(path)
    man_path = root / "model.manifest"
    if not man_path.exists():
        raise MissingFileError(f"no model.manifest under {root}")
    manifest = json.loads(man_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"unknown format_version {manifest.get('format_version')!r}")
    blob = (root / "model.blob").read_bytes()
    if len(blob) != 8 * manifest["blob_elements"]:
        raise SizeMismatchError(
            f"model.blob has {len(blob)} bytes, expected {8 * manifest['blob_elements']}")
    if _digest(blob) != manifest["blob_checksum"]:
        raise ChecksumError("model.blob checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f8")

    config = ModelConfig.from_dict(manifest["config"])
    model = ConvTransformer(config, seed=manifest["seed_record"]["model_seed"])
    state = {}
    opt_moments: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = flat[entry["offset"]:entry["offset"] + size].reshape(shape).copy()
        if entry["kind"] in ("param", "buffer"):
            state[entry["name"]] = arr
        else:
            base, moment = entry["name"].rsplit(".", 1)
            opt_moments.setdefault(base, {})[moment] = arr
    expected = set(model.params.names()) | set(model.buffers().keys())
    if set(state) != expected:
        raise BundleError("checkpoint arrays do not match the declared config")
    model.load_state(state)
    if opt_moments:
        manifest["optimizer_state"] = {
            "t": manifest["optimizer_t"],
            "moments": {k: (mv["m"], mv["v"]) for k, mv in opt_moments.items()},
        }
    return model, manifest
