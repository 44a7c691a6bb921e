"""Sequence ingestion, windowing, label-preserving augmentation and synthetic data.

Feature files (``.cetf``) are little-endian: the 8-byte magic ``CETF0001``, a
uint32 header length, a UTF-8 JSON header ``{"channels", "length", "rate",
"dtype": "f32"}``, then row-major float32 data ``[channels, length]``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .heads import Segment

FEATURE_MAGIC = b"CETF0001"

# triad orders (x, y, z) -> listed output order, identity first
AXIS_PERMUTATIONS = (
    ("xyz", (0, 1, 2)),
    ("xzy", (0, 2, 1)),
    ("zyx", (2, 1, 0)),
    ("zxy", (2, 0, 1)),
    ("yxz", (1, 0, 2)),
    ("yzx", (1, 2, 0)),
)


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class AnnotatedSequence:
    features: np.ndarray  # [C, T]
    sampling_rate_hz: float
    segments: list = field(default_factory=list)
    subject_id: str = ""
    offset_s: float = 0.0  # window start within the source sequence

    @property
    def num_channels(self):
        return int(self.features.shape[0])

    @property
    def length(self):
        return int(self.features.shape[1])

    @property
    def duration_s(self):
        return self.length / self.sampling_rate_hz

    def validate(self, num_classes=None):
        sid = self.subject_id or "<unnamed>"
        if self.features.ndim != 2:
            raise DataError(f"sequence {sid}: features must be [channels, time], got shape {self.features.shape}")
        if not self.sampling_rate_hz > 0:
            raise DataError(f"sequence {sid}: sampling rate must be positive")
        limit = self.duration_s + 1e-9
        for seg in self.segments:
            if seg.end > limit:
                raise DataError(f"sequence {sid}: segment [{seg.start}, {seg.end}] exceeds duration {self.duration_s}")
            if num_classes is not None and not 0 <= seg.label < num_classes:
                raise DataError(f"sequence {sid}: label {seg.label} outside [0, {num_classes})")


@dataclass
class Dataset:
    sequences: list
    num_classes: int
    labels: list = None

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def num_channels(self):
        return self.sequences[0].num_channels if self.sequences else 0


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_features(path, features, rate):
    features = np.asarray(features)
    C, T = features.shape
    header = json.dumps({"channels": int(C), "length": int(T), "rate": float(rate), "dtype": "f32"}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path):
    """Return ``(features float32 [C, T], header dict)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:8]!r}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + hlen].decode())
    if header.get("dtype") != "f32":
        raise DataError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    C, T = int(header["channels"]), int(header["length"])
    payload = blob[12 + hlen :]
    if len(payload) != 4 * C * T:
        raise DataError(f"{path}: header says {C}x{T} floats but payload holds {len(payload) // 4}")
    data = np.frombuffer(payload, dtype="<f4").reshape(C, T).astype(np.float32)
    return data, header


def save_dataset(dataset, directory, manifest_name="manifest.json"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, seq in enumerate(dataset.sequences):
        fname = f"seq_{i:04d}.cetf"
        write_features(directory / fname, seq.features, seq.sampling_rate_hz)
        entries.append(
            {
                "features": fname,
                "rate_hz": float(seq.sampling_rate_hz),
                "subject": seq.subject_id,
                "segments": [{"start_s": s.start, "end_s": s.end, "label": int(s.label)} for s in seq.segments],
            }
        )
    manifest = {"sequences": entries, "num_classes": int(dataset.num_classes), "labels": list(dataset.labels or [])}
    path = directory / manifest_name
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if "num_classes" not in manifest or "sequences" not in manifest:
        raise DataError(f"{manifest_path}: manifest needs 'sequences' and 'num_classes'")
    num_classes = int(manifest["num_classes"])
    base = manifest_path.parent
    sequences = []
    channels = None
    for i, entry in enumerate(manifest["sequences"]):
        sid = entry.get("subject") or f"#{i}"
        fpath = base / entry["features"]
        if not fpath.exists():
            raise DataError(f"sequence {sid}: feature file missing: {fpath}")
        feats, header = read_features(fpath)
        rate = float(entry.get("rate_hz", header["rate"]))
        if abs(rate - float(header["rate"])) > 1e-9:
            raise DataError(f"sequence {sid}: manifest rate {rate} differs from file header {header['rate']}")
        segments = []
        for seg in entry.get("segments", []):
            try:
                segments.append(Segment(float(seg["start_s"]), float(seg["end_s"]), int(seg["label"])))
            except (ValueError, KeyError) as exc:
                raise DataError(f"sequence {sid}: malformed segment {seg}: {exc}") from exc
        seq = AnnotatedSequence(feats, rate, segments, entry.get("subject", ""))
        seq.validate(num_classes)
        if channels is None:
            channels = seq.num_channels
        elif seq.num_channels != channels:
            raise DataError(f"sequence {sid}: {seq.num_channels} channels, dataset has {channels}")
        sequences.append(seq)
    return Dataset(sequences, num_classes, manifest.get("labels") or None)


def split_dataset(dataset, val_fraction, seed):
    """Seeded shuffle split into (train, val)."""
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val >= n:
        raise DataError(f"validation fraction {val_fraction} leaves no training data")
    val_idx, train_idx = sorted(order[:n_val]), sorted(order[n_val:])
    mk = lambda idx: Dataset([dataset.sequences[i] for i in idx], dataset.num_classes, dataset.labels)
    return mk(train_idx), mk(val_idx)


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


def window_bounds(length, rate, clip_len_s, overlap_frac=0.5):
    """``(start, window_len)`` pairs in samples; a tail window covers the end."""
    if not clip_len_s > 0:
        raise ValueError(f"clip length must be positive, got {clip_len_s}")
    if not 0.0 <= overlap_frac < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap_frac}")
    W = max(1, int(round(clip_len_s * rate)))
    if W >= length:
        return [(0, W)]
    S = max(1, int(round((1.0 - overlap_frac) * W)))
    starts = list(range(0, length - W + 1, S))
    if starts[-1] + W < length:
        starts.append(length - W)
    return [(s, W) for s in starts]


def window(seq, clip_len_s, overlap_frac=0.5):
    out = []
    rate = seq.sampling_rate_hz
    for start, W in window_bounds(seq.length, rate, clip_len_s, overlap_frac):
        feats = seq.features[:, start : start + W]
        if feats.shape[1] < W:
            feats = np.pad(feats, ((0, 0), (0, W - feats.shape[1])))
        t0, t1 = start / rate, (start + W) / rate
        segs = []
        for s in seq.segments:
            a, b = max(s.start, t0) - t0, min(s.end, t1) - t0
            if b - a > 1e-9:
                segs.append(Segment(a, b, s.label, s.score))
        out.append(AnnotatedSequence(np.ascontiguousarray(feats), rate, segs, seq.subject_id, seq.offset_s + t0))
    return out


# ---------------------------------------------------------------------------
# augmentation (all label preserving)
# ---------------------------------------------------------------------------


@dataclass
class AugmentSpec:
    permutations: bool = False
    axis_normalize: bool = False
    transforms: list = field(default_factory=list)  # [(op, param), ...]

    def __post_init__(self):
        for op, param in self.transforms:
            _check_transform(op, param)


def permute_channels(features, order):
    """Apply one triad order to every consecutive (x, y, z) channel group."""
    C = features.shape[0]
    if C % 3:
        raise ValueError(f"axis permutation needs channels divisible by 3, got {C}")
    idx = (np.arange(0, C, 3)[:, None] + np.asarray(order)[None, :]).reshape(-1)
    return features[idx]


def permute_axes(seq):
    """The six triad orderings of ``seq`` (identity first)."""
    return [replace(seq, features=permute_channels(seq.features, order)) for _, order in AXIS_PERMUTATIONS]


def axis_normalize(seq, eps=1e-8):
    if seq.length < 2:
        raise ValueError("axis normalization needs at least 2 samples")
    x = seq.features.astype(np.float64)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    return replace(seq, features=((x - mu) / (sd + eps)).astype(seq.features.dtype))


def _check_transform(op, param):
    if op == "downscale":
        if not 0.0 < param < 1.0:
            raise ValueError(f"downscale factor must be in (0, 1), got {param}")
    elif op == "magnify":
        if not param > 1.0:
            raise ValueError(f"magnify factor must exceed 1, got {param}")
    elif op == "noise":
        if not param >= 0.0:
            raise ValueError(f"noise std must be >= 0, got {param}")
    elif op != "invert":
        raise ValueError(f"unknown transform {op!r}")


def transform(seq, op, param=None, seed=0):
    _check_transform(op, param)
    x = seq.features
    if op in ("downscale", "magnify"):
        y = x * param
    elif op == "invert":
        y = -x
    else:
        if param == 0:
            y = x.copy()
        else:
            noise = np.random.default_rng(seed).normal(0.0, param, size=x.shape)
            y = x + noise.astype(x.dtype)
    return replace(seq, features=np.asarray(y, dtype=x.dtype))


def augment_dataset(dataset, spec, seed=0):
    """Expand multiplicatively: normalise, then permutations x (identity + transforms)."""
    out = []
    for i, seq in enumerate(dataset.sequences):
        base = axis_normalize(seq) if spec.axis_normalize else seq
        variants = permute_axes(base) if spec.permutations else [base]
        for j, v in enumerate(variants):
            out.append(v)
            for k, (op, param) in enumerate(spec.transforms):
                out.append(transform(v, op, param, seed=[seed, i, j, k]))
    return Dataset(out, dataset.num_classes, dataset.labels)


# ---------------------------------------------------------------------------
# synthetic channel-signature data
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    num_classes: int = 4
    channels: int = 12
    rate_hz: float = 50.0
    num_sequences: int = 64
    length: int = 256
    signature: list = None  # channel indices per class; disjoint groups by default
    seed: int = 0
    noise_std: float = 0.5
    amplitude: float = 2.0
    min_duration: int = 24
    max_duration: int = 72
    max_segments: int = 3
    min_gap: int = 8

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"synthetic data needs at least 2 classes, got {self.num_classes}")
        if self.channels < self.num_classes and self.signature is None:
            raise ValueError("default signatures need at least one channel per class")
        if self.signature is None:
            per = self.channels // self.num_classes
            self.signature = [list(range(c * per, (c + 1) * per)) for c in range(self.num_classes)]
        if len(self.signature) != self.num_classes:
            raise ValueError("signature needs one channel list per class")


def _place_segments(rng, spec):
    k = int(rng.integers(1, spec.max_segments + 1))
    durations = rng.integers(spec.min_duration, spec.max_duration + 1, size=k)
    while k > 1 and durations.sum() + (k + 1) * spec.min_gap > spec.length:
        k -= 1
        durations = durations[:k]
    slack = spec.length - int(durations.sum()) - (k + 1) * spec.min_gap
    if slack < 0:
        durations = np.array([max(1, spec.length - 2 * spec.min_gap)])
        slack = 0
    gaps = np.floor(rng.dirichlet(np.ones(k + 1)) * slack).astype(int) + spec.min_gap
    bounds = []
    pos = 0
    for d, g in zip(durations, gaps[:-1]):
        pos += int(g)
        bounds.append((pos, pos + int(d)))
        pos += int(d)
    return bounds


def synth_dataset(spec):
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length) / spec.rate_hz
    sequences = []
    for i in range(spec.num_sequences):
        x = rng.normal(0.0, spec.noise_std, size=(spec.channels, spec.length))
        segments = []
        for s, e in _place_segments(rng, spec):
            label = int(rng.integers(spec.num_classes))
            for ch in spec.signature[label]:
                freq = rng.uniform(2.0, 6.0)
                phase = rng.uniform(0, 2 * math.pi)
                x[ch, s:e] += spec.amplitude * np.sin(2 * math.pi * freq * t[s:e] + phase)
            segments.append(Segment(s / spec.rate_hz, e / spec.rate_hz, label))
        sequences.append(AnnotatedSequence(x.astype(np.float32), spec.rate_hz, segments, f"sbj_{i:03d}"))
    labels = [f"class_{c}" for c in range(spec.num_classes)]
    return Dataset(sequences, spec.num_classes, labels)
