"""Classification/regression heads and decoding of dense outputs into segments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .nn import Conv1d, Module
from .tensor import _sigmoid, relu, softplus


@dataclass(frozen=True)
class Segment:
    """A time interval in seconds with a class id; ``score`` is None for ground truth."""

    start: float
    end: float
    label: int
    score: float = None

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"segment end {self.end} must exceed start {self.start}")
        if self.start < 0:
            raise ValueError(f"segment start {self.start} is negative")

    @property
    def duration(self):
        return self.end - self.start

    def to_dict(self):
        d = {"start_s": self.start, "end_s": self.end, "label": self.label}
        if self.score is not None:
            d["score"] = self.score
        return d


@dataclass
class Detections:
    """Column-wise segments for one sequence."""

    start: np.ndarray
    end: np.ndarray
    label: np.ndarray
    score: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def from_segments(cls, segments):
        if not segments:
            return cls.empty()
        return cls(
            np.array([s.start for s in segments], dtype=np.float64),
            np.array([s.end for s in segments], dtype=np.float64),
            np.array([s.label for s in segments], dtype=np.int64),
            np.array([1.0 if s.score is None else s.score for s in segments], dtype=np.float64),
        )

    def __len__(self):
        return int(self.start.shape[0])

    def take(self, idx):
        return Detections(self.start[idx], self.end[idx], self.label[idx], self.score[idx])

    def to_segments(self):
        return [
            Segment(float(s), float(e), int(c), float(p))
            for s, e, c, p in zip(self.start, self.end, self.label, self.score)
        ]

    def shifted(self, seconds):
        return Detections(self.start + seconds, self.end + seconds, self.label, self.score)

    @staticmethod
    def concatenate(items):
        items = [d for d in items if len(d)]
        if not items:
            return Detections.empty()
        return Detections(
            np.concatenate([d.start for d in items]),
            np.concatenate([d.end for d in items]),
            np.concatenate([d.label for d in items]),
            np.concatenate([d.score for d in items]),
        )


@dataclass
class DenseOutputs:
    class_logits: list  # per level Tensor [B, C, T_l]
    offsets: list  # per level Tensor [B, 2, T_l], non-negative, in level timesteps
    level_strides: list


class _ConvHead(Module):
    def __init__(self, dim, out_channels, kernel, rng, dtype):
        pad = kernel // 2
        self.conv1 = Conv1d(dim, dim, kernel, padding=pad, rng=rng, dtype=dtype)
        self.conv2 = Conv1d(dim, dim, kernel, padding=pad, rng=rng, dtype=dtype)
        self.out = Conv1d(dim, out_channels, kernel, padding=pad, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.out(relu(self.conv2(relu(self.conv1(x)))))


class ClassificationHead(_ConvHead):
    def __init__(self, dim, num_classes, kernel=3, prior_prob=0.01, rng=None, dtype=np.float64):
        super().__init__(dim, num_classes, kernel, rng if rng is not None else np.random.default_rng(0), dtype)
        if prior_prob > 0:
            self.out.bias.data[:] = -math.log((1.0 - prior_prob) / prior_prob)


class RegressionHead(_ConvHead):
    def __init__(self, dim, kernel=3, rng=None, dtype=np.float64):
        super().__init__(dim, 2, kernel, rng if rng is not None else np.random.default_rng(0), dtype)

    def forward(self, x):
        return softplus(super().forward(x))


def decode_heads(pyramid, cls_head, reg_head):
    """Apply the shared heads to every pyramid level."""
    return DenseOutputs(
        [cls_head(level) for level in pyramid.levels],
        [reg_head(level) for level in pyramid.levels],
        list(pyramid.level_strides),
    )


def decode_sequence(
    class_logits,
    offsets,
    level_strides,
    sampling_rate_hz,
    score_threshold=0.001,
    top_k=None,
    duration_s=None,
):
    """Turn one sequence's dense outputs into :class:`Detections`.

    ``class_logits[l]`` is ``[C, T_l]`` and ``offsets[l]`` ``[2, T_l]`` (numpy).
    Timestep t at level l is centred on input sample t * stride_l.
    """
    if sampling_rate_hz <= 0:
        raise ValueError(f"sampling rate must be positive, got {sampling_rate_hz}")
    starts, ends, labels, scores = [], [], [], []
    for logits, offs, stride in zip(class_logits, offsets, level_strides):
        probs = _sigmoid(np.asarray(logits, dtype=np.float64))
        cls_idx, t_idx = np.nonzero(probs > score_threshold)
        if cls_idx.size == 0:
            continue
        centre = t_idx.astype(np.float64)
        left = np.asarray(offs[0], dtype=np.float64)[t_idx]
        right = np.asarray(offs[1], dtype=np.float64)[t_idx]
        starts.append((centre - left) * stride / sampling_rate_hz)
        ends.append((centre + right) * stride / sampling_rate_hz)
        labels.append(cls_idx.astype(np.int64))
        scores.append(probs[cls_idx, t_idx])
    if not starts:
        return Detections.empty()
    det = Detections(np.concatenate(starts), np.concatenate(ends), np.concatenate(labels), np.concatenate(scores))
    det.start = np.maximum(det.start, 0.0)
    if duration_s is not None:
        det.end = np.minimum(det.end, duration_s)
    det = det.take(det.end - det.start > 1e-9)
    if top_k is not None and len(det) > top_k:
        order = np.argsort(-det.score, kind="stable")[:top_k]
        det = det.take(np.sort(order))
    return det


def dense_to_segments(dense, sampling_rate_hz, score_threshold=0.001, batch_index=0, top_k=None, duration_s=None):
    """Segments for one batch item of :class:`DenseOutputs`."""
    det = decode_sequence(
        [lg.data[batch_index] for lg in dense.class_logits],
        [of.data[batch_index] for of in dense.offsets],
        dense.level_strides,
        sampling_rate_hz,
        score_threshold,
        top_k,
        duration_s,
    )
    return det.to_segments()


def nms_detections(det, tiou_threshold=0.5, method="soft", sigma=0.5, min_score=0.001, max_segments=None):
    """Per-class NMS. Output is sorted by score, highest first."""
    if method not in ("hard", "soft"):
        raise ValueError(f"nms method must be 'hard' or 'soft', got {method!r}")
    if not 0.0 <= tiou_threshold <= 1.0:
        raise ValueError(f"tIoU threshold must be in [0, 1], got {tiou_threshold}")
    if len(det) == 0:
        return det
    kept = []
    for c in np.unique(det.label):
        idx = np.nonzero(det.label == c)[0]
        keep, new_scores = kernels.nms_single_class(
            np.ascontiguousarray(det.start[idx]),
            np.ascontiguousarray(det.end[idx]),
            np.ascontiguousarray(det.score[idx]),
            float(tiou_threshold),
            method == "soft",
            float(sigma),
            float(min_score) if method == "soft" else -np.inf,
            int(idx.size),
        )
        sub = det.take(idx[keep])
        sub.score = new_scores
        kept.append(sub)
    out = Detections.concatenate(kept)
    order = np.lexsort((out.label, out.start, -out.score))
    out = out.take(order)
    if max_segments is not None:
        out = out.take(slice(0, max_segments))
    return out


def nms(segments, tiou_threshold=0.5, method="soft", sigma=0.5, min_score=0.001, max_segments=None):
    det = nms_detections(Detections.from_segments(segments), tiou_threshold, method, sigma, min_score, max_segments)
    return det.to_segments()
