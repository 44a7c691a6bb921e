"""The full localizer: encoder pyramid plus shared dual heads, and batched inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .backbone import Backbone, PyramidFeatures
from .heads import ClassificationHead, Detections, RegressionHead, decode_heads, decode_sequence, nms_detections
from .nn import LayerNorm, Module
from .tensor import ConfigurationError, Tensor, no_grad, transpose

DEFAULT_THRESHOLDS = [0.3, 0.4, 0.5, 0.6, 0.7]


@dataclass
class InferenceConfig:
    score_threshold: float = 0.001
    pre_nms_top_k: int = 2000
    nms_method: str = "soft"
    nms_sigma: float = 0.5
    nms_threshold: float = 0.5
    min_score: float = 0.001
    max_segments: int = 100
    batch_size: int = 8

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigurationError(f"unknown inference config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class ActionLocalizer(Module):
    def __init__(self, cfg, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.backbone = Backbone(cfg, rng=rng, dtype=dtype)
        # per-level channel norm so every level reaches the shared heads on one scale
        self.neck = [LayerNorm(cfg.embed_dim, dtype=dtype) for _ in range(cfg.num_blocks)]
        self.cls_head = ClassificationHead(cfg.embed_dim, cfg.num_classes, cfg.head_kernel, cfg.prior_prob, rng=rng, dtype=dtype)
        self.reg_head = RegressionHead(cfg.embed_dim, cfg.head_kernel, rng=rng, dtype=dtype)

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        pyr = self.backbone(x)
        levels = [transpose(norm(transpose(lv, (0, 2, 1))), (0, 2, 1)) for norm, lv in zip(self.neck, pyr.levels)]
        return decode_heads(PyramidFeatures(levels, pyr.level_strides), self.cls_head, self.reg_head)

    def level_lengths(self, length):
        out = []
        for s in self.cfg.block_strides:
            length = -(-length // s)
            out.append(length)
        return out


@dataclass
class _Chunk:
    seq_index: int
    offset_s: float
    features: np.ndarray
    rate: float
    duration_s: float


def _chunks(sequences, clip_length_s, overlap):
    from .data import window_bounds

    for i, seq in enumerate(sequences):
        T = seq.features.shape[1]
        if clip_length_s is None:
            yield _Chunk(i, 0.0, seq.features, seq.sampling_rate_hz, T / seq.sampling_rate_hz)
            continue
        for start, length in window_bounds(T, seq.sampling_rate_hz, clip_length_s, overlap):
            feats = seq.features[:, start : start + length]
            if feats.shape[1] < length:
                feats = np.pad(feats, ((0, 0), (0, length - feats.shape[1])))
            real = min(length, T - start)
            yield _Chunk(i, start / seq.sampling_rate_hz, feats, seq.sampling_rate_hz, real / seq.sampling_rate_hz)


def predict(model, sequences, infer_cfg=None, clip_length_s=None, overlap=0.5):
    """Detections per sequence after decoding and NMS."""
    infer_cfg = infer_cfg or InferenceConfig()
    per_seq = [[] for _ in sequences]
    chunks = list(_chunks(sequences, clip_length_s, overlap))
    # group equal lengths so batches stack
    by_len = {}
    for ch in chunks:
        by_len.setdefault(ch.features.shape[1], []).append(ch)
    with no_grad():
        for length in sorted(by_len):
            group = by_len[length]
            for b0 in range(0, len(group), infer_cfg.batch_size):
                batch = group[b0 : b0 + infer_cfg.batch_size]
                x = np.stack([c.features for c in batch]).astype(model.dtype)
                dense = model(x)
                for j, ch in enumerate(batch):
                    det = decode_sequence(
                        [lg.data[j] for lg in dense.class_logits],
                        [of.data[j] for of in dense.offsets],
                        dense.level_strides,
                        ch.rate,
                        infer_cfg.score_threshold,
                        infer_cfg.pre_nms_top_k,
                        ch.duration_s,
                    )
                    per_seq[ch.seq_index].append(det.shifted(ch.offset_s))
    out = []
    for dets in per_seq:
        merged = Detections.concatenate(dets)
        out.append(
            nms_detections(
                merged,
                infer_cfg.nms_threshold,
                infer_cfg.nms_method,
                infer_cfg.nms_sigma,
                infer_cfg.min_score,
                infer_cfg.max_segments,
            )
        )
    return out
