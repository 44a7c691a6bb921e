"""Segment-level detection metrics: tIoU, AP, mAP over tIoU thresholds, confusion matrix."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .heads import Detections
from .model import DEFAULT_THRESHOLDS


class EvaluationError(ValueError):
    """The metric is undefined for the given inputs."""


def tiou(a, b):
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union if union > 0 else 0.0


def _as_detections(items):
    if isinstance(items, Detections):
        return items
    return Detections.from_segments(list(items))


def _pool(preds_per_seq, gts_per_seq, label):
    """Flatten one class across sequences into (seq, start, end[, score]) columns."""
    p_seq, p_s, p_e, p_sc = [], [], [], []
    for i, det in enumerate(preds_per_seq):
        m = det.label == label
        p_seq.append(np.full(int(m.sum()), i, dtype=np.int64))
        p_s.append(det.start[m])
        p_e.append(det.end[m])
        p_sc.append(det.score[m])
    g_seq, g_s, g_e = [], [], []
    for i, gts in enumerate(gts_per_seq):
        m = gts.label == label
        g_seq.append(np.full(int(m.sum()), i, dtype=np.int64))
        g_s.append(gts.start[m])
        g_e.append(gts.end[m])
    cat = lambda xs, dt=np.float64: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)
    preds = (cat(p_seq, np.int64), cat(p_s), cat(p_e), cat(p_sc))
    gts = (cat(g_seq, np.int64), cat(g_s), cat(g_e))
    return preds, gts


def _sort_preds(p_seq, p_s, p_e, p_sc):
    order = np.lexsort((p_e, p_s, p_seq, -p_sc))
    return p_seq[order], p_s[order], p_e[order], p_sc[order]


def _sort_gts(g_seq, g_s, g_e):
    order = np.lexsort((g_e, g_s, g_seq))
    return g_seq[order], g_s[order], g_e[order]


def interpolated_ap(tp_flags, num_gt):
    """Area under the all-point interpolated precision/recall curve."""
    if num_gt == 0:
        return 0.0
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags, dtype=np.float64)
    fp = np.cumsum(~tp_flags, dtype=np.float64)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def _class_ap(preds, gts, threshold):
    p_seq, p_s, p_e, _ = _sort_preds(*preds)
    g_seq, g_s, g_e = _sort_gts(*gts)
    tp = kernels.greedy_match(p_seq, p_s, p_e, g_seq, g_s, g_e, float(threshold))
    return interpolated_ap(np.asarray(tp, dtype=bool), g_seq.shape[0])


def average_precision(preds, gts, threshold):
    """AP of scored segments against ground truth, all from one sequence and class."""
    det = _as_detections(preds)
    gt = _as_detections(gts)
    preds_cols = (np.zeros(len(det), dtype=np.int64), det.start, det.end, det.score)
    gt_cols = (np.zeros(len(gt), dtype=np.int64), gt.start, gt.end)
    return _class_ap(preds_cols, gt_cols, threshold)


@dataclass
class EvalReport:
    thresholds: list
    ap: list  # [class][threshold]; None where the class has no ground truth
    map_per_threshold: list
    avg_map: float
    confusion: list
    gt_counts: list
    pred_counts: list
    confusion_threshold: float = 0.5
    labels: list = field(default_factory=list)

    def to_dict(self):
        return {
            "thresholds": self.thresholds,
            "ap": self.ap,
            "map_per_threshold": self.map_per_threshold,
            "avg_map": self.avg_map,
            "confusion": self.confusion,
            "confusion_threshold": self.confusion_threshold,
            "counts": {"gt": self.gt_counts, "pred": self.pred_counts},
            "labels": self.labels,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["thresholds"],
            d["ap"],
            d["map_per_threshold"],
            d["avg_map"],
            d["confusion"],
            d["counts"]["gt"],
            d["counts"]["pred"],
            d.get("confusion_threshold", 0.5),
            d.get("labels", []),
        )

    def confusion_csv(self):
        names = list(self.labels) if self.labels else [str(c) for c in range(len(self.confusion) - 1)]
        names = names + ["background"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["gt\\pred"] + names)
        for name, row in zip(names, self.confusion):
            writer.writerow([name] + [int(v) for v in row])
        return buf.getvalue()


def evaluate(preds, gts, thresholds=None, num_classes=None, confusion_threshold=0.5, confusion_min_score=0.3, labels=None):
    """Pooled per-class AP at each tIoU threshold.

    ``preds`` and ``gts`` hold one entry per sequence (a :class:`Detections`
    or a list of :class:`Segment`). Classes without ground truth are left out
    of the mean.
    """
    thresholds = list(DEFAULT_THRESHOLDS if thresholds is None else thresholds)
    if len(preds) != len(gts):
        raise EvaluationError(f"{len(preds)} prediction lists for {len(gts)} ground-truth lists")
    pred_d = [_as_detections(p) for p in preds]
    gt_d = [_as_detections(g) for g in gts]
    if sum(len(g) for g in gt_d) == 0:
        raise EvaluationError("no ground-truth segments: mAP is undefined")
    if num_classes is None:
        labels_seen = [int(d.label.max()) for d in pred_d + gt_d if len(d)]
        num_classes = max(labels_seen) + 1
    ap = []
    gt_counts, pred_counts = [], []
    for c in range(num_classes):
        p_cols, g_cols = _pool(pred_d, gt_d, c)
        gt_counts.append(int(g_cols[0].shape[0]))
        pred_counts.append(int(p_cols[0].shape[0]))
        if g_cols[0].shape[0] == 0:
            ap.append([None] * len(thresholds))
            continue
        ap.append([_class_ap(p_cols, g_cols, t) for t in thresholds])
    scored = [row for row in ap if row[0] is not None]
    map_per_threshold = [float(np.mean([row[j] for row in scored])) for j in range(len(thresholds))]
    avg_map = float(np.mean(map_per_threshold))
    conf = confusion_matrix(pred_d, gt_d, num_classes, confusion_threshold, confusion_min_score)
    return EvalReport(
        thresholds,
        ap,
        map_per_threshold,
        avg_map,
        conf.astype(int).tolist(),
        gt_counts,
        pred_counts,
        confusion_threshold,
        list(labels or []),
    )


def confusion_matrix(preds, gts, num_classes, tiou_threshold=0.5, min_score=0.3, normalize=False):
    """``[C+1, C+1]`` counts, rows ground truth, columns predicted; index C is background.

    Each GT takes the label of its best-tIoU prediction (score >= ``min_score``)
    when that tIoU reaches the threshold, else the background column.
    Predictions overlapping no GT at the threshold land in the background row.
    """
    if not 0.0 <= tiou_threshold <= 1.0:
        raise ValueError(f"tIoU threshold must be in [0, 1], got {tiou_threshold}")
    C = num_classes
    mat = np.zeros((C + 1, C + 1), dtype=np.float64)
    for det, gt in zip(preds, gts):
        det = _as_detections(det)
        gt = _as_detections(gt)
        det = det.take(det.score >= min_score)
        if len(gt) and len(det):
            inter = np.clip(
                np.minimum(gt.end[:, None], det.end[None, :]) - np.maximum(gt.start[:, None], det.start[None, :]),
                0.0,
                None,
            )
            union = (gt.end - gt.start)[:, None] + (det.end - det.start)[None, :] - inter
            iou = inter / union
        else:
            iou = np.zeros((len(gt), len(det)))
        for g in range(len(gt)):
            row = iou[g]
            if row.size and row.max() >= tiou_threshold:
                best = np.flatnonzero(row == row.max())
                j = best[np.argmax(det.score[best])]
                mat[gt.label[g], det.label[j]] += 1
            else:
                mat[gt.label[g], C] += 1
        for j in range(len(det)):
            if iou.shape[0] == 0 or iou[:, j].max() < tiou_threshold:
                mat[C, det.label[j]] += 1
    if normalize:
        sums = mat.sum(axis=1, keepdims=True)
        mat = np.divide(mat, sums, out=np.zeros_like(mat), where=sums > 0)
    return mat
