"""Slow, loop-based reference implementations used to check the vectorised code.

Nothing here imports the package's metric, loss or assignment code; each
function works from first principles on plain Python numbers.
"""

import math

import numpy as np


def tiou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def greedy_flags(preds, gts, threshold):
    """``preds`` are (seq, start, end, score); ``gts`` are (seq, start, end).

    Predictions are visited by descending score (ties: seq, start, end). Each
    takes the unmatched same-sequence GT of highest tIoU, ties going to the
    earliest start then earliest end.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][3], preds[i][0], preds[i][1], preds[i][2]))
    used = [False] * len(gts)
    flags = []
    for i in order:
        ps, pst, pen, _ = preds[i]
        best, best_key = None, None
        for j, (gs, gst, gen) in enumerate(gts):
            if used[j] or gs != ps:
                continue
            key = (tiou((pst, pen), (gst, gen)), -gst, -gen)
            if best_key is None or key > best_key:
                best, best_key = j, key
        if best is not None and best_key[0] >= threshold:
            used[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def ap_from_flags(flags, num_gt):
    """Exact all-point interpolated AP: each TP contributes 1/num_gt times the
    best precision reachable at or beyond its rank."""
    if num_gt == 0:
        return 0.0
    precisions = []
    tp = 0
    for k, f in enumerate(flags, start=1):
        tp += f
        precisions.append(tp / k)
    total = 0.0
    for k, f in enumerate(flags):
        if f:
            total += max(precisions[k:]) / num_gt
    return total


def brute_ap(preds, gts, threshold):
    return ap_from_flags(greedy_flags(preds, gts, threshold), len(gts))


def brute_map(preds_by_seq, gts_by_seq, num_classes, thresholds):
    """Pooled mAP per threshold over classes that have ground truth.

    Inputs are per-sequence lists of (start, end, label[, score]) tuples.
    """
    per_thr = []
    for thr in thresholds:
        aps = []
        for c in range(num_classes):
            g = [(i, s, e) for i, seq in enumerate(gts_by_seq) for (s, e, lab) in seq if lab == c]
            if not g:
                continue
            p = [(i, s, e, sc) for i, seq in enumerate(preds_by_seq) for (s, e, lab, sc) in seq if lab == c]
            aps.append(brute_ap(p, g, thr))
        per_thr.append(sum(aps) / len(aps))
    return per_thr


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_loss(logits, offsets, cls_t, reg_t, pos, alpha=0.25, gamma=2.0, reg_weight=1.0):
    """Focal + (1 - IoU) loss with explicit loops.

    ``logits`` [B,C,P], ``offsets`` [B,2,P], ``cls_t`` [B,C,P], ``reg_t``
    [B,2,P], ``pos`` [B,P] booleans.
    """
    B, C, P = logits.shape
    n_pos = int(sum(bool(pos[b][p]) for b in range(B) for p in range(P)))
    norm = max(n_pos, 1)
    focal = 0.0
    for b in range(B):
        for c in range(C):
            for p in range(P):
                x = float(logits[b, c, p])
                t = float(cls_t[b, c, p])
                prob = _sig(x)
                ce = -(t * math.log(prob) + (1 - t) * math.log(1 - prob))
                p_t = prob if t == 1.0 else 1 - prob
                a_t = alpha if t == 1.0 else 1 - alpha
                focal += a_t * (1 - p_t) ** gamma * ce
    reg = 0.0
    for b in range(B):
        for p in range(P):
            if not pos[b][p]:
                continue
            lp, rp = float(offsets[b, 0, p]), float(offsets[b, 1, p])
            lt, rt = float(reg_t[b, 0, p]), float(reg_t[b, 1, p])
            inter = min(lp, lt) + min(rp, rt)
            union = lp + rp + lt + rt - inter
            reg += 1 - inter / union
    return focal / norm + reg_weight * reg / norm


def brute_targets(segments_samples, level_lengths, level_strides, ranges):
    """Per point: (positive, label, left/stride, right/stride) by direct search.

    ``segments_samples`` holds (start, end, label) in input samples.
    """
    out = []
    for n, s, (lo, hi) in zip(level_lengths, level_strides, ranges):
        for t in range(n):
            c = t * s
            chosen = None
            for gs, ge, lab in segments_samples:
                if not (gs < c < ge):
                    continue
                far = max(c - gs, ge - c)
                if not (lo <= far <= hi):
                    continue
                key = (ge - gs, gs)
                if chosen is None or key < chosen[0]:
                    chosen = (key, gs, ge, lab)
            if chosen is None:
                out.append((False, -1, 0.0, 0.0))
            else:
                _, gs, ge, lab = chosen
                out.append((True, lab, (c - gs) / s, (ge - c) / s))
    return out


def hard_nms(segments, threshold):
    """Greedy per-class NMS on (start, end, label, score) tuples."""
    order = sorted(segments, key=lambda x: -x[3])
    kept = []
    for cand in order:
        if all(k[2] != cand[2] or tiou(k[:2], cand[:2]) <= threshold for k in kept):
            kept.append(cand)
    return kept


def numeric_grad(f, array, h=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``array`` (in place)."""
    flat = array.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def zscore(values):
    n = len(values)
    mu = sum(values) / n
    sd = math.sqrt(sum((v - mu) ** 2 for v in values) / n)
    return [(v - mu) / (sd + 1e-8) for v in values]


def power_db(signal_on, signal_off):
    return 10.0 * math.log10(float(np.mean(np.square(signal_on))) / float(np.mean(np.square(signal_off))))
