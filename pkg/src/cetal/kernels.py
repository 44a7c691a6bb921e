"""Inner loops that dominate runtime.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. ``CETAL_JIT`` picks which one the public names bind to; both stay
importable so tests and ``benchmarks/bench_kernels.py`` can compare them.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import USE_JIT, njit

# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------


def maxpool1d_forward_numpy(x, k, s):
    windows = sliding_window_view(x, k, axis=-1)[..., ::s, :]
    local = np.argmax(windows, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    idx = local + (np.arange(windows.shape[-2]) * s)
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool1d_backward_numpy(g, idx, length):
    B, C, _ = g.shape
    gx = np.zeros((B, C, length), dtype=g.dtype)
    bi, ci, _ = np.indices(g.shape, sparse=True)
    np.add.at(gx, (bi, ci, idx), g)
    return gx


@njit
def maxpool1d_forward_numba(x, k, s):
    B, C, T = x.shape
    n_out = (T - k) // s + 1
    out = np.empty((B, C, n_out), dtype=x.dtype)
    idx = np.empty((B, C, n_out), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for o in range(n_out):
                start = o * s
                best = x[b, c, start]
                arg = start
                for j in range(start + 1, start + k):
                    if x[b, c, j] > best:
                        best = x[b, c, j]
                        arg = j
                out[b, c, o] = best
                idx[b, c, o] = arg
    return out, idx


@njit
def maxpool1d_backward_numba(g, idx, length):
    B, C, n_out = g.shape
    gx = np.zeros((B, C, length), dtype=g.dtype)
    for b in range(B):
        for c in range(C):
            for o in range(n_out):
                gx[b, c, idx[b, c, o]] += g[b, c, o]
    return gx


# ---------------------------------------------------------------------------
# depthwise (groups == channels) strided convolution, input already padded
# ---------------------------------------------------------------------------


def depthwise_forward_numpy(xp, w, stride):
    K = w.shape[1]
    windows = sliding_window_view(xp, K, axis=-1)[..., ::stride, :]
    return np.einsum("bctk,ck->bct", windows, w)


def depthwise_backward_numpy(g, xp, w, stride):
    K = w.shape[1]
    n_out = g.shape[-1]
    windows = sliding_window_view(xp, K, axis=-1)[..., ::stride, :]
    gw = np.einsum("bct,bctk->ck", g, windows)
    gxp = np.zeros_like(xp)
    span = stride * (n_out - 1) + 1
    for j in range(K):
        gxp[..., j : j + span : stride] += g * w[None, :, j, None]
    return gxp, gw


@njit
def depthwise_forward_numba(xp, w, stride):
    B, C, Tp = xp.shape
    K = w.shape[1]
    n_out = (Tp - K) // stride + 1
    out = np.zeros((B, C, n_out), dtype=xp.dtype)
    for b in range(B):
        for c in range(C):
            for o in range(n_out):
                acc = 0.0
                base = o * stride
                for j in range(K):
                    acc += xp[b, c, base + j] * w[c, j]
                out[b, c, o] = acc
    return out


@njit
def depthwise_backward_numba(g, xp, w, stride):
    B, C, Tp = xp.shape
    K = w.shape[1]
    n_out = g.shape[2]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for b in range(B):
        for c in range(C):
            for o in range(n_out):
                go = g[b, c, o]
                base = o * stride
                for j in range(K):
                    gxp[b, c, base + j] += go * w[c, j]
                    gw[c, j] += go * xp[b, c, base + j]
    return gxp, gw


# ---------------------------------------------------------------------------
# greedy tIoU matching for AP
# ---------------------------------------------------------------------------


def greedy_match_numpy(p_seq, p_start, p_end, g_seq, g_start, g_end, threshold):
    """Mark each prediction (already in rank order) TP/FP.

    GTs must be sorted by (sequence, start) so the first maximal tIoU is the
    earliest-starting GT.
    """
    n_pred = p_seq.shape[0]
    tp = np.zeros(n_pred, dtype=np.bool_)
    used = np.zeros(g_seq.shape[0], dtype=np.bool_)
    if g_seq.shape[0] == 0:
        return tp
    inter = np.clip(
        np.minimum(p_end[:, None], g_end[None, :]) - np.maximum(p_start[:, None], g_start[None, :]),
        0.0,
        None,
    )
    union = (p_end - p_start)[:, None] + (g_end - g_start)[None, :] - inter
    iou = np.where(p_seq[:, None] == g_seq[None, :], inter / union, -1.0)
    for i in range(n_pred):
        row = np.where(used, -1.0, iou[i])
        j = int(np.argmax(row))
        if row[j] >= threshold:
            tp[i] = True
            used[j] = True
    return tp


@njit
def greedy_match_numba(p_seq, p_start, p_end, g_seq, g_start, g_end, threshold):
    n_pred = p_seq.shape[0]
    n_gt = g_seq.shape[0]
    tp = np.zeros(n_pred, dtype=np.bool_)
    used = np.zeros(n_gt, dtype=np.bool_)
    for i in range(n_pred):
        best = -1.0
        arg = -1
        for j in range(n_gt):
            if used[j] or g_seq[j] != p_seq[i]:
                continue
            inter = min(p_end[i], g_end[j]) - max(p_start[i], g_start[j])
            if inter < 0.0:
                inter = 0.0
            union = (p_end[i] - p_start[i]) + (g_end[j] - g_start[j]) - inter
            iou = inter / union
            if iou > best:
                best = iou
                arg = j
        if arg >= 0 and best >= threshold:
            tp[i] = True
            used[arg] = True
    return tp


# ---------------------------------------------------------------------------
# single-class NMS
# ---------------------------------------------------------------------------


def nms_numpy(starts, ends, scores, iou_threshold, soft, sigma, min_score, max_keep):
    """Returns (kept indices, their possibly decayed scores) in keep order."""
    scores = scores.astype(np.float64).copy()
    alive = np.ones(scores.shape[0], dtype=np.bool_)
    keep = []
    kept_scores = []
    lengths = ends - starts
    while len(keep) < max_keep:
        masked = np.where(alive, scores, -np.inf)
        i = int(np.argmax(masked)) if masked.size else 0
        if masked.size == 0 or not np.isfinite(masked[i]) or masked[i] < min_score:
            break
        keep.append(i)
        kept_scores.append(scores[i])
        alive[i] = False
        inter = np.clip(np.minimum(ends[i], ends) - np.maximum(starts[i], starts), 0.0, None)
        iou = inter / (lengths[i] + lengths - inter)
        if soft:
            scores = np.where(alive, scores * np.exp(-(iou * iou) / sigma), scores)
            alive &= scores >= min_score
        else:
            alive &= ~(iou > iou_threshold)
    return np.asarray(keep, dtype=np.int64), np.asarray(kept_scores, dtype=np.float64)


@njit
def nms_numba(starts, ends, scores, iou_threshold, soft, sigma, min_score, max_keep):
    n = scores.shape[0]
    sc = scores.astype(np.float64).copy()
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(min(n, max_keep), dtype=np.int64)
    kept_scores = np.empty(min(n, max_keep), dtype=np.float64)
    n_keep = 0
    while n_keep < max_keep:
        best = -np.inf
        i = -1
        for j in range(n):
            if alive[j] and sc[j] > best:
                best = sc[j]
                i = j
        if i < 0 or best < min_score:
            break
        keep[n_keep] = i
        kept_scores[n_keep] = best
        n_keep += 1
        alive[i] = False
        for j in range(n):
            if not alive[j]:
                continue
            inter = min(ends[i], ends[j]) - max(starts[i], starts[j])
            if inter < 0.0:
                inter = 0.0
            iou = inter / ((ends[i] - starts[i]) + (ends[j] - starts[j]) - inter)
            if soft:
                sc[j] = sc[j] * np.exp(-(iou * iou) / sigma)
                if sc[j] < min_score:
                    alive[j] = False
            elif iou > iou_threshold:
                alive[j] = False
    return keep[:n_keep], kept_scores[:n_keep]


if USE_JIT:
    maxpool1d_forward = maxpool1d_forward_numba
    maxpool1d_backward = maxpool1d_backward_numba
    depthwise_forward = depthwise_forward_numba
    depthwise_backward = depthwise_backward_numba
    greedy_match = greedy_match_numba
    nms_single_class = nms_numba
else:
    maxpool1d_forward = maxpool1d_forward_numpy
    maxpool1d_backward = maxpool1d_backward_numpy
    depthwise_forward = depthwise_forward_numpy
    depthwise_backward = depthwise_backward_numpy
    greedy_match = greedy_match_numpy
    nms_single_class = nms_numpy

BACKEND = "numba" if USE_JIT else "numpy"
