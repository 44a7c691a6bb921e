"""Time each hot kernel under numba and pure numpy on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the median wall time of both backends and
their ratio. Results are checked for agreement before timing.
"""

import argparse
import statistics
import time

import numpy as np

from cetal import kernels
from cetal._jit import HAVE_NUMBA


def _inputs(rng):
    B, C, T = 4, 64, 256
    x = rng.normal(size=(B, C, T))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    w = rng.normal(size=(C, 3))
    g_dw = rng.normal(size=(B, C, T // 2))
    mp_out, mp_idx = kernels.maxpool1d_forward_numpy(x, 3, 2)
    g_mp = rng.normal(size=mp_out.shape)

    n_pred, n_gt, n_seq = 2000, 300, 16
    p_seq = np.sort(rng.integers(n_seq, size=n_pred))
    p_start = rng.uniform(0, 60, n_pred)
    p_end = p_start + rng.uniform(0.5, 5, n_pred)
    p_score = rng.uniform(size=n_pred)
    order = np.lexsort((p_end, p_start, p_seq, -p_score))
    g_seq = rng.integers(n_seq, size=n_gt)
    g_start = rng.uniform(0, 60, n_gt)
    g_end = g_start + rng.uniform(0.5, 5, n_gt)
    g_order = np.lexsort((g_end, g_start, g_seq))
    match_args = (
        p_seq[order], p_start[order], p_end[order], g_seq[g_order], g_start[g_order], g_end[g_order], 0.5
    )
    n = 1500
    s = rng.uniform(0, 100, n)
    e = s + rng.uniform(0.5, 8, n)
    sc = rng.uniform(size=n)
    return {
        "maxpool_forward": ((x, 3, 2), kernels.maxpool1d_forward_numpy, kernels.maxpool1d_forward_numba),
        "maxpool_backward": ((g_mp, mp_idx, T), kernels.maxpool1d_backward_numpy, kernels.maxpool1d_backward_numba),
        "depthwise_forward": ((xp, w, 2), kernels.depthwise_forward_numpy, kernels.depthwise_forward_numba),
        "depthwise_backward": ((g_dw, xp, w, 2), kernels.depthwise_backward_numpy, kernels.depthwise_backward_numba),
        "greedy_match": (match_args, kernels.greedy_match_numpy, kernels.greedy_match_numba),
        "soft_nms": ((s, e, sc, 0.5, True, 0.5, 0.001, 100), kernels.nms_numpy, kernels.nms_numba),
        "hard_nms": ((s, e, sc, 0.5, False, 0.5, 0.001, 100), kernels.nms_numpy, kernels.nms_numba),
    }


def _time(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(np.asarray(u), np.asarray(v), rtol=1e-10, atol=1e-12) for u, v in zip(a, b))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    cases = _inputs(np.random.default_rng(args.seed))
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (call_args, np_fn, nb_fn) in cases.items():
        ref = np_fn(*call_args)
        got = nb_fn(*call_args)  # also triggers compilation outside the timed loop
        if not _agree(ref, got):
            raise SystemExit(f"{name}: backends disagree")
        t_np = _time(np_fn, call_args, args.repeat)
        t_nb = _time(nb_fn, call_args, args.repeat)
        print(f"{name:<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
