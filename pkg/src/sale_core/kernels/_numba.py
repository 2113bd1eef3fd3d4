"""numba-compiled kernels.

Tile products go through ``np.dot``; the softmax bookkeeping and the
selection early-exit run as compiled loops. Parallelism is over query
blocks and every output slot is written by exactly one iteration, so
results do not depend on the thread count.
"""
import math

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old here; prefer OpenMP, fall back to workqueue
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@njit(parallel=True, cache=True)
def dense_attention(q, k, v, scale):
    n, d = q.shape
    tile = 64
    out = np.empty((n, d), dtype=np.float64)
    for t in prange((n + tile - 1) // tile):
        r0, r1 = t * tile, min((t + 1) * tile, n)
        s = np.dot(q[r0:r1], k[:r1].T)
        for r in range(r1 - r0):
            row = r0 + r
            m = -np.inf
            for c in range(row + 1):
                s[r, c] *= scale
                if s[r, c] > m:
                    m = s[r, c]
            l = 0.0
            for c in range(row + 1):
                s[r, c] = math.exp(s[r, c] - m)
                l += s[r, c]
            for c in range(row + 1, r1):
                s[r, c] = 0.0
            s[r] /= l
        out[r0:r1] = np.dot(s, v[:r1])
    return out


@njit(parallel=True, cache=True)
def sink_local_stats(q, k, scale, b_q, b_k, sl_idx, sl_cnt):
    n = q.shape[0]
    m = np.full(n, -np.inf)
    l = np.zeros(n)
    for qb in prange(sl_idx.shape[0]):
        r0, r1 = qb * b_q, min((qb + 1) * b_q, n)
        for t_idx in range(sl_cnt[qb]):
            kb = sl_idx[qb, t_idx]
            c0, c1 = kb * b_k, min((kb + 1) * b_k, n)
            s = np.dot(q[r0:r1], k[c0:c1].T)
            for r in range(r1 - r0):
                bm = -np.inf
                for c in range(c1 - c0):
                    s[r, c] *= scale
                    if s[r, c] > bm:
                        bm = s[r, c]
                mr = m[r0 + r]
                m_new = max(mr, bm)
                lr = l[r0 + r] * math.exp(mr - m_new) if mr > -np.inf else 0.0
                for c in range(c1 - c0):
                    lr += math.exp(s[r, c] - m_new)
                m[r0 + r] = m_new
                l[r0 + r] = lr
    return m, l


@njit(parallel=True, cache=True)
def estimate_middle(qc, kc, sq, sk, scale, bound, b_q, b_k, mid_lo, mid_hi, out):
    n = qc.shape[0]
    # float64 products of 4-bit codes are exact integers
    qf = qc.astype(np.float64)
    kf = kc.astype(np.float64)
    for qb in prange(out.shape[0]):
        r0, r1 = qb * b_q, min((qb + 1) * b_q, n)
        for kb in range(mid_lo[qb], mid_hi[qb]):
            c0 = kb * b_k
            ints = np.dot(qf[r0:r1], kf[c0:c0 + b_k].T)
            hit = False
            for r in range(r1 - r0):
                best = ints[r, 0]
                for c in range(1, b_k):
                    if ints[r, c] > best:
                        best = ints[r, c]
                comb = (sq[r0 + r] * sk[kb]) * scale
                if best * comb >= bound[r0 + r]:
                    hit = True
                    break
            out[qb, kb] = hit
    return out


@njit(parallel=True, cache=True)
def sparse_attention(q, k, v, bits, b_q, b_k, scale):
    n, d = q.shape
    out = np.zeros((n, d), dtype=np.float64)
    cov = np.zeros(n, dtype=np.int64)
    for qb in prange(bits.shape[0]):
        r0, r1 = qb * b_q, min((qb + 1) * b_q, n)
        rows = r1 - r0
        m = np.full(rows, -np.inf)
        l = np.zeros(rows)
        acc = np.zeros((rows, d))
        for kb in range((r1 - 1) // b_k + 1):
            if not bits[qb, kb]:
                continue
            c0, c1 = kb * b_k, min((kb + 1) * b_k, n)
            s = np.dot(q[r0:r1], k[c0:c1].T)
            for r in range(rows):
                row = r0 + r
                bm = -np.inf
                for c in range(c1 - c0):
                    if c0 + c > row:
                        s[r, c] = -np.inf
                    else:
                        s[r, c] *= scale
                        cov[row] += 1
                        if s[r, c] > bm:
                            bm = s[r, c]
                m_new = max(m[r], bm)
                if m_new == -np.inf:
                    for c in range(c1 - c0):
                        s[r, c] = 0.0
                    continue
                alpha = math.exp(m[r] - m_new) if m[r] > -np.inf else 0.0
                lr = l[r] * alpha
                for c in range(c1 - c0):
                    s[r, c] = math.exp(s[r, c] - m_new)
                    lr += s[r, c]
                l[r] = lr
                m[r] = m_new
                for t in range(d):
                    acc[r, t] *= alpha
            acc += np.dot(s, v[c0:c1])
        for r in range(rows):
            if l[r] > 0.0:
                for t in range(d):
                    out[r0 + r, t] = acc[r, t] / l[r]
    return out, cov
