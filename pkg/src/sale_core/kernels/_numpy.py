"""Pure-numpy reference kernels.

Each function mirrors the signature of its counterpart in ``_numba`` and
vectorises over the rows of one query block at a time.
"""
import numpy as np

_TILE = 128


def dense_attention(q, k, v, scale):
    n, d = q.shape
    out = np.empty((n, d), dtype=np.float64)
    for s in range(0, n, _TILE):
        e = min(s + _TILE, n)
        logits = (q[s:e] @ k[:e].T) * scale
        future = np.arange(e)[None, :] > np.arange(s, e)[:, None]
        logits[future] = -np.inf
        m = logits.max(axis=1, keepdims=True)
        p = np.exp(logits - m)
        out[s:e] = (p @ v[:e]) / p.sum(axis=1, keepdims=True)
    return out


def sink_local_stats(q, k, scale, b_q, b_k, sl_idx, sl_cnt):
    n = q.shape[0]
    m = np.full(n, -np.inf)
    l = np.zeros(n)
    for qb in range(sl_idx.shape[0]):
        r0, r1 = qb * b_q, min((qb + 1) * b_q, n)
        mr = np.full(r1 - r0, -np.inf)
        lr = np.zeros(r1 - r0)
        for t in range(sl_cnt[qb]):
            kb = sl_idx[qb, t]
            c0, c1 = kb * b_k, min((kb + 1) * b_k, n)
            s = (q[r0:r1] @ k[c0:c1].T) * scale
            m_new = np.maximum(mr, s.max(axis=1))
            lr = lr * np.exp(mr - m_new) + np.exp(s - m_new[:, None]).sum(axis=1)
            mr = m_new
        m[r0:r1] = mr
        l[r0:r1] = lr
    return m, l


def estimate_middle(qc, kc, sq, sk, scale, bound, b_q, b_k, mid_lo, mid_hi, out):
    n = qc.shape[0]
    # float64 matmul of 4-bit codes is exact: |sum| <= 49 * d << 2**53
    qf = qc.astype(np.float64)
    kf = kc.astype(np.float64)
    for qb in range(out.shape[0]):
        lo, hi = mid_lo[qb], mid_hi[qb]
        if hi <= lo:
            continue
        r0, r1 = qb * b_q, min((qb + 1) * b_q, n)
        ints = qf[r0:r1] @ kf[lo * b_k:hi * b_k].T
        row_max = ints.reshape(r1 - r0, hi - lo, b_k).max(axis=2)
        comb = (sq[r0:r1, None] * sk[None, lo:hi]) * scale
        est = row_max * comb
        out[qb, lo:hi] = (est >= bound[r0:r1, None]).any(axis=0)
    return out


def sparse_attention(q, k, v, bits, b_q, b_k, scale):
    n, d = q.shape
    out = np.zeros((n, d), dtype=np.float64)
    cov = np.zeros(n, dtype=np.int64)
    for qb in range(bits.shape[0]):
        r0, r1 = qb * b_q, min((qb + 1) * b_q, n)
        rows = np.arange(r0, r1)
        m = np.full(r1 - r0, -np.inf)
        l = np.zeros(r1 - r0)
        acc = np.zeros((r1 - r0, d))
        last_kb = (r1 - 1) // b_k
        for kb in range(last_kb + 1):
            if not bits[qb, kb]:
                continue
            c0, c1 = kb * b_k, min((kb + 1) * b_k, n)
            s = (q[r0:r1] @ k[c0:c1].T) * scale
            visible = np.arange(c0, c1)[None, :] <= rows[:, None]
            s[~visible] = -np.inf
            cov[r0:r1] += visible.sum(axis=1)
            m_new = np.maximum(m, s.max(axis=1))
            live = m_new > -np.inf
            safe = np.where(live, m_new, 0.0)
            alpha = np.where(live, np.exp(m - safe), 1.0)
            p = np.exp(s - safe[:, None])
            l = l * alpha + p.sum(axis=1)
            acc = acc * alpha[:, None] + p @ v[c0:c1]
            m = m_new
        nz = l > 0
        out[r0:r1][nz] = acc[nz] / l[nz, None]
    return out, cov
