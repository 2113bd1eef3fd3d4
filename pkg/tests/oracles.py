"""Independent float64 reference computations used by the test-suite.

Nothing here calls into the kernels; everything is materialised densely.
"""
import math

import numpy as np


def dense_logits(q, k):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    return q @ k.T / math.sqrt(q.shape[1])


def masked_attention(q, k, v, allowed):
    """softmax(S + M) V with M = -inf where ``allowed`` is False."""
    s = dense_logits(q, k)
    s = np.where(allowed, s, -np.inf)
    m = s.max(axis=1, keepdims=True)
    p = np.exp(s - m)
    p /= p.sum(axis=1, keepdims=True)
    return p @ np.asarray(v, dtype=np.float64)


def causal_allowed(n):
    return np.tril(np.ones((n, n), dtype=bool))


def dense_causal_attention(q, k, v):
    return masked_attention(q, k, v, causal_allowed(len(q)))


def token_mask_from_blocks(bits, n, b_q, b_k):
    rows = np.arange(n) // b_q
    cols = np.arange(n) // b_k
    return np.asarray(bits)[rows[:, None], cols[None, :]] & causal_allowed(n)


def sink_local_oracle(i, n, b_q, b_k, sink_tokens, local_tokens_min, segment_size):
    """Enumerate key blocks token by token.

    A causal key block is sink-local when it touches a sink token, touches a
    query token of block ``i`` (diagonal), or lies within the local window of
    ``ceil(local_tokens_min / b_k)`` blocks (rounded up to whole segments)
    immediately before the first diagonal block.
    """
    q_tokens = range(i * b_q, min((i + 1) * b_q, n))
    n_local = math.ceil(math.ceil(local_tokens_min / b_k) / segment_size) * segment_size
    diag = []
    causal = []
    for j in range(math.ceil(n / b_k)):
        toks = range(j * b_k, min((j + 1) * b_k, n))
        if toks[0] > q_tokens[-1]:
            continue
        causal.append(j)
        if toks[-1] >= q_tokens[0]:
            diag.append(j)
    first_diag = min(diag)
    out = set()
    for j in causal:
        toks = range(j * b_k, min((j + 1) * b_k, n))
        if toks[0] < sink_tokens:
            out.add(j)
        elif j in diag:
            out.add(j)
        elif first_diag - n_local <= j < first_diag:
            out.add(j)
    return sorted(out)


def selection_oracle(q, k, q_deq, k_deq, tau, b_q, b_k, sink_tokens=32, local_tokens_min=128,
                     segment_size=4, rel_eps=1e-6):
    """Materialise every estimate and apply ``exp(s - m) / l >= tau`` elementwise.

    Returns ``(bits, ambiguous)``; ``ambiguous`` flags blocks whose decision
    depends on an element within ``rel_eps`` (relative, in score space) of tau.
    """
    n = len(q)
    n_q, n_k = math.ceil(n / b_q), math.ceil(n / b_k)
    s = dense_logits(q, k)
    s_est = dense_logits(q_deq, k_deq)
    n_sink = math.ceil(sink_tokens / b_k)
    bits = np.zeros((n_q, n_k), dtype=bool)
    amb = np.zeros((n_q, n_k), dtype=bool)
    for i in range(n_q):
        rows = slice(i * b_q, min((i + 1) * b_q, n))
        sl = sink_local_oracle(i, n, b_q, b_k, sink_tokens, local_tokens_min, segment_size)
        cols = np.concatenate([np.arange(j * b_k, min((j + 1) * b_k, n)) for j in sl])
        sub = s[rows][:, cols]
        m = sub.max(axis=1)
        l = np.exp(sub - m[:, None]).sum(axis=1)
        bits[i, sl] = True
        local_start = min(j for j in sl if j >= n_sink) if any(j >= n_sink for j in sl) else n_sink
        middle = list(range(n_sink, local_start))
        sure = []
        maybe = []
        for j in middle:
            p = np.exp(s_est[rows, j * b_k:(j + 1) * b_k] - m[:, None]) / l[:, None]
            hi = bool((p >= tau * (1 + rel_eps)).any())
            lo = bool((p >= tau * (1 - rel_eps)).any())
            sure.append(hi)
            maybe.append(lo and not hi)
        for start in range(0, len(middle), segment_size):
            seg = middle[start:start + segment_size]
            flags = sure[start:start + segment_size]
            fuzzy = maybe[start:start + segment_size]
            if len(seg) < segment_size or any(flags):
                bits[i, seg] = True
            elif any(fuzzy):
                amb[i, seg] = True
    return bits, amb
