"""Brute-force reference implementations used by the tests.

Everything here is written from the definitions, loop by loop, and shares no
code with the package.
"""

import itertools
import math

import numpy as np


def band_allowed(n, w):
    return np.array([[abs(i - j) <= w // 2 for j in range(n)] for i in range(n)])


def causal_band_allowed(n, w):
    return np.array([[0 <= i - j <= w for j in range(n)] for i in range(n)])


def hybrid_allowed(is_global, centers, key_len, w):
    rows = []
    for g, t in zip(is_global, centers):
        rows.append([True if g else abs(j - t) <= w for j in range(key_len)])
    return np.array(rows)


def attention_loops(Q, K, V, allowed):
    """Textbook masked softmax attention, one row at a time, in float64."""
    nq, dk = Q.shape
    out = np.zeros((nq, V.shape[1]))
    for i in range(nq):
        logits = [sum(Q[i, c] * K[j, c] for c in range(dk)) / math.sqrt(dk)
                  if allowed[i, j] else -math.inf for j in range(K.shape[0])]
        m = max(logits)
        e = [math.exp(x - m) if x != -math.inf else 0.0 for x in logits]
        s = sum(e)
        for j, ej in enumerate(e):
            out[i] += (ej / s) * V[j]
    return out


def exhaustive_matching(ok):
    """Largest matching in a boolean bipartite matrix by trying every assignment."""
    n_ref, n_est = ok.shape
    best = 0
    for k in range(min(n_ref, n_est), 0, -1):
        for refs in itertools.combinations(range(n_ref), k):
            for ests in itertools.permutations(range(n_est), k):
                if all(ok[r, e] for r, e in zip(refs, ests)):
                    return k
    return best


def note_pair_ok(r, e, onset_tol=0.05, offset=False, offset_ratio=0.2, offset_min=0.05):
    if r.pitch != e.pitch or abs(e.onset - r.onset) > onset_tol + 1e-9:
        return False
    if offset:
        tol = max(offset_min, offset_ratio * (r.offset - r.onset))
        if abs(e.offset - r.offset) > tol + 1e-9:
            return False
    return True


def numeric_grad(f, x, idx, eps=1e-5):
    """Central difference of scalar ``f()`` w.r.t. ``x[idx]`` (``x`` edited in place)."""
    old = x[idx]
    x[idx] = old + eps
    fp = f()
    x[idx] = old - eps
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * eps)


def rel_err(a, b, floor=1e-4):
    return abs(a - b) / max(abs(a), abs(b), floor)


def probe_indices(rng, shape, n):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return [np.unravel_index(int(k), shape) for k in flat]
