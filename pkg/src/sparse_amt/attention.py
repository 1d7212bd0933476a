"""Attention masks and masked scaled dot-product attention.

Every mask used here admits a contiguous column range per query row, so an
:class:`AttentionMask` is stored as per-row ``[start, end)`` bounds and the
dense additive matrix is only materialized on request. Two kernels consume
it:

* :func:`attention_dense` adds the materialized ``{0, -inf}`` matrix to the
  full ``Q K^T`` logits (the reference path);
* :func:`attention_band` gathers only the admitted keys of each row, so the
  work is proportional to the number of admitted entries.

Both accept arbitrary leading batch dimensions (e.g. heads) on ``Q, K, V``
and share the same backward formulas.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation, InputError

FULL = "full"
BAND = "band"
CAUSAL_BAND = "causal_band"
HYBRID = "hybrid"

F32_MASK_SENTINEL = -1e9


# ---------------------------------------------------------------------------
# op counting

_counters: contextvars.ContextVar[tuple] = contextvars.ContextVar("mac_counters", default=())


class MacCounter(Counter):
    """Multiply-accumulate tally keyed by tag; ``total`` sums all tags."""

    @property
    def total(self) -> int:
        return sum(self.values())


@contextlib.contextmanager
def count_macs():
    """Collect MACs performed by attention kernels inside the block.

    >>> with count_macs() as c:
    ...     _ = attention_dense(q, k, v, build_full_mask(4, 4))  # doctest: +SKIP
    >>> c.total  # doctest: +SKIP
    """
    counter = MacCounter()
    token = _counters.set(_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _counters.reset(token)


def record_macs(n: int, tag: str | None = None) -> None:
    for c in _counters.get():
        c[tag or "attention"] += int(n)


# ---------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class AttentionMask:
    """Per-row admitted key range ``[starts[i], ends[i])`` over ``key_len`` keys."""

    kind: str
    starts: np.ndarray
    ends: np.ndarray
    key_len: int

    def __post_init__(self):
        if np.any(self.ends <= self.starts):
            rows = np.flatnonzero(self.ends <= self.starts)
            raise ContractViolation(f"mask rows {rows.tolist()} admit no keys")

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.starts), self.key_len)

    @property
    def widths(self) -> np.ndarray:
        return self.ends - self.starts

    @property
    def is_full(self) -> bool:
        return bool(np.all(self.starts == 0) and np.all(self.ends == self.key_len))

    def allowed(self) -> np.ndarray:
        """Boolean ``[query_len, key_len]`` matrix of admitted entries."""
        j = np.arange(self.key_len)
        return (j >= self.starts[:, None]) & (j < self.ends[:, None])

    def additive(self, neg: float = -np.inf, dtype=np.float64) -> np.ndarray:
        """The ``{0, neg}`` matrix added to the logits."""
        return np.where(self.allowed(), 0.0, neg).astype(dtype)

    def rows(self, start: int, stop: int) -> "AttentionMask":
        return AttentionMask(self.kind, self.starts[start:stop], self.ends[start:stop],
                             self.key_len)


def _check_positive(n, w):
    if int(n) < 1:
        raise InputError(f"sequence length must be >= 1, got {n}")
    if int(w) < 1:
        raise InputError(f"window must be >= 1, got {w}")


def build_full_mask(query_len: int, key_len: int) -> AttentionMask:
    return AttentionMask(FULL, np.zeros(query_len, dtype=np.int64),
                         np.full(query_len, key_len, dtype=np.int64), key_len)


def build_causal_mask(n: int) -> AttentionMask:
    i = np.arange(n)
    return AttentionMask(FULL, np.zeros(n, dtype=np.int64), i + 1, n)


def build_band_mask(n: int, w: int) -> AttentionMask:
    """Symmetric sliding window: row ``i`` admits ``|i - j| <= w // 2``."""
    _check_positive(n, w)
    half = int(w) // 2
    i = np.arange(n)
    return AttentionMask(BAND, np.maximum(0, i - half), np.minimum(n, i + half + 1), n)


def build_causal_band_mask(n: int, w: int) -> AttentionMask:
    """Causal sliding window: row ``i`` admits ``0 <= i - j <= w``."""
    _check_positive(n, w)
    i = np.arange(n)
    return AttentionMask(CAUSAL_BAND, np.maximum(0, i - int(w)), i + 1, n)


def build_hybrid_mask(is_global, centers, key_len: int, w: int) -> AttentionMask:
    """Token-type-conditional cross-attention mask.

    Rows flagged ``is_global`` (Time tokens, specials, anything before the
    first Time token) admit every key. Other rows admit ``|j - centers[i]| <= w``,
    clipped to the key range.
    """
    _check_positive(key_len, w)
    is_global = np.asarray(is_global, dtype=bool).reshape(-1)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    if centers.shape != is_global.shape:
        raise InputError("is_global and centers must have the same length")
    local = ~is_global
    bad = local & ((centers < 0) | (centers >= key_len))
    if np.any(bad):
        raise InputError(
            f"aligned positions {centers[bad].tolist()} outside [0, {key_len - 1}]")
    starts = np.where(local, np.maximum(0, centers - int(w)), 0)
    ends = np.where(local, np.minimum(key_len, centers + int(w) + 1), key_len)
    return AttentionMask(HYBRID, starts.astype(np.int64), ends.astype(np.int64), key_len)


def build_mask(kind: str, query_len: int, key_len: int, w: int = 1, **meta) -> AttentionMask:
    if kind == FULL:
        return build_full_mask(query_len, key_len)
    if kind == BAND:
        return build_band_mask(query_len, w)
    if kind == CAUSAL_BAND:
        return build_causal_band_mask(query_len, w)
    if kind == HYBRID:
        return build_hybrid_mask(meta["is_global"], meta["centers"], key_len, w)
    raise InputError(f"unknown mask kind {kind!r}")


# ---------------------------------------------------------------------------
# kernels


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_qkv(Q, K, V, mask):
    if Q.shape[-1] != K.shape[-1]:
        raise InputError(f"query/key dims differ: {Q.shape} vs {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise InputError(f"key/value lengths differ: {K.shape} vs {V.shape}")
    if mask.shape != (Q.shape[-2], K.shape[-2]):
        raise InputError(f"mask shape {mask.shape} does not match "
                         f"queries {Q.shape[-2]} x keys {K.shape[-2]}")


def _lead(x) -> int:
    return int(np.prod(x.shape[:-2], dtype=np.int64))


def attention_dense(Q, K, V, mask: AttentionMask, *, tag=None, return_state=False):
    """``softmax((Q K^T + M) / sqrt(d_k)) V`` with the mask fully materialized."""
    _check_qkv(Q, K, V, mask)
    scale = 1.0 / np.sqrt(Q.shape[-1])
    logits = Q @ np.swapaxes(K, -1, -2)
    if not mask.is_full:
        neg = F32_MASK_SENTINEL if Q.dtype == np.float32 else -np.inf
        logits = logits + mask.additive(neg, Q.dtype)
    P = _softmax_rows(logits * scale)
    out = P @ V
    nq, nk = mask.shape
    record_macs(_lead(Q) * nq * nk * (Q.shape[-1] + V.shape[-1]), tag)
    if return_state:
        return out, {"path": "dense", "P": P, "scale": scale}
    return out


def _band_gather_index(starts, ends, key_len):
    widths = ends - starts
    W = int(widths.max())
    offs = np.arange(W)
    valid = offs[None, :] < widths[:, None]
    idx = np.minimum(starts[:, None] + offs[None, :], key_len - 1)
    return idx, valid


def attention_band(Q, K, V, mask: AttentionMask, *, tag=None, return_state=False):
    """Masked attention computed only over each row's admitted key range.

    Rows spanning every key (global rows of a hybrid mask) go through one
    dense product; the remaining rows gather their windows. Masked logits
    are never formed.
    """
    _check_qkv(Q, K, V, mask)
    nq, nk = mask.shape
    widths = mask.widths
    if np.any(widths <= 0):
        raise ContractViolation("band row admits no keys")
    scale = 1.0 / np.sqrt(Q.shape[-1])
    dk, dv = Q.shape[-1], V.shape[-1]
    out = np.zeros(Q.shape[:-1] + (dv,), dtype=np.result_type(Q, V))
    state = {"path": "band", "scale": scale}

    full_rows = np.flatnonzero(widths == nk)
    local_rows = np.flatnonzero(widths != nk)
    state["full_rows"], state["local_rows"] = full_rows, local_rows

    if len(full_rows):
        Qf = Q[..., full_rows, :]
        Pf = _softmax_rows((Qf @ np.swapaxes(K, -1, -2)) * scale)
        out[..., full_rows, :] = Pf @ V
        state["Pf"] = Pf

    if len(local_rows):
        idx, valid = _band_gather_index(mask.starts[local_rows], mask.ends[local_rows], nk)
        Ql = Q[..., local_rows, :]
        Kg = K[..., idx, :]
        Vg = V[..., idx, :]
        s = np.einsum("...qd,...qwd->...qw", Ql, Kg) * scale
        s = np.where(valid, s, -np.inf)
        Pl = _softmax_rows(s)
        out[..., local_rows, :] = np.einsum("...qw,...qwd->...qd", Pl, Vg)
        state.update(idx=idx, valid=valid, Pl=Pl)

    record_macs(_lead(Q) * int(widths.sum()) * (dk + dv), tag)
    if return_state:
        return out, state
    return out


def attention(Q, K, V, mask: AttentionMask, *, impl="band", tag=None, return_state=False):
    """Dispatch to the band kernel for sparse masks, dense otherwise."""
    if impl == "dense" or mask.is_full:
        return attention_dense(Q, K, V, mask, tag=tag, return_state=return_state)
    return attention_band(Q, K, V, mask, tag=tag, return_state=return_state)


def _softmax_backward(P, dP):
    return P * (dP - np.sum(dP * P, axis=-1, keepdims=True))


def _scatter_rows(target_shape, idx, values):
    """Sum ``values[..., q, w, :]`` into rows ``idx[q, w]`` of a zero array."""
    lead = target_shape[:-2]
    nk, d = target_shape[-2:]
    moved = np.zeros((nk,) + tuple(lead) + (d,), dtype=values.dtype)
    nd = values.ndim
    vals = np.moveaxis(values, (nd - 3, nd - 2), (0, 1)).reshape((-1,) + tuple(lead) + (d,))
    np.add.at(moved, idx.reshape(-1), vals)
    return np.moveaxis(moved, 0, -2)


def attention_backward(dout, Q, K, V, state):
    """Gradients ``(dQ, dK, dV)`` of either kernel given its saved state."""
    if not state or "path" not in state:
        raise ContractViolation("attention backward called without forward state")
    scale = state["scale"]
    if state["path"] == "dense":
        P = state["P"]
        dV = np.swapaxes(P, -1, -2) @ dout
        dS = _softmax_backward(P, dout @ np.swapaxes(V, -1, -2)) * scale
        return dS @ K, np.swapaxes(dS, -1, -2) @ Q, dV

    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    full_rows, local_rows = state["full_rows"], state["local_rows"]
    if len(full_rows):
        Pf = state["Pf"]
        dOf = dout[..., full_rows, :]
        dV += np.swapaxes(Pf, -1, -2) @ dOf
        dS = _softmax_backward(Pf, dOf @ np.swapaxes(V, -1, -2)) * scale
        dQ[..., full_rows, :] = dS @ K
        dK += np.swapaxes(dS, -1, -2) @ Q[..., full_rows, :]
    if len(local_rows):
        idx, Pl = state["idx"], state["Pl"]
        Kg = K[..., idx, :]
        Vg = V[..., idx, :]
        dOl = dout[..., local_rows, :]
        dP = np.einsum("...qd,...qwd->...qw", dOl, Vg)
        dS = _softmax_backward(Pl, dP) * scale
        dQ[..., local_rows, :] = np.einsum("...qw,...qwd->...qd", dS, Kg)
        dKg = dS[..., None] * Q[..., local_rows, None, :]
        dVg = Pl[..., None] * dOl[..., None, :]
        dK += _scatter_rows(K.shape, idx, dKg)
        dV += _scatter_rows(V.shape, idx, dVg)
    return dQ, dK, dV


# ---------------------------------------------------------------------------
# multi-head wrapper

MHA_PARAMS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


def _split_heads(x, h):
    n, d = x.shape
    return x.reshape(n, h, d // h).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dk = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dk)


def _check_mha(x_q, x_kv, p, h):
    d = x_q.shape[-1]
    if x_q.ndim != 2 or x_kv.ndim != 2 or x_kv.shape[-1] != d:
        raise InputError(f"expected [n, d_model] inputs, got {x_q.shape} and {x_kv.shape}")
    if d % h:
        raise InputError(f"d_model {d} not divisible by {h} heads")
    for name in ("Wq", "Wk", "Wv", "Wo"):
        if p[name].shape != (d, d):
            raise InputError(f"{name} has shape {p[name].shape}, expected {(d, d)}")


def mha_project_kv(x_kv, p, h):
    """Per-head keys and values ``[h, n, d_k]`` for a key/value sequence."""
    return _split_heads(x_kv @ p["Wk"] + p["bk"], h), _split_heads(x_kv @ p["Wv"] + p["bv"], h)


def multi_head_attention(x_q, x_kv, p, mask: AttentionMask, h: int, *, impl="band",
                         tag=None, kv=None, return_state=False):
    """Project, attend per head under a shared mask, merge, output-project.

    ``kv`` may carry precomputed per-head ``(K, V)`` (decode caches); ``x_kv``
    is then only used for shape checks and may be ``None``.
    """
    if kv is None:
        _check_mha(x_q, x_kv, p, h)
        K, V = mha_project_kv(x_kv, p, h)
    else:
        K, V = kv
    Q = _split_heads(x_q @ p["Wq"] + p["bq"], h)
    ctx, att_state = attention(Q, K, V, mask, impl=impl, tag=tag, return_state=True)
    merged = _merge_heads(ctx)
    out = merged @ p["Wo"] + p["bo"]
    if return_state:
        return out, {"x_q": x_q, "x_kv": x_kv, "Q": Q, "K": K, "V": V,
                     "merged": merged, "att": att_state, "h": h}
    return out


def multi_head_attention_backward(dout, p, state):
    """Returns ``(dx_q, dx_kv, grads)`` where ``grads`` is keyed like ``p``."""
    if not state or "att" not in state:
        raise ContractViolation("MHA backward called without forward state")
    g = {}
    g["Wo"] = state["merged"].T @ dout
    g["bo"] = dout.sum(axis=0)
    dctx = _split_heads(dout @ p["Wo"].T, state["h"])
    dQ, dK, dV = attention_backward(dctx, state["Q"], state["K"], state["V"], state["att"])
    dQ, dK, dV = _merge_heads(dQ), _merge_heads(dK), _merge_heads(dV)
    x_q, x_kv = state["x_q"], state["x_kv"]
    g["Wq"] = x_q.T @ dQ
    g["bq"] = dQ.sum(axis=0)
    g["Wk"] = x_kv.T @ dK
    g["bk"] = dK.sum(axis=0)
    g["Wv"] = x_kv.T @ dV
    g["bv"] = dV.sum(axis=0)
    dx_q = dQ @ p["Wq"].T
    dx_kv = dK @ p["Wk"].T + dV @ p["Wv"].T
    return dx_q, dx_kv, g
