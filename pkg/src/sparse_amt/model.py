"""Pre-LN encoder-decoder transformer with sparse attention variants.

Parameters live in a flat ``dict[str, ndarray]`` keyed by dotted names
(``enc.0.attn.Wq``, ``dec.1.cross.bo`` ...). Forward functions return
activations plus whatever the matching backward needs; gradients come back
as a dict with the same keys.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention as att
from .exceptions import ContractViolation, InputError
from .tokenizer import BOS_ID, EOS_ID, IS_LOCAL_ID, IS_TIME_ID, PAD_ID, TIME_OFFSET, VOCAB_SIZE

LN_EPS = 1e-6
INIT_STD = 0.02

ENC_SELF_KINDS = ("full", "local")
DEC_SELF_KINDS = ("full", "local")
CROSS_KINDS = ("full", "hybrid")


@dataclass(frozen=True)
class ModelConfig:
    n_input: int = 512
    d_model: int = 512
    heads: int = 8
    d_ff: int = 1024
    enc_layers: int = 6
    dec_layers: int = 6
    window: int = 64
    dropout: float = 0.1
    vocab_size: int = VOCAB_SIZE
    max_output_len: int = 1024
    enc_self: str = "local"
    dec_self: str = "local"
    cross: str = "hybrid"
    pooling: tuple = (4, 4, 2, 2, 1, 1)
    attention_impl: str = "band"
    positional: str = "sinusoidal"

    def __post_init__(self):
        object.__setattr__(self, "pooling", tuple(int(k) for k in self.pooling))
        if self.d_model % self.heads:
            raise InputError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if len(self.pooling) != self.dec_layers:
            raise InputError(f"pooling has {len(self.pooling)} entries for "
                             f"{self.dec_layers} decoder layers")
        if any(k < 1 for k in self.pooling):
            raise InputError(f"pooling kernels must be >= 1, got {self.pooling}")
        if self.window < 1:
            raise InputError(f"window must be >= 1, got {self.window}")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.enc_self not in ENC_SELF_KINDS:
            raise InputError(f"enc_self must be one of {ENC_SELF_KINDS}")
        if self.dec_self not in DEC_SELF_KINDS:
            raise InputError(f"dec_self must be one of {DEC_SELF_KINDS}")
        if self.cross not in CROSS_KINDS:
            raise InputError(f"cross must be one of {CROSS_KINDS}")
        if self.attention_impl not in ("band", "dense"):
            raise InputError("attention_impl must be 'band' or 'dense'")
        if self.positional != "sinusoidal":
            raise InputError("only sinusoidal positional encoding is implemented")
        if self.vocab_size != VOCAB_SIZE:
            raise InputError(f"vocab_size is fixed at {VOCAB_SIZE}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for k, v in d.items():
            if k not in types:
                raise InputError(f"unknown model config key {k!r}")
            try:
                if k == "pooling":
                    kw[k] = tuple(int(x) for x in str(v).split(",") if x.strip()) \
                        if isinstance(v, str) else tuple(v)
                elif types[k] == "int":
                    kw[k] = int(v)
                elif types[k] == "float":
                    kw[k] = float(v)
                else:
                    kw[k] = str(v)
            except ValueError:
                raise InputError(f"bad value for {k}: {v!r}") from None
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_dict(parse_key_values(text))


def parse_key_values(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# Attention/pooling combinations of the compared model variants.
VARIANTS = {
    "baseline": dict(enc_self="full", cross="full", dec_self="full", pooling="none"),
    "V1": dict(enc_self="local", cross="full", dec_self="full", pooling="none"),
    "V2": dict(enc_self="local", cross="full", dec_self="local", pooling="none"),
    "V3": dict(enc_self="local", cross="hybrid", dec_self="local", pooling="none"),
    "V4": dict(enc_self="local", cross="hybrid", dec_self="local", pooling="uniform"),
    "V5": dict(enc_self="local", cross="hybrid", dec_self="local", pooling="hierarchical"),
}


def pooling_schedule(style: str, dec_layers: int) -> tuple:
    """``none`` -> all 1; ``uniform`` -> all 4; ``hierarchical`` -> 4s, then 2s, then 1s.

    For six layers the hierarchical schedule is ``(4, 4, 2, 2, 1, 1)``.
    """
    if style == "none":
        return (1,) * dec_layers
    if style == "uniform":
        return (4,) * dec_layers
    if style == "hierarchical":
        return tuple((4, 2, 1)[min(2, (3 * i) // dec_layers)] for i in range(dec_layers))
    raise InputError(f"unknown pooling style {style!r}")


def variant_config(tag: str, base: ModelConfig | None = None) -> ModelConfig:
    if tag not in VARIANTS:
        raise InputError(f"unknown variant {tag!r}; choose from {sorted(VARIANTS)}")
    base = base or ModelConfig()
    v = VARIANTS[tag]
    return base.replace(enc_self=v["enc_self"], cross=v["cross"], dec_self=v["dec_self"],
                        pooling=pooling_schedule(v["pooling"], base.dec_layers))


# ---------------------------------------------------------------------------
# parameters


def _mha_shapes(prefix, d):
    return {f"{prefix}.{n}": ((d, d) if n.startswith("W") else (d,)) for n in att.MHA_PARAMS}


def param_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"enc.in.W": (cfg.n_input, d), "enc.in.b": (d,)}

    def ln(name):
        shapes[f"{name}.g"] = (d,)
        shapes[f"{name}.b"] = (d,)

    def ffn(name):
        shapes.update({f"{name}.W1": (d, f), f"{name}.b1": (f,),
                       f"{name}.W2": (f, d), f"{name}.b2": (d,)})

    for i in range(cfg.enc_layers):
        ln(f"enc.{i}.ln1")
        shapes.update(_mha_shapes(f"enc.{i}.attn", d))
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    ln("enc.ln")
    shapes["dec.embed"] = (cfg.vocab_size, d)
    for i in range(cfg.dec_layers):
        ln(f"dec.{i}.ln1")
        shapes.update(_mha_shapes(f"dec.{i}.self", d))
        ln(f"dec.{i}.ln2")
        shapes.update(_mha_shapes(f"dec.{i}.cross", d))
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    ln("dec.ln")
    shapes["dec.out.W"] = (d, cfg.vocab_size)
    shapes["dec.out.b"] = (cfg.vocab_size,)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def _truncated_normal(rng, shape, std):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    """Truncated-normal(0.02) matrices and embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            v = np.ones(shape)
        elif len(shape) == 1:
            v = np.zeros(shape)
        else:
            v = _truncated_normal(rng, shape, INIT_STD)
        params[name] = v.astype(dtype)
    return params


def check_params(params: dict, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    missing = set(shapes) - set(params)
    if missing:
        raise InputError(f"missing parameters: {sorted(missing)[:5]}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise InputError(f"{name}: shape {params[name].shape}, expected {shape}")


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _add_grads(grads, prefix, g):
    for k, v in g.items():
        key = f"{prefix}.{k}"
        if key in grads:
            grads[key] += v
        else:
            grads[key] = v


# ---------------------------------------------------------------------------
# layers


def sinusoidal_positions(n: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(dtype)


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, {"g": dg, "b": db}


def ffn(x, p):
    pre = x @ p["W1"] + p["b1"]
    h = np.maximum(pre, 0.0)
    return h @ p["W2"] + p["b2"], (x, pre, h)


def ffn_backward(dy, p, cache):
    x, pre, h = cache
    g = {"W2": h.T @ dy, "b2": dy.sum(axis=0)}
    dh = dy @ p["W2"].T
    dh = np.where(pre > 0, dh, 0.0)
    g["W1"] = x.T @ dh
    g["b1"] = dh.sum(axis=0)
    return dh @ p["W1"].T, g


def dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dy, keep):
    return dy if keep is None else dy * keep


def pool_encoder_output(Z: np.ndarray, kernel: int) -> np.ndarray:
    """Non-overlapping mean over ``kernel`` consecutive frames (ragged tail allowed)."""
    kernel = int(kernel)
    if kernel < 1:
        raise InputError(f"pooling kernel must be >= 1, got {kernel}")
    if kernel == 1:
        return Z
    T = Z.shape[0]
    starts = np.arange(0, T, kernel)
    counts = np.minimum(kernel, T - starts)
    return np.add.reduceat(Z, starts, axis=0) / counts[:, None].astype(Z.dtype)


def pool_backward(dP: np.ndarray, T: int, kernel: int) -> np.ndarray:
    if kernel == 1:
        return dP
    starts = np.arange(0, T, kernel)
    counts = np.minimum(kernel, T - starts)
    return np.repeat(dP / counts[:, None].astype(dP.dtype), counts, axis=0)


def softmax_cross_entropy(logits, targets, ignore=PAD_ID):
    """Summed token cross-entropy over non-ignored targets and its logit gradient."""
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    keep = targets != ignore
    rows = np.arange(len(targets))
    loss = -logp[rows, targets][keep].sum()
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    dlogits[~keep] = 0.0
    return loss, dlogits, int(keep.sum())


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise ContractViolation(f"non-finite activations in {where}")


# ---------------------------------------------------------------------------
# masks from configuration


def encoder_mask(cfg: ModelConfig, T: int) -> att.AttentionMask:
    if cfg.enc_self == "local":
        return att.build_band_mask(T, cfg.window)
    return att.build_full_mask(T, T)


def decoder_self_mask(cfg: ModelConfig, n: int) -> att.AttentionMask:
    if cfg.dec_self == "local":
        return att.build_causal_band_mask(n, cfg.window)
    return att.build_causal_mask(n)


def hybrid_query_meta(token_ids) -> tuple[np.ndarray, np.ndarray]:
    """Per-query ``(is_global, time_bin)`` for decoder input tokens.

    A query is local only if its token is a NoteOn, NoteOff or Velocity and
    some Time token has appeared at or before it; its aligned position is the
    most recent Time value. Everything else attends globally.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    is_time = IS_TIME_ID[ids]
    pos = np.arange(len(ids))
    last_time_pos = np.maximum.accumulate(np.where(is_time, pos, -1)) if len(ids) else pos
    seen = last_time_pos >= 0
    centers = np.where(seen, ids[np.maximum(last_time_pos, 0)] - TIME_OFFSET, 0)
    is_global = ~(IS_LOCAL_ID[ids] & seen)
    return is_global, centers


def cross_mask(cfg: ModelConfig, token_ids, key_len: int, kernel: int) -> att.AttentionMask:
    n = len(token_ids)
    if cfg.cross == "full":
        return att.build_full_mask(n, key_len)
    is_global, centers = hybrid_query_meta(token_ids)
    # frame index on the pooled grid; times past the clip end stick to the last frame
    centers = np.minimum(centers // kernel, key_len - 1)
    return att.build_hybrid_mask(is_global, centers, key_len, cfg.window)


# ---------------------------------------------------------------------------
# encoder


def encode(features, cfg: ModelConfig, params: dict, *, rng=None, return_cache=False):
    """Features ``[T, n_input]`` -> latent sequence ``[T, d_model]``."""
    x_in = np.asarray(features, dtype=params["enc.in.W"].dtype)
    if x_in.ndim != 2 or x_in.shape[1] != cfg.n_input:
        raise InputError(f"features must be [T, {cfg.n_input}], got {x_in.shape}")
    T = x_in.shape[0]
    if T < 1:
        raise InputError("features must have at least one frame")
    rate = cfg.dropout if rng is not None else 0.0
    mask = encoder_mask(cfg, T)
    x = x_in @ params["enc.in.W"] + params["enc.in.b"] + sinusoidal_positions(T, cfg.d_model, x_in.dtype)
    caches = []
    for i in range(cfg.enc_layers):
        pre = f"enc.{i}"
        a, c_ln1 = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        m, c_att = att.multi_head_attention(a, a, _sub(params, f"{pre}.attn"), mask, cfg.heads,
                                            impl=cfg.attention_impl, tag="enc_self",
                                            return_state=True)
        m, k1 = dropout(m, rate, rng)
        x = x + m
        a, c_ln2 = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        f, c_ffn = ffn(a, _sub(params, f"{pre}.ffn"))
        f, k2 = dropout(f, rate, rng)
        x = x + f
        _check_finite(x, f"encoder layer {i}")
        caches.append((c_ln1, c_att, k1, c_ln2, c_ffn, k2))
    Z, c_lnf = layer_norm(x, params["enc.ln.g"], params["enc.ln.b"])
    if return_cache:
        return Z, {"x_in": x_in, "layers": caches, "lnf": c_lnf}
    return Z


def encode_backward(dZ, cfg, params, cache, grads):
    dx, g = layer_norm_backward(dZ, cache["lnf"])
    _add_grads(grads, "enc.ln", g)
    for i in reversed(range(cfg.enc_layers)):
        pre = f"enc.{i}"
        c_ln1, c_att, k1, c_ln2, c_ffn, k2 = cache["layers"][i]
        df = dropout_backward(dx, k2)
        da, g = ffn_backward(df, _sub(params, f"{pre}.ffn"), c_ffn)
        _add_grads(grads, f"{pre}.ffn", g)
        dln, g = layer_norm_backward(da, c_ln2)
        _add_grads(grads, f"{pre}.ln2", g)
        dx = dx + dln
        dm = dropout_backward(dx, k1)
        dq, dkv, g = att.multi_head_attention_backward(dm, _sub(params, f"{pre}.attn"), c_att)
        _add_grads(grads, f"{pre}.attn", g)
        dln, g = layer_norm_backward(dq + dkv, c_ln1)
        _add_grads(grads, f"{pre}.ln1", g)
        dx = dx + dln
    _add_grads(grads, "enc.in", {"W": cache["x_in"].T @ dx, "b": dx.sum(axis=0)})


def pooled_views(Z, cfg: ModelConfig) -> dict:
    return {k: pool_encoder_output(Z, k) for k in sorted(set(cfg.pooling))}


# ---------------------------------------------------------------------------
# decoder (teacher forced, all positions at once)


def decode_forward(token_ids, Z, cfg: ModelConfig, params: dict, *, rng=None,
                   return_cache=False):
    """Logits ``[n, vocab]`` for every position of a decoder input sequence."""
    ids = np.asarray(token_ids, dtype=np.int64)
    n = len(ids)
    if n < 1:
        raise InputError("decoder input must contain at least BOS")
    if n > cfg.max_output_len:
        raise InputError(f"decoder input length {n} exceeds max_output_len {cfg.max_output_len}")
    dtype = params["dec.embed"].dtype
    rate = cfg.dropout if rng is not None else 0.0
    views = pooled_views(Z, cfg)
    self_mask = decoder_self_mask(cfg, n)
    x = params["dec.embed"][ids] + sinusoidal_positions(n, cfg.d_model, dtype)
    caches = []
    for i in range(cfg.dec_layers):
        pre = f"dec.{i}"
        k = cfg.pooling[i]
        mem = views[k]
        a, c1 = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        m, s_self = att.multi_head_attention(a, a, _sub(params, f"{pre}.self"), self_mask,
                                             cfg.heads, impl=cfg.attention_impl,
                                             tag="dec_self", return_state=True)
        m, k1 = dropout(m, rate, rng)
        x = x + m
        a, c2 = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        cmask = cross_mask(cfg, ids, mem.shape[0], k)
        m, s_cross = att.multi_head_attention(a, mem, _sub(params, f"{pre}.cross"), cmask,
                                              cfg.heads, impl=cfg.attention_impl,
                                              tag="cross", return_state=True)
        m, k2 = dropout(m, rate, rng)
        x = x + m
        a, c3 = layer_norm(x, params[f"{pre}.ln3.g"], params[f"{pre}.ln3.b"])
        f, c_ffn = ffn(a, _sub(params, f"{pre}.ffn"))
        f, k3 = dropout(f, rate, rng)
        x = x + f
        _check_finite(x, f"decoder layer {i}")
        caches.append((c1, s_self, k1, c2, s_cross, k2, c3, c_ffn, k3))
    h, c_lnf = layer_norm(x, params["dec.ln.g"], params["dec.ln.b"])
    logits = h @ params["dec.out.W"] + params["dec.out.b"]
    if return_cache:
        return logits, {"ids": ids, "layers": caches, "lnf": c_lnf, "h": h, "T": Z.shape[0]}
    return logits


def decode_backward(dlogits, cfg, params, cache, grads):
    """Accumulates decoder grads into ``grads``; returns ``dZ``."""
    h = cache["h"]
    _add_grads(grads, "dec.out", {"W": h.T @ dlogits, "b": dlogits.sum(axis=0)})
    dx, g = layer_norm_backward(dlogits @ params["dec.out.W"].T, cache["lnf"])
    _add_grads(grads, "dec.ln", g)
    T = cache["T"]
    dviews = {}
    for i in reversed(range(cfg.dec_layers)):
        pre = f"dec.{i}"
        c1, s_self, k1, c2, s_cross, k2, c3, c_ffn, k3 = cache["layers"][i]
        da, g = ffn_backward(dropout_backward(dx, k3), _sub(params, f"{pre}.ffn"), c_ffn)
        _add_grads(grads, f"{pre}.ffn", g)
        dln, g = layer_norm_backward(da, c3)
        _add_grads(grads, f"{pre}.ln3", g)
        dx = dx + dln
        dq, dmem, g = att.multi_head_attention_backward(
            dropout_backward(dx, k2), _sub(params, f"{pre}.cross"), s_cross)
        _add_grads(grads, f"{pre}.cross", g)
        k = cfg.pooling[i]
        dviews[k] = dviews.get(k, 0) + dmem
        dln, g = layer_norm_backward(dq, c2)
        _add_grads(grads, f"{pre}.ln2", g)
        dx = dx + dln
        dq, dkv, g = att.multi_head_attention_backward(
            dropout_backward(dx, k1), _sub(params, f"{pre}.self"), s_self)
        _add_grads(grads, f"{pre}.self", g)
        dln, g = layer_norm_backward(dq + dkv, c1)
        _add_grads(grads, f"{pre}.ln1", g)
        dx = dx + dln
    dE = np.zeros_like(params["dec.embed"])
    np.add.at(dE, cache["ids"], dx)
    _add_grads(grads, "dec", {"embed": dE})
    dZ = 0
    for k in sorted(dviews):
        dZ = dZ + pool_backward(dviews[k], T, k)
    return dZ


def forward_backward(batch, cfg: ModelConfig, params: dict, *, rng=None):
    """Teacher-forced mean token cross-entropy over a batch and its gradients.

    ``batch`` is a sequence of ``(features, target_ids)`` where each target
    runs ``BOS ... EOS`` optionally followed by PAD. Items are processed one
    at a time and gradients summed in batch order.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    items = []
    total_tokens = 0
    for features, target in batch:
        ids = np.asarray(target, dtype=np.int64)
        nonpad = np.flatnonzero(ids != PAD_ID)
        ids = ids[: nonpad[-1] + 1] if len(nonpad) else ids[:0]
        if len(ids) < 2:
            continue
        items.append((features, ids))
        total_tokens += len(ids) - 1
    if total_tokens == 0:
        return 0.0, grads

    loss = 0.0
    for features, ids in items:
        Z, enc_cache = encode(features, cfg, params, rng=rng, return_cache=True)
        logits, dec_cache = decode_forward(ids[:-1], Z, cfg, params, rng=rng, return_cache=True)
        item_loss, dlogits, _ = softmax_cross_entropy(logits, ids[1:])
        loss += item_loss
        dZ = decode_backward(dlogits / total_tokens, cfg, params, dec_cache, grads)
        encode_backward(dZ, cfg, params, enc_cache, grads)
    loss /= total_tokens
    if not np.isfinite(loss):
        raise ContractViolation("non-finite training loss")
    return float(loss), grads


def batch_loss(batch, cfg, params):
    """Eval-mode mean token cross-entropy (no gradients)."""
    total, count = 0.0, 0
    for features, target in batch:
        ids = np.asarray(target, dtype=np.int64)
        ids = ids[ids != PAD_ID]
        if len(ids) < 2:
            continue
        Z = encode(features, cfg, params)
        logits = decode_forward(ids[:-1], Z, cfg, params)
        l, _, c = softmax_cross_entropy(logits, ids[1:])
        total += l
        count += c
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# incremental decoding


class KVCache:
    """Per-layer self-attention keys/values of the tokens decoded so far."""

    def __init__(self, cfg: ModelConfig, dtype):
        dk = cfg.d_model // cfg.heads
        self.capacity = cfg.max_output_len
        self.keys = [np.zeros((cfg.heads, self.capacity, dk), dtype) for _ in range(cfg.dec_layers)]
        self.values = [np.zeros((cfg.heads, self.capacity, dk), dtype) for _ in range(cfg.dec_layers)]
        self.length = 0

    def append(self, layer, k, v):
        n = self.length
        self.keys[layer][:, n:n + 1] = k
        self.values[layer][:, n:n + 1] = v

    def view(self, layer, upto):
        return self.keys[layer][:, :upto], self.values[layer][:, :upto]


class IncrementalDecoder:
    """Feeds one token at a time, reusing cached self-attention keys/values.

    Cross-attention keys/values of each pooled encoder view are projected
    once at construction and reused for every step.
    """

    def __init__(self, Z, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self.dtype = params["dec.embed"].dtype
        self.cache = KVCache(cfg, self.dtype)
        views = pooled_views(np.asarray(Z, dtype=self.dtype), cfg)
        self.cross_kv = []
        for i in range(cfg.dec_layers):
            mem = views[cfg.pooling[i]]
            self.cross_kv.append(att.mha_project_kv(mem, _sub(params, f"dec.{i}.cross"), cfg.heads))
        self.tokens: list[int] = []
        self._pe_row = lambda pos: sinusoidal_positions(pos + 1, cfg.d_model, self.dtype)[pos]

    def step(self, token_id: int) -> np.ndarray:
        cfg, params = self.cfg, self.params
        pos = len(self.tokens)
        if pos >= cfg.max_output_len:
            raise InputError(f"cannot decode past max_output_len={cfg.max_output_len}")
        self.tokens.append(int(token_id))
        x = (params["dec.embed"][token_id] + self._pe_row(pos))[None, :]
        self_mask = decoder_self_mask(cfg, pos + 1).rows(pos, pos + 1)
        for i in range(cfg.dec_layers):
            pre = f"dec.{i}"
            p_self = _sub(params, f"{pre}.self")
            a, _ = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
            k_new, v_new = att.mha_project_kv(a, p_self, cfg.heads)
            self.cache.append(i, k_new, v_new)
            m = att.multi_head_attention(a, None, p_self, self_mask, cfg.heads,
                                         impl=cfg.attention_impl, tag="dec_self",
                                         kv=self.cache.view(i, pos + 1))
            x = x + m
            a, _ = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
            K, V = self.cross_kv[i]
            cmask = cross_mask(cfg, self.tokens, K.shape[1], cfg.pooling[i]).rows(pos, pos + 1)
            m = att.multi_head_attention(a, None, _sub(params, f"{pre}.cross"), cmask, cfg.heads,
                                         impl=cfg.attention_impl, tag="cross", kv=(K, V))
            x = x + m
            a, _ = layer_norm(x, params[f"{pre}.ln3.g"], params[f"{pre}.ln3.b"])
            f, _ = ffn(a, _sub(params, f"{pre}.ffn"))
            x = x + f
        self.cache.length = pos + 1
        h, _ = layer_norm(x, params["dec.ln.g"], params["dec.ln.b"])
        return (h @ params["dec.out.W"] + params["dec.out.b"])[0]


def greedy_decode(features, cfg: ModelConfig, params: dict, *, max_len: int | None = None):
    """Argmax decoding from BOS; returns the token ids between BOS and EOS."""
    limit = min(max_len or cfg.max_output_len, cfg.max_output_len)
    Z = encode(features, cfg, params)
    dec = IncrementalDecoder(Z, cfg, params)
    seq = [BOS_ID]
    while len(seq) < limit:
        nxt = int(np.argmax(dec.step(seq[-1])))
        if nxt == EOS_ID:
            break
        seq.append(nxt)
    return seq[1:]


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SAMT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params: dict, extra: dict | None = None) -> None:
    """Write config and named float32 tensors.

    ``extra`` holds additional named arrays (optimizer state) stored after the
    model parameters.
    """
    records = list(params.items()) + list((extra or {}).items())
    cfg_bytes = cfg.to_text().encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(records)))
        for name, arr in records:
            arr = np.asarray(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Returns ``(cfg, params, extra)``; parameter shapes are checked against the config."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    off = 4

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, raw, off)
        off += struct.calcsize(fmt)
        return vals

    try:
        (version,) = take("<I")
        if version != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        (n,) = take("<I")
        cfg = ModelConfig.from_text(raw[off:off + n].decode("utf-8"))
        off += n
        (count,) = take("<I")
        arrays = {}
        for _ in range(count):
            (n,) = take("<I")
            name = raw[off:off + n].decode("utf-8")
            off += n
            (rank,) = take("<I")
            dims = take(f"<{rank}I")
            size = math.prod(dims)
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            arrays[name] = data.astype(dtype)
    except (struct.error, ValueError) as e:
        raise InputError(f"{path}: truncated or corrupt checkpoint ({e})") from None
    shapes = param_shapes(cfg)
    params = {k: arrays.pop(k) for k in shapes if k in arrays}
    check_params(params, cfg)
    return cfg, params, arrays
