"""scikit-learn style wrapper around the sparse seq2seq transcriber."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import model as M
from . import trainer as T
from ._validation import check_features, check_note_lists
from .exceptions import InputError
from .metrics import onset_f1
from .tokenizer import BOS_ID, DEFAULT_HOP, EOS_ID, detokenize, encode, tokenize


class SparseTranscriber(BaseEstimator):
    """Audio-features-to-notes transcriber with sparse attention.

    ``X`` is a list of ``[T, n_features]`` frame matrices on the 20 ms grid
    and ``y`` a list of :class:`~sparse_amt.tokenizer.NoteEvent` lists.
    ``variant`` (``"baseline"``, ``"V1"`` ... ``"V5"``) overrides the
    per-sublayer attention kinds and pooling schedule; ``enc_self``,
    ``dec_self``, ``cross`` and ``pooling`` override the variant piecewise.

    Attributes set by ``fit``: ``config_``, ``params_``, ``optimizer_state_``,
    ``loss_curve_``, ``n_features_in_``.
    """

    def __init__(self, variant="V5", enc_self=None, dec_self=None, cross=None, d_model=512,
                 heads=8, d_ff=1024, enc_layers=6, dec_layers=6, window=64, dropout=0.1,
                 pooling=None, max_output_len=1024,
                 learning_rate=1e-4, weight_decay=0.01, batch_size=32, max_steps=1000,
                 clip_norm=1.0, hop=DEFAULT_HOP, dtype="float32", random_state=0):
        self.variant = variant
        self.enc_self = enc_self
        self.dec_self = dec_self
        self.cross = cross
        self.d_model = d_model
        self.heads = heads
        self.d_ff = d_ff
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.window = window
        self.dropout = dropout
        self.pooling = pooling
        self.max_output_len = max_output_len
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.clip_norm = clip_norm
        self.hop = hop
        self.dtype = dtype
        self.random_state = random_state

    def _make_config(self, n_features):
        cfg = M.ModelConfig(n_input=n_features, d_model=self.d_model, heads=self.heads,
                            d_ff=self.d_ff, enc_layers=self.enc_layers,
                            dec_layers=self.dec_layers, window=self.window,
                            dropout=self.dropout, max_output_len=self.max_output_len,
                            pooling=(1,) * self.dec_layers)
        cfg = M.variant_config(self.variant or "baseline", cfg)
        for kind in ("enc_self", "dec_self", "cross"):
            if getattr(self, kind) is not None:
                cfg = cfg.replace(**{kind: getattr(self, kind)})
        if self.pooling is not None:
            cfg = cfg.replace(pooling=tuple(self.pooling))
        return cfg

    def fit(self, X, y, callback=None):
        X = check_features(X, dtype=self.dtype)
        y = check_note_lists(y, len(X))
        n_features = X[0].shape[1]
        X = check_features(X, n_features, dtype=self.dtype)
        cfg = self._make_config(n_features)
        targets = [encode(tokenize(notes, self.hop)) for notes in y]
        too_long = [i for i, t in enumerate(targets) if len(t) - 1 > cfg.max_output_len]
        if too_long:
            raise InputError(f"targets {too_long[:5]} exceed max_output_len")

        rng = np.random.default_rng(self.random_state)
        bs = min(self.batch_size, len(X))

        def data(step):
            idx = rng.choice(len(X), size=bs, replace=False)
            return [(X[i], targets[i]) for i in idx]

        tcfg = T.TrainConfig(model=cfg, lr=self.learning_rate, weight_decay=self.weight_decay,
                             clip_norm=self.clip_norm, batch_size=bs, steps=self.max_steps,
                             seed=self.random_state, log_every=0)
        params, state, losses = T.train(tcfg, data=data, dtype=np.dtype(self.dtype),
                                        callback=callback)
        self.config_ = cfg
        self.params_ = params
        self.optimizer_state_ = state
        self.loss_curve_ = losses
        self.n_features_in_ = n_features
        return self

    def predict_tokens(self, X, max_len=None):
        check_is_fitted(self, "params_")
        X = check_features(X, self.n_features_in_, dtype=self.dtype)
        return [M.greedy_decode(x, self.config_, self.params_, max_len=max_len) for x in X]

    def predict(self, X, max_len=None):
        """Transcribe each frame matrix into a note list."""
        return [detokenize([BOS_ID] + body + [EOS_ID], self.hop)
                for body in self.predict_tokens(X, max_len=max_len)]

    def score(self, X, y):
        """Onset F1 pooled over all items."""
        return onset_f1(list(y), self.predict(X))

    def save(self, path):
        check_is_fitted(self, "params_")
        M.save_checkpoint(path, self.config_, self.params_,
                          extra=self.optimizer_state_.to_arrays())

    @classmethod
    def from_checkpoint(cls, path, dtype="float32"):
        cfg, params, extra = M.load_checkpoint(path, dtype=np.dtype(dtype))
        est = cls(variant=None, enc_self=cfg.enc_self, dec_self=cfg.dec_self, cross=cfg.cross,
                  d_model=cfg.d_model, heads=cfg.heads, d_ff=cfg.d_ff,
                  enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers, window=cfg.window,
                  dropout=cfg.dropout, pooling=cfg.pooling, max_output_len=cfg.max_output_len,
                  dtype=dtype)
        est.config_ = cfg
        est.params_ = params
        est.optimizer_state_ = (T.AdamWState.from_arrays(extra, np.dtype(dtype))
                                if "adamw.step" in extra else T.AdamWState.zeros_like(params))
        est.loss_curve_ = []
        est.n_features_in_ = cfg.n_input
        return est
