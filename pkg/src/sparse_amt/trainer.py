"""Toy-scale training: AdamW, a synthetic transcription task, and the loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .exceptions import ContractViolation, InputError
from .tokenizer import DEFAULT_HOP, NoteEvent, bin_time, encode, tokenize

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)

    def to_arrays(self) -> dict:
        out = {f"adamw.m.{k}": v for k, v in self.m.items()}
        out.update({f"adamw.v.{k}": v for k, v in self.v.items()})
        out["adamw.step"] = np.array([self.step], dtype=np.float32)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, dtype=np.float32):
        m = {k[len("adamw.m."):]: v.astype(dtype) for k, v in arrays.items() if k.startswith("adamw.m.")}
        v = {k[len("adamw.v."):]: a.astype(dtype) for k, a in arrays.items() if k.startswith("adamw.v.")}
        return cls(m, v, int(arrays["adamw.step"][0]))


def adamw_step(params, grads, state: AdamWState, lr, weight_decay=0.01, beta1=0.9,
               beta2=0.999, eps=1e-8):
    """One in-place AdamW update; returns ``(params, state)``.

    The decay shrinks weights directly (``p -= lr * wd * p``) and never
    enters the moment estimates.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ContractViolation(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * update
    return params, state


def clip_grad_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticTask:
    """Piano-roll-like features paired with the tokens of the same notes.

    Pitch ``pitch_lo + c`` drives feature channel ``c`` with ``0.5 + 0.5 *
    velocity / 127`` while sounding, and channel ``n_pitches + c`` with 1.0 on
    its onset frame. Gaussian noise is added everywhere, then the whole
    matrix is scaled by ``gain``. Frame ``t`` sits on time bin ``t``.
    """

    n_frames: int = 50
    n_input: int = 24
    min_notes: int = 1
    max_notes: int = 3
    pitch_lo: int = 60
    n_pitches: int = 12
    min_duration: int = 3
    max_duration: int = 15
    velocity_lo: int = 80
    velocity_hi: int = 100
    noise: float = 0.05
    gain: float = 5.0
    hop: float = DEFAULT_HOP

    def __post_init__(self):
        if self.n_input < 2 * self.n_pitches:
            raise InputError("n_input must hold an activity and an onset channel per pitch")
        if not 0 <= self.min_notes <= self.max_notes:
            raise InputError("need 0 <= min_notes <= max_notes")
        if not 1 <= self.min_duration <= self.max_duration:
            raise InputError("need 1 <= min_duration <= max_duration")
        if not 2 <= self.n_frames <= 600:
            raise InputError("n_frames must be in [2, 600]")
        if self.pitch_lo + self.n_pitches > 128:
            raise InputError("pitch range exceeds MIDI range")
        if not self.gain > 0 or self.noise < 0:
            raise InputError("need gain > 0 and noise >= 0")


def sample_notes(task: SyntheticTask, rng) -> list[NoteEvent]:
    n = int(rng.integers(task.min_notes, task.max_notes + 1))
    busy: dict[int, list[tuple[int, int]]] = {}
    notes = []
    for _ in range(50 * max(n, 1)):
        if len(notes) == n:
            break
        pitch = task.pitch_lo + int(rng.integers(task.n_pitches))
        on = int(rng.integers(0, task.n_frames - 1))
        off = min(on + int(rng.integers(task.min_duration, task.max_duration + 1)), task.n_frames - 1)
        if off <= on:
            continue
        # same-pitch notes may not overlap (or touch) each other
        if any(on <= b and a <= off for a, b in busy.get(pitch, [])):
            continue
        busy.setdefault(pitch, []).append((on, off))
        vel = int(rng.integers(task.velocity_lo, task.velocity_hi + 1))
        notes.append(NoteEvent(bin_time(on, task.hop), bin_time(off, task.hop), pitch, vel))
    notes.sort(key=lambda x: (x.onset, x.pitch))
    return notes


def render_features(notes, task: SyntheticTask, rng) -> np.ndarray:
    x = np.zeros((task.n_frames, task.n_input))
    for n in notes:
        c = n.pitch - task.pitch_lo
        on = int(round(n.onset / task.hop))
        off = int(round(n.offset / task.hop))
        x[on:off, c] = 0.5 + 0.5 * n.velocity / 127.0
        x[on, task.n_pitches + c] = 1.0
    if task.noise:
        x += rng.normal(0.0, task.noise, x.shape)
    return task.gain * x


def generate_synthetic_batch(task: SyntheticTask, batch_size: int, seed) -> list:
    """``batch_size`` items of ``(features, token_ids, notes)``; reproducible per seed."""
    rng = np.random.default_rng(seed)
    batch = []
    for _ in range(batch_size):
        notes = sample_notes(task, rng)
        feats = render_features(notes, task, rng)
        batch.append((feats, encode(tokenize(notes, task.hop)), notes))
    return batch


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not self.lr >= 0:
            raise InputError("learning rate must be non-negative")
        if self.steps < 0:
            raise InputError("steps must be >= 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")


_TRAIN_KEYS = {"lr", "weight_decay", "beta1", "beta2", "eps", "clip_norm", "batch_size",
               "steps", "seed", "log_every"}


def load_train_config(text: str) -> TrainConfig:
    """Parse ``key=value`` lines; ``model.*`` and ``task.*`` keys configure the nested parts."""
    kv = M.parse_key_values(text)
    model_kw, task_kw, train_kw = {}, {}, {}
    task_types = {f.name: f.type for f in dataclasses.fields(SyntheticTask)}
    for k, v in kv.items():
        try:
            if k.startswith("model."):
                model_kw[k[6:]] = v
            elif k.startswith("task."):
                name = k[5:]
                if name not in task_types:
                    raise InputError(f"unknown task key {name!r}")
                task_kw[name] = float(v) if task_types[name] == "float" else int(v)
            elif k in _TRAIN_KEYS:
                train_kw[k] = int(v) if k in ("batch_size", "steps", "seed", "log_every") \
                    else float(v)
            else:
                raise InputError(f"unknown config key {k!r}")
        except InputError:
            raise
        except ValueError:
            raise InputError(f"bad value for {k}: {v!r}") from None
    task = SyntheticTask(**task_kw)
    model_kw.setdefault("n_input", task.n_input)
    return TrainConfig(model=M.ModelConfig.from_dict(model_kw), task=task, **train_kw)


def train(cfg: TrainConfig, *, params=None, state=None, checkpoint=None, loss_log=None,
          dtype=np.float32, data=None, callback=None):
    """Run ``cfg.steps`` AdamW steps on fresh synthetic batches.

    ``data`` overrides the batch source: a callable ``step -> batch`` of
    ``(features, token_ids, ...)`` tuples. Returns ``(params, state, losses)``.
    """
    mcfg = cfg.model
    if params is None:
        params = M.init_params(mcfg, seed=cfg.seed, dtype=dtype)
    if state is None:
        state = AdamWState.zeros_like(params)
    if data is None:
        def data(step):
            return generate_synthetic_batch(cfg.task, cfg.batch_size, (cfg.seed, step))
    drop_rng = np.random.default_rng((cfg.seed, 1)) if mcfg.dropout > 0 else None

    losses = []
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        batch = [(b[0], b[1]) for b in data(step)]
        loss, grads = M.forward_backward(batch, mcfg, params, rng=drop_rng)
        if not np.isfinite(loss):
            raise ContractViolation(f"non-finite loss at step {step}")
        clip_grad_norm(grads, cfg.clip_norm)
        adamw_step(params, grads, state, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
        losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d loss %.4f (%.1fs)", step, loss, time.perf_counter() - t0)
        if callback is not None:
            callback(step, loss, params)

    if checkpoint is not None:
        M.save_checkpoint(checkpoint, mcfg, params, extra=state.to_arrays())
    if loss_log is not None:
        write_loss_log(loss_log, losses)
    return params, state, losses


def write_loss_log(path, losses) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, repr(float(loss))])
