"""Inference cost benchmark across model variants, lengths and window sizes.

Each cell runs an eval-mode encode of ``N`` random frames followed by a
KV-cached decode of a fixed token script. The MAC counts from the attention
kernels are the primary, hardware-independent signal; wall time (median
over repetitions) and tracemalloc peak are reported alongside.
"""

from __future__ import annotations

import csv
import dataclasses
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .attention import count_macs
from .exceptions import InputError
from .tokenizer import NoteEvent, bin_time, encode, tokenize

CSV_HEADER = ["variant", "N", "w", "time_s", "mem_bytes", "macs"]

TOY_MODEL = M.ModelConfig(n_input=64, d_model=32, heads=2, d_ff=64, enc_layers=2,
                          dec_layers=2, window=16, dropout=0.0, pooling=(1, 1),
                          max_output_len=1024)


@dataclass(frozen=True)
class BenchScenario:
    variants: tuple = ("baseline", "V5")
    lengths: tuple = (256, 512)
    windows: tuple = (16,)
    reps: int = 3
    warmup: int = 1
    seed: int = 0
    tokens: int = 32
    mem_budget: int = 2 ** 31
    model: M.ModelConfig = TOY_MODEL

    def __post_init__(self):
        if self.reps < 3:
            raise InputError("reps must be >= 3")
        if any(n < 1 for n in self.lengths) or any(w < 1 for w in self.windows):
            raise InputError("lengths and windows must be positive")
        for v in self.variants:
            if v not in M.VARIANTS:
                raise InputError(f"unknown variant {v!r}")
        if self.tokens < 1:
            raise InputError("tokens must be >= 1")

    @property
    def cells(self):
        return [(v, n, w) for v in self.variants for n in self.lengths for w in self.windows]


def load_scenario(text: str) -> BenchScenario:
    kv = M.parse_key_values(text)
    kw, model_kw = {}, {}
    for k, v in kv.items():
        if k.startswith("model."):
            model_kw[k[6:]] = v
            continue
        try:
            if k == "variants":
                kw[k] = tuple(x.strip() for x in v.split(",") if x.strip())
            elif k in ("lengths", "windows"):
                kw[k] = tuple(int(x) for x in v.split(",") if x.strip())
            elif k in ("reps", "warmup", "seed", "tokens", "mem_budget"):
                kw[k] = int(v)
            else:
                raise InputError(f"unknown scenario key {k!r}")
        except InputError:
            raise
        except ValueError:
            raise InputError(f"bad value for {k}: {v!r}") from None
    if model_kw:
        base = dataclasses.asdict(TOY_MODEL)
        base.update(model_kw)
        kw["model"] = M.ModelConfig.from_dict(base)
    return BenchScenario(**kw)


@dataclass
class BenchRecord:
    variant: str
    N: int
    w: int
    time_s: float
    mem_bytes: int
    macs: int
    macs_by_tag: dict = field(default_factory=dict)
    failed: bool = False

    def csv_row(self):
        if self.failed:
            return [self.variant, self.N, self.w, "nan", "nan", "nan"]
        return [self.variant, self.N, self.w, f"{self.time_s:.6g}", self.mem_bytes, self.macs]


def token_script(n_frames: int, n_tokens: int, seed: int) -> list[int]:
    """A plausible decoder input: BOS then tokens of random notes spread over the clip."""
    rng = np.random.default_rng(seed)
    frames = min(n_frames, 600)
    notes = []
    while True:
        on = int(rng.integers(0, max(frames - 1, 1)))
        off = min(on + int(rng.integers(1, 20)), frames)
        if off <= on:
            off = on + 1
        notes.append(NoteEvent(bin_time(on), bin_time(off), int(rng.integers(21, 109)),
                               int(rng.integers(1, 128))))
        ids = encode(tokenize(notes))
        if len(ids) - 1 >= n_tokens:
            return ids[:n_tokens]


def _estimated_bytes(cfg: M.ModelConfig, n: int, tokens: int) -> int:
    # dominant transient: per-head logits of the widest attention
    itemsize = 8
    enc = n if cfg.enc_self == "full" else min(n, cfg.window + 1)
    return itemsize * cfg.heads * n * max(enc, tokens)


def run_cell(cfg: M.ModelConfig, params, features, script, *, measure_memory=True):
    """One inference pass; returns (seconds, peak bytes, MacCounter)."""
    if measure_memory:
        tracemalloc.start()
    t0 = time.perf_counter()
    with count_macs() as counter:
        Z = M.encode(features, cfg, params)
        dec = M.IncrementalDecoder(Z, cfg, params)
        for tok in script:
            dec.step(tok)
    elapsed = time.perf_counter() - t0
    peak = 0
    if measure_memory:
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    return elapsed, peak, counter


def run_bench(scenario: BenchScenario, out_csv=None, progress=None) -> list[BenchRecord]:
    records = []
    for variant, n, w in scenario.cells:
        cfg = M.variant_config(variant, scenario.model.replace(window=w))
        cfg = cfg.replace(max_output_len=max(cfg.max_output_len, scenario.tokens))
        if _estimated_bytes(cfg, n, scenario.tokens) > scenario.mem_budget:
            records.append(BenchRecord(variant, n, w, float("nan"), -1, -1, failed=True))
            continue
        params = M.init_params(cfg, seed=scenario.seed)
        rng = np.random.default_rng((scenario.seed, n))
        features = rng.standard_normal((n, cfg.n_input))
        script = token_script(n, scenario.tokens, scenario.seed)
        try:
            for _ in range(scenario.warmup):
                run_cell(cfg, params, features, script, measure_memory=False)
            times, peaks, counters = [], [], []
            for _ in range(scenario.reps):
                t, peak, c = run_cell(cfg, params, features, script)
                times.append(t)
                peaks.append(peak)
                counters.append(c)
        except MemoryError:
            records.append(BenchRecord(variant, n, w, float("nan"), -1, -1, failed=True))
            continue
        macs = counters[-1]
        records.append(BenchRecord(variant, n, w, statistics.median(times), int(max(peaks)),
                                   macs.total, dict(macs)))
        if progress:
            progress(records[-1])
    if out_csv is not None:
        write_csv(out_csv, records)
    return records


def write_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.csv_row())
