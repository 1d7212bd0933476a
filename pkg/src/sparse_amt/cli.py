"""Command-line entry point.

Exit codes: 0 success, 1 input error (including usage errors), 2 contract
violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import bench, metrics
from . import model as M
from . import trainer as T
from .exceptions import ContractViolation, InputError
from .frontend import FrontendConfig, mel_spectrogram, read_wav, resample, write_features
from .tokenizer import (
    BOS_ID, EOS_ID, detokenize, encode, format_notes, format_token_ids, parse_token_ids,
    read_notes, tokenize, write_notes,
)

log = logging.getLogger("sparse_amt")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_tokenize(args):
    ids = encode(tokenize(read_notes(args.notes), args.hop))
    _emit(format_token_ids(ids), args.output)


def cmd_detokenize(args):
    ids = parse_token_ids(Path(args.tokens).read_text(encoding="utf-8"))
    notes, warnings = detokenize(ids, args.hop, return_warnings=True)
    if warnings:
        log.warning("%d malformed token(s) skipped or repaired", warnings)
    _emit(format_notes(notes), args.output)


def _wav_features(path):
    cfg = FrontendConfig()
    audio = resample(read_wav(path), cfg.sample_rate)
    return mel_spectrogram(audio, cfg)


def cmd_features(args):
    frames = _wav_features(args.wav)
    write_features(args.output, frames)
    log.info("wrote %d x %d features to %s", *frames.shape, args.output)


def cmd_train_toy(args):
    cfg = T.load_train_config(Path(args.config).read_text(encoding="utf-8"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, _, losses = T.train(cfg, checkpoint=out / "model.ckpt", loss_log=out / "loss.csv")
    if losses:
        print(f"trained {cfg.steps} steps; loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")


def cmd_transcribe(args):
    cfg, params, _ = M.load_checkpoint(args.ckpt)
    frames = _wav_features(args.wav)
    if frames.shape[1] != cfg.n_input:
        raise InputError(f"checkpoint expects {cfg.n_input}-dim features, "
                         f"audio frontend gives {frames.shape[1]}")
    body = M.greedy_decode(frames, cfg, params, max_len=args.max_len)
    notes, warnings = detokenize([BOS_ID] + body + [EOS_ID], return_warnings=True)
    if warnings:
        log.warning("%d malformed token(s) in decoder output", warnings)
    write_notes(args.output, notes)
    print(f"{len(notes)} notes from {len(body)} tokens -> {args.output}")


def cmd_eval(args):
    results = metrics.evaluate_all(read_notes(args.ref), read_notes(args.est))
    sys.stdout.write(metrics.report_table(results))
    if args.csv:
        Path(args.csv).write_text(metrics.report_csv(results), encoding="utf-8")


def cmd_bench(args):
    scenario = bench.load_scenario(Path(args.scenario).read_text(encoding="utf-8"))
    records = bench.run_bench(scenario, out_csv=args.output)
    for r in records:
        status = "failed" if r.failed else f"{r.time_s:.4f}s {r.macs} MACs"
        print(f"{r.variant:>8} N={r.N:<6} w={r.w:<4} {status}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparse-amt", description="Sparse-attention piano transcription toolkit")
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("tokenize", help="notes file -> token ids")
    s.add_argument("notes")
    s.add_argument("--hop", type=float, default=0.02)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("detokenize", help="token ids -> notes file")
    s.add_argument("tokens")
    s.add_argument("--hop", type=float, default=0.02)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_detokenize)

    s = sub.add_parser("features", help="WAV -> binary log-mel dump")
    s.add_argument("wav")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train-toy", help="train on the synthetic task")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("transcribe", help="WAV -> notes with a checkpoint")
    s.add_argument("wav")
    s.add_argument("--ckpt", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--max-len", type=int, default=None)
    s.set_defaults(func=cmd_transcribe)

    s = sub.add_parser("eval", help="note-level P/R/F1")
    s.add_argument("--ref", required=True)
    s.add_argument("--est", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="attention cost benchmark")
    s.add_argument("--scenario", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, UnicodeDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ContractViolation as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
