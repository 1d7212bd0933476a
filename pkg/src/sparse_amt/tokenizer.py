"""MIDI-like event tokenization of note lists.

A note list is serialized as ``BOS``, then one ``Time`` token per occupied
20 ms bin followed by that bin's events, then ``EOS``. Within a bin onsets
come before offsets and each group is sorted by pitch. An onset is written
as ``Velocity, NoteOn`` and an offset as a bare ``NoteOff``.

Vocabulary layout (987 ids)::

    0 PAD | 1 BOS | 2 EOS | 3..602 Time | 603..730 NoteOn
    731..858 NoteOff | 859..986 Velocity
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InputError

N_TIME_BINS = 600
N_PITCHES = 128
N_VELOCITIES = 128
DEFAULT_HOP = 0.02

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
TIME_OFFSET = 3
NOTE_ON_OFFSET = TIME_OFFSET + N_TIME_BINS
NOTE_OFF_OFFSET = NOTE_ON_OFFSET + N_PITCHES
VELOCITY_OFFSET = NOTE_OFF_OFFSET + N_PITCHES
VOCAB_SIZE = VELOCITY_OFFSET + N_VELOCITIES


class TokenKind(enum.Enum):
    PAD = "PAD"
    BOS = "BOS"
    EOS = "EOS"
    TIME = "Time"
    NOTE_ON = "NoteOn"
    NOTE_OFF = "NoteOff"
    VELOCITY = "Velocity"


_SPECIALS = {TokenKind.PAD: PAD_ID, TokenKind.BOS: BOS_ID, TokenKind.EOS: EOS_ID}
_BLOCKS = (
    (TokenKind.TIME, TIME_OFFSET, N_TIME_BINS),
    (TokenKind.NOTE_ON, NOTE_ON_OFFSET, N_PITCHES),
    (TokenKind.NOTE_OFF, NOTE_OFF_OFFSET, N_PITCHES),
    (TokenKind.VELOCITY, VELOCITY_OFFSET, N_VELOCITIES),
)


@dataclass(frozen=True, order=True)
class NoteEvent:
    """One performed note. Times are in seconds."""

    onset: float
    offset: float
    pitch: int
    velocity: int

    def __post_init__(self):
        if not (math.isfinite(self.onset) and math.isfinite(self.offset)):
            raise InputError(f"non-finite note times: {self}")
        if self.onset < 0:
            raise InputError(f"negative onset: {self.onset}")
        if not self.offset > self.onset:
            raise InputError(f"offset must be after onset: {self}")
        if not 0 <= self.pitch <= 127:
            raise InputError(f"pitch out of range: {self.pitch}")
        if not 0 <= self.velocity <= 127:
            raise InputError(f"velocity out of range: {self.velocity}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


class Token(NamedTuple):
    kind: TokenKind
    value: int | None = None

    def __repr__(self):
        if self.value is None:
            return self.kind.value
        return f"{self.kind.value}({self.value})"


BOS = Token(TokenKind.BOS)
EOS = Token(TokenKind.EOS)
PAD = Token(TokenKind.PAD)


def Time(v: int) -> Token:  # noqa: N802 - reads like the token it builds
    return Token(TokenKind.TIME, v)


def NoteOn(p: int) -> Token:  # noqa: N802
    return Token(TokenKind.NOTE_ON, p)


def NoteOff(p: int) -> Token:  # noqa: N802
    return Token(TokenKind.NOTE_OFF, p)


def Velocity(v: int) -> Token:  # noqa: N802
    return Token(TokenKind.VELOCITY, v)


# ---------------------------------------------------------------------------
# vocabulary


def encode_token(token: Token) -> int:
    """Map a token to its integer vocabulary id."""
    if token.kind in _SPECIALS:
        return _SPECIALS[token.kind]
    for kind, offset, size in _BLOCKS:
        if token.kind is kind:
            if token.value is None or not 0 <= token.value < size:
                raise InputError(f"value out of range for {kind.value}: {token.value}")
            return offset + int(token.value)
    raise InputError(f"unknown token {token!r}")


def decode_id(token_id: int) -> Token:
    """Map an integer vocabulary id back to its token."""
    kind = token_type_of(token_id)
    if kind in _SPECIALS:
        return Token(kind)
    for k, offset, _ in _BLOCKS:
        if k is kind:
            return Token(kind, int(token_id) - offset)
    raise AssertionError("unreachable")


def token_type_of(token_id: int) -> TokenKind:
    token_id = int(token_id)
    if not 0 <= token_id < VOCAB_SIZE:
        raise InputError(f"token id out of range: {token_id}")
    if token_id == PAD_ID:
        return TokenKind.PAD
    if token_id == BOS_ID:
        return TokenKind.BOS
    if token_id == EOS_ID:
        return TokenKind.EOS
    if token_id < NOTE_ON_OFFSET:
        return TokenKind.TIME
    if token_id < NOTE_OFF_OFFSET:
        return TokenKind.NOTE_ON
    if token_id < VELOCITY_OFFSET:
        return TokenKind.NOTE_OFF
    return TokenKind.VELOCITY


def encode(tokens: Iterable[Token]) -> list[int]:
    return [encode_token(t) for t in tokens]


def decode(ids: Iterable[int]) -> list[Token]:
    return [decode_id(i) for i in ids]


# Lookup tables used by the model to build hybrid cross-attention masks.
_ids = np.arange(VOCAB_SIZE)
IS_TIME_ID = (_ids >= TIME_OFFSET) & (_ids < NOTE_ON_OFFSET)
IS_LOCAL_ID = (_ids >= NOTE_ON_OFFSET)  # NoteOn, NoteOff, Velocity
del _ids


# ---------------------------------------------------------------------------
# serialization


def quantize_time(t: float, hop: float = DEFAULT_HOP) -> int:
    """Round ``t / hop`` half away from zero, clamped to the 600-bin grid."""
    if hop <= 0:
        raise InputError(f"hop must be positive, got {hop}")
    if not t >= 0:
        raise InputError(f"time must be non-negative, got {t}")
    b = math.floor(t / hop + 0.5)
    return min(b, N_TIME_BINS - 1)


def bin_time(b: int, hop: float = DEFAULT_HOP) -> float:
    """Start time of bin ``b``, rounded so it prints as written (``7 * 0.02 -> 0.14``)."""
    return round(b * hop, 9)


def tokenize(notes: Sequence[NoteEvent], hop: float = DEFAULT_HOP) -> list[Token]:
    # (bin, group, pitch, velocity); group 0 = onset, 1 = offset
    events = []
    for n in notes:
        events.append((quantize_time(n.onset, hop), 0, n.pitch, n.velocity))
        events.append((quantize_time(n.offset, hop), 1, n.pitch, 0))
    events.sort()

    out = [BOS]
    current = None
    for b, group, pitch, vel in events:
        if b != current:
            out.append(Time(b))
            current = b
        if group == 0:
            out.append(Velocity(vel))
            out.append(NoteOn(pitch))
        else:
            out.append(NoteOff(pitch))
    out.append(EOS)
    return out


def detokenize(tokens: Sequence[Token | int], hop: float = DEFAULT_HOP,
               return_warnings: bool = False):
    """Rebuild notes from a token sequence.

    Malformed input never raises; each recoverable problem (stray ``NoteOff``,
    ``NoteOn`` without a preceding ``Velocity`` or ``Time``, missing ``BOS``)
    increments a warning tally. Notes still open at the end are closed one
    bin after the last ``Time`` token. Same-pitch notes close first-in
    first-out.

    Returns the note list sorted by (onset, pitch), and with
    ``return_warnings=True`` a ``(notes, n_warnings)`` pair.
    """
    toks = [decode_id(t) if not isinstance(t, Token) else t for t in tokens]
    warnings = 0
    if not toks or toks[0].kind is not TokenKind.BOS:
        warnings += 1

    notes: list[NoteEvent] = []
    open_notes: dict[int, list[tuple[int, int]]] = {}
    current = None
    last_time = 0
    velocity = None

    def close(pitch, on_bin, vel, off_bin):
        if off_bin <= on_bin:
            off_bin = on_bin + 1
        notes.append(NoteEvent(bin_time(on_bin, hop), bin_time(off_bin, hop), pitch, vel))

    for tok in toks:
        kind = tok.kind
        if kind is TokenKind.EOS:
            break
        if kind in (TokenKind.BOS, TokenKind.PAD):
            continue
        if kind is TokenKind.TIME:
            if current is not None and tok.value < current:
                warnings += 1
            current = tok.value
            last_time = max(last_time, current)
        elif kind is TokenKind.VELOCITY:
            velocity = tok.value
        elif kind is TokenKind.NOTE_ON:
            if current is None or velocity is None:
                warnings += 1
            on_bin = 0 if current is None else current
            vel = 64 if velocity is None else velocity
            open_notes.setdefault(tok.value, []).append((on_bin, vel))
        elif kind is TokenKind.NOTE_OFF:
            stack = open_notes.get(tok.value)
            if not stack:
                warnings += 1
                continue
            on_bin, vel = stack.pop(0)
            close(tok.value, on_bin, vel, 0 if current is None else current)

    for pitch, stack in open_notes.items():
        for on_bin, vel in stack:
            close(pitch, on_bin, vel, last_time + 1)

    notes.sort(key=lambda n: (n.onset, n.pitch, n.offset))
    if return_warnings:
        return notes, warnings
    return notes


class MidiLikeTokenizer(TransformerMixin, BaseEstimator):
    """Stateless transformer from note lists to token-id sequences.

    ``transform`` maps a list of note lists to a list of id lists;
    ``inverse_transform`` goes back.
    """

    def __init__(self, hop=DEFAULT_HOP):
        self.hop = hop

    def fit(self, X=None, y=None):
        if not self.hop > 0:
            raise InputError(f"hop must be positive, got {self.hop}")
        self.vocab_size_ = VOCAB_SIZE
        return self

    def transform(self, X):
        return [encode(tokenize(notes, self.hop)) for notes in X]

    def inverse_transform(self, X):
        return [detokenize(ids, self.hop) for ids in X]

    def __sklearn_is_fitted__(self):
        return True


# ---------------------------------------------------------------------------
# text formats


def _fmt_seconds(x: float) -> str:
    return repr(float(x))


def format_notes(notes: Iterable[NoteEvent]) -> str:
    return "".join(
        f"{_fmt_seconds(n.onset)}\t{_fmt_seconds(n.offset)}\t{n.pitch}\t{n.velocity}\n"
        for n in notes
    )


def parse_notes(text: str) -> list[NoteEvent]:
    notes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise InputError(f"line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
        try:
            onset, offset = float(fields[0]), float(fields[1])
            pitch, vel = int(fields[2]), int(fields[3])
        except ValueError as e:
            raise InputError(f"line {lineno}: {e}") from None
        notes.append(NoteEvent(onset, offset, pitch, vel))
    return notes


def read_notes(path) -> list[NoteEvent]:
    return parse_notes(Path(path).read_text(encoding="utf-8"))


def write_notes(path, notes: Iterable[NoteEvent]) -> None:
    Path(path).write_text(format_notes(notes), encoding="utf-8")


def parse_token_ids(text: str) -> list[int]:
    try:
        ids = [int(x) for x in text.split()]
    except ValueError as e:
        raise InputError(f"bad token id: {e}") from None
    for i in ids:
        token_type_of(i)
    return ids


def format_token_ids(ids: Iterable[int]) -> str:
    return " ".join(str(int(i)) for i in ids) + "\n"
