"""Octuple-style per-note tokens.

Each note becomes five integers: pitch, velocity, duration, position, bar.
At 384 ticks per beat and four beats per bar a bar spans 1536 ticks, so
``onset = bar * 1536 + position``.

Vocabulary sizes: pitch 89, velocity 66, duration 4609, position 1537,
bar 518.  Velocity uses 64 bins of width two plus two reserved values;
position 1536 is reserved for padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .midi_io import MAX_PITCH, MIN_PITCH, TOKEN_RESOLUTION, MidiDocument, NoteEvent

BEATS_PER_BAR = 4
TICKS_PER_BAR = TOKEN_RESOLUTION * BEATS_PER_BAR  # 1536

PITCH_VOCAB = 89
VELOCITY_VOCAB = 66
DURATION_VOCAB = 4609
POSITION_VOCAB = 1537
BAR_VOCAB = 518
VOCAB_SIZES = (PITCH_VOCAB, VELOCITY_VOCAB, DURATION_VOCAB, POSITION_VOCAB, BAR_VOCAB)

MAX_VELOCITY_TOK = 63
VELOCITY_PAD = 64
MAX_DURATION = DURATION_VOCAB - 1  # 4608 ticks, three bars
MAX_BAR = BAR_VOCAB - 1
POSITION_PAD = POSITION_VOCAB - 1


class TokenError(ValueError):
    pass


@dataclass(frozen=True)
class OctupleToken:
    pitch_tok: int
    velocity_tok: int
    duration_tok: int
    position_tok: int
    bar_tok: int

    def __post_init__(self):
        for value, size, name in zip(self.as_tuple(), VOCAB_SIZES, _FIELD_NAMES):
            if not 0 <= value < size:
                raise TokenError(f"{name} {value} outside vocabulary 0..{size - 1}")

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.pitch_tok, self.velocity_tok, self.duration_tok, self.position_tok, self.bar_tok)

    @property
    def onset(self) -> int:
        return onset_time(self.bar_tok, self.position_tok)

    @property
    def is_pad(self) -> bool:
        return self.position_tok == POSITION_PAD


_FIELD_NAMES = ("pitch_tok", "velocity_tok", "duration_tok", "position_tok", "bar_tok")

PAD_TOKEN = OctupleToken(PITCH_VOCAB - 1, VELOCITY_PAD, MAX_DURATION, POSITION_PAD, MAX_BAR)


class TokenSequence(Sequence[OctupleToken]):
    """An ordered list of note tokens with non-decreasing onsets."""

    def __init__(self, tokens: Iterable[OctupleToken] = ()):
        self.tokens = list(tokens)
        onsets = [t.onset for t in self.tokens]
        for i in range(1, len(onsets)):
            if onsets[i] < onsets[i - 1]:
                raise TokenError(f"onsets decrease at note {i}: {onsets[i - 1]} -> {onsets[i]}")

    def __getitem__(self, i):
        if isinstance(i, slice):
            return TokenSequence(self.tokens[i])
        return self.tokens[i]

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, TokenSequence) and self.tokens == other.tokens

    def __repr__(self):
        return f"TokenSequence({len(self)} notes)"

    @property
    def length(self) -> int:
        return len(self.tokens)

    def to_array(self) -> np.ndarray:
        """(n, 5) int64 array in field order pitch, velocity, duration, position, bar."""
        return np.array([t.as_tuple() for t in self.tokens], dtype=np.int64).reshape(-1, 5)

    @classmethod
    def from_array(cls, arr) -> "TokenSequence":
        return cls(OctupleToken(*map(int, row)) for row in np.asarray(arr).reshape(-1, 5))

    def onsets(self) -> np.ndarray:
        arr = self.to_array()
        return arr[:, 4] * TICKS_PER_BAR + arr[:, 3]


def onset_time(bar_tok: int, position_tok: int) -> int:
    return bar_tok * TICKS_PER_BAR + position_tok


def token_for_note(note: NoteEvent) -> OctupleToken:
    if not MIN_PITCH <= note.pitch <= MIN_PITCH + PITCH_VOCAB - 1:
        raise TokenError(f"pitch {note.pitch} outside piano range {MIN_PITCH}..{MAX_PITCH}")
    bar, position = divmod(note.onset, TICKS_PER_BAR)
    if bar > MAX_BAR:
        # past the last bar the onset saturates so order is kept
        bar, position = MAX_BAR, TICKS_PER_BAR - 1
    return OctupleToken(
        pitch_tok=note.pitch - MIN_PITCH,
        velocity_tok=note.velocity // 2,
        duration_tok=min(note.offset - note.onset, MAX_DURATION),
        position_tok=position,
        bar_tok=bar,
    )


def tokenize(doc: MidiDocument) -> TokenSequence:
    if doc.resolution != TOKEN_RESOLUTION:
        raise TokenError(f"resolution must be {TOKEN_RESOLUTION}, got {doc.resolution}; rescale first")
    notes = sorted(doc.notes, key=lambda n: (n.onset, n.pitch))
    return TokenSequence(token_for_note(n) for n in notes)


def detokenize(seq: Iterable[OctupleToken]) -> MidiDocument:
    notes = []
    for t in seq:
        if t.is_pad:
            continue
        onset = onset_time(t.bar_tok, t.position_tok)
        notes.append(NoteEvent(
            pitch=t.pitch_tok + MIN_PITCH,
            onset=onset,
            offset=onset + max(t.duration_tok, 1),
            velocity=min(max(t.velocity_tok * 2 + 1, 1), 127),
        ))
    return MidiDocument(TOKEN_RESOLUTION, notes)


def dump_tokens(seq: Iterable[OctupleToken]) -> str:
    """One note per line: pitch velocity duration position bar."""
    return "".join(" ".join(map(str, t.as_tuple())) + "\n" for t in seq)


def parse_tokens(text: str) -> TokenSequence:
    tokens = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 5:
            raise TokenError(f"line {lineno}: expected 5 integers, got {len(fields)}")
        tokens.append(OctupleToken(*map(int, fields)))
    return TokenSequence(tokens)
