"""Score/performance pair preparation and the inverse mapping from predictions.

The model sees the score side of an aligned pair (pitch, velocity, duration,
bar, position, inter-onset interval) and predicts three performance values
per note: velocity token, duration deviation (performance duration minus
score duration) and inter-onset interval.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .midi_io import MidiDocument, NoteEvent, TempoEvent, PedalEvent, round_half_away
from .tokenizer import (
    MAX_BAR,
    MAX_DURATION,
    MAX_VELOCITY_TOK,
    TICKS_PER_BAR,
    OctupleToken,
    TokenSequence,
    tokenize,
)

WINDOW_SIZE = 1000
N_AUGMENT = 10
AUGMENT_RATIOS = tuple(float(r) for r in np.linspace(0.75, 1.25, N_AUGMENT))

# Column order of ModelIO.inputs and ModelIO.targets.
INPUT_FEATURES = ("pitch", "velocity", "duration", "bar", "position", "ioi")
TARGET_FEATURES = ("velocity", "dd", "ioi")

PIANISTS = (
    "Alfred Brendel",
    "Claudio Arrau",
    "Daniel Barenboim",
    "Friedrich Gulda",
    "Sviatoslav Richter",
    "Wilhelm Kempff",
)


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class PianistId:
    index: int
    name: str = ""

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"pianist index must be non-negative, got {self.index}")


@dataclass
class AlignedPair:
    score: TokenSequence
    performance: TokenSequence
    pianist: PianistId

    def __post_init__(self):
        _check_aligned(self.performance, self.score)

    def __len__(self):
        return len(self.score)


@dataclass
class ModelIO:
    """One fixed-length window.

    inputs: (window, 6) int64 score features, see INPUT_FEATURES.
    targets: (window, 3) int64 performance features, see TARGET_FEATURES.
    mask: (window,) int8, 0 at padded positions.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        w = len(self.mask)
        if self.inputs.shape != (w, len(INPUT_FEATURES)) or self.targets.shape != (w, len(TARGET_FEATURES)):
            raise ValueError(
                f"inconsistent ModelIO shapes: inputs {self.inputs.shape}, "
                f"targets {self.targets.shape}, mask {self.mask.shape}")

    @property
    def n_notes(self) -> int:
        return int(self.mask.sum())


# ---------------------------------------------------------------------------
# Expressive timing features
# ---------------------------------------------------------------------------

def compute_ioi(seq: TokenSequence) -> np.ndarray:
    """Onset gap to the next note; the last note gets 0."""
    onsets = seq.onsets()
    ioi = np.zeros(len(onsets), dtype=np.int64)
    ioi[:-1] = np.diff(onsets)
    return ioi


def compute_dd(performance: TokenSequence, score: TokenSequence) -> np.ndarray:
    if len(performance) != len(score):
        raise AlignmentError(f"length mismatch: performance {len(performance)}, score {len(score)}")
    return performance.to_array()[:, 2] - score.to_array()[:, 2]


# ---------------------------------------------------------------------------
# Time scaling
# ---------------------------------------------------------------------------

def _scale_notes(notes: Sequence[NoteEvent], ratio) -> list[NoteEvent]:
    """Scale onsets and durations by ``ratio``, keeping the note order.

    Notes must come sorted by (onset, pitch).  Rounding can merge two
    distinct onsets; when that would put a lower pitch after a higher one the
    later note is pushed one tick forward, so re-sorting the result by
    (onset, pitch) reproduces the input order and note-level alignment with
    another document scaled the same way survives.
    """
    ratio = Fraction(ratio)
    out: list[NoteEvent] = []
    prev_src = prev_new = None
    for n in notes:
        onset = round_half_away(n.onset * ratio)
        if out:
            onset = max(onset, prev_new.onset)
            if onset == prev_new.onset and n.onset != prev_src.onset and n.pitch < prev_src.pitch:
                onset += 1
        duration = max(1, round_half_away((n.offset - n.onset) * ratio))
        new = NoteEvent(n.pitch, onset, onset + duration, n.velocity)
        out.append(new)
        prev_src, prev_new = n, new
    return out


def scale_document(doc: MidiDocument, ratio) -> MidiDocument:
    ratio = Fraction(ratio)
    tempos = {}
    for t in doc.tempos:
        tick = round_half_away(t.tick * ratio)
        tempos[tick] = TempoEvent(tick, t.microseconds_per_beat)
    pedals = [PedalEvent(round_half_away(p.tick * ratio), p.channel, p.value) for p in doc.pedals]
    return MidiDocument(doc.resolution, _scale_notes(doc.notes, ratio), list(tempos.values()), pedals)


def scale_score_to_performance(score: MidiDocument, performance: MidiDocument) -> MidiDocument:
    """Stretch the score so its last offset matches the performance's."""
    if not score.notes or score.end_tick <= 0:
        raise ValueError("cannot scale an empty score")
    if not performance.notes:
        raise ValueError("cannot scale to an empty performance")
    return scale_document(score, Fraction(performance.end_tick, score.end_tick))


def augment(score: MidiDocument, performance: MidiDocument) -> list[tuple[MidiDocument, MidiDocument]]:
    """Tempo augmentation: both documents scaled by each of the ten ratios."""
    return [(scale_document(score, r), scale_document(performance, r)) for r in AUGMENT_RATIOS]


# ---------------------------------------------------------------------------
# Alignment and windowing
# ---------------------------------------------------------------------------

def _check_aligned(performance: TokenSequence, score: TokenSequence):
    if len(performance) != len(score):
        raise AlignmentError(f"length mismatch: performance has {len(performance)} notes, score has {len(score)}")
    p = performance.to_array()[:, 0]
    s = score.to_array()[:, 0]
    bad = np.flatnonzero(p != s)
    if bad.size:
        i = int(bad[0])
        raise AlignmentError(f"pitch mismatch at index {i}: performance {p[i]}, score {s[i]}")


def align(performance: TokenSequence, score: TokenSequence, pianist: PianistId) -> AlignedPair:
    return AlignedPair(score=score, performance=performance, pianist=pianist)


def _rebase(seq: TokenSequence) -> TokenSequence:
    if not len(seq):
        return seq
    b0 = seq[0].bar_tok
    return TokenSequence(
        OctupleToken(t.pitch_tok, t.velocity_tok, t.duration_tok, t.position_tok, t.bar_tok - b0)
        for t in seq)


def build_model_io(pair: AlignedPair, size: int = WINDOW_SIZE) -> ModelIO:
    """Assemble padded inputs/targets/mask for a pair of at most ``size`` notes."""
    n = len(pair)
    if n > size:
        raise ValueError(f"pair has {n} notes, more than the window size {size}; window it first")
    s = pair.score.to_array()
    inputs = np.zeros((size, len(INPUT_FEATURES)), dtype=np.int64)
    targets = np.zeros((size, len(TARGET_FEATURES)), dtype=np.int64)
    mask = np.zeros(size, dtype=np.int8)
    if n:
        inputs[:n, 0] = s[:, 0]
        inputs[:n, 1] = s[:, 1]
        inputs[:n, 2] = s[:, 2]
        inputs[:n, 3] = s[:, 4]
        inputs[:n, 4] = s[:, 3]
        inputs[:n, 5] = compute_ioi(pair.score)
        targets[:n, 0] = pair.performance.to_array()[:, 1]
        targets[:n, 1] = compute_dd(pair.performance, pair.score)
        targets[:n, 2] = compute_ioi(pair.performance)
        mask[:n] = 1
    return ModelIO(inputs, targets, mask)


def window(pair: AlignedPair, size: int = WINDOW_SIZE) -> list[ModelIO]:
    """Cut into consecutive non-overlapping windows; the last one is padded.

    Bars are rebased so every window starts at bar 0, and IOI is computed
    inside each window.
    """
    out = []
    for start in range(0, len(pair), size):
        chunk = AlignedPair(
            _rebase(pair.score[start:start + size]),
            _rebase(pair.performance[start:start + size]),
            pair.pianist)
        out.append(build_model_io(chunk, size))
    return out


def chunk_documents(score: MidiDocument, performance: MidiDocument, size: int = WINDOW_SIZE):
    """Split an aligned document pair into window-sized, bar-rebased chunks.

    Same cut as :func:`window`, but done before tokenization so long pieces
    never hit the bar vocabulary ceiling.
    """
    out = []
    n = len(score.notes)
    for start in range(0, n, size):
        parts = []
        for doc in (score, performance):
            notes = doc.notes[start:start + size]
            shift = (notes[0].onset // TICKS_PER_BAR) * TICKS_PER_BAR
            parts.append(MidiDocument(doc.resolution, [
                NoteEvent(x.pitch, x.onset - shift, x.offset - shift, x.velocity) for x in notes]))
        out.append(tuple(parts))
    return out


def pair_windows(score: MidiDocument, performance: MidiDocument, pianist: PianistId,
                 size: int = WINDOW_SIZE) -> list[ModelIO]:
    """Tokenize, align and window one (already scaled) document pair."""
    out = []
    for s, p in chunk_documents(score, performance, size):
        out.append(build_model_io(align(tokenize(p), tokenize(s), pianist), size))
    return out


# ---------------------------------------------------------------------------
# Inverse mapping
# ---------------------------------------------------------------------------

def round_half_away_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def reconstruct_onsets(first_onset: int, pred_ioi) -> np.ndarray:
    """Absolute onsets from predicted IOIs; negative gaps become 0."""
    gaps = np.maximum(round_half_away_array(pred_ioi), 0)
    onsets = np.empty(len(gaps), dtype=np.int64)
    if len(gaps):
        onsets[0] = first_onset
        onsets[1:] = first_onset + np.cumsum(gaps[:-1])
    return onsets


def reconstruct_performance(score: TokenSequence, pred_velocity, pred_dd, pred_ioi,
                            first_onset: int | None = None) -> TokenSequence:
    """Turn per-note predictions back into performance tokens.

    ``first_onset`` anchors absolute time; it defaults to the score's first
    onset since IOIs only fix onsets up to a global shift.
    """
    n = len(score)
    for name, v in (("velocity", pred_velocity), ("dd", pred_dd), ("ioi", pred_ioi)):
        if len(v) != n:
            raise ValueError(f"predicted {name} has length {len(v)}, score has {n} notes")
    if n == 0:
        return TokenSequence()
    s = score.to_array()
    if first_onset is None:
        first_onset = int(s[0, 4] * TICKS_PER_BAR + s[0, 3])
    onsets = reconstruct_onsets(first_onset, pred_ioi)
    durations = np.clip(round_half_away_array(s[:, 2] + np.asarray(pred_dd, dtype=np.float64)), 0, MAX_DURATION)
    velocities = np.clip(round_half_away_array(pred_velocity), 0, MAX_VELOCITY_TOK)
    tokens = []
    for i in range(n):
        bar, pos = divmod(int(onsets[i]), TICKS_PER_BAR)
        if bar > MAX_BAR:
            bar, pos = MAX_BAR, TICKS_PER_BAR - 1
        tokens.append(OctupleToken(int(s[i, 0]), int(velocities[i]), int(durations[i]), pos, bar))
    return TokenSequence(tokens)
