"""Deterministic synthetic score/performance pairs for smoke tests and demos.

A "pianist" here is a fixed rule applied to a quantized score: a velocity
offset and a tempo factor, plus an articulation factor shared by everyone.
Pair alignment is exact by construction.  Tempo is absorbed when the score is
stretched to the performance length, as in the real data pipeline.
"""

from __future__ import annotations

import numpy as np

from .features import PIANISTS, ModelIO, PianistId, pair_windows, scale_score_to_performance
from .midi_io import MidiDocument, NoteEvent

# Raw MIDI velocity offsets, zero mean, so each sign is relative to the
# average pianist as well as to the score.
VELOCITY_OFFSETS = (-20, 16, -10, 8, -4, 10)
TEMPO_FACTORS = (1.10, 0.95, 1.05, 0.90, 1.15, 1.00)
ARTICULATION = 0.5
SCORE_VELOCITY = 64
STEPS = (384, 768, 1536)


def random_score(n_notes: int, seed: int, chord_prob: float = 0.1) -> MidiDocument:
    """A quantized score: grid onsets, chords, constant velocity."""
    rng = np.random.default_rng(seed)
    notes = []
    onset = 0
    while len(notes) < n_notes:
        step = int(rng.choice(STEPS))
        chord = 1 + int(rng.random() < chord_prob)
        pitches = rng.choice(np.arange(36, 96), size=chord, replace=False)
        for p in sorted(pitches.tolist()):
            if len(notes) == n_notes:
                break
            dur = int(rng.choice([step, step * 2]))
            notes.append(NoteEvent(int(p), onset, onset + max(dur, 1), SCORE_VELOCITY))
        onset += step
    return MidiDocument(384, notes)


def perform(score: MidiDocument, pianist: int) -> MidiDocument:
    """Render ``score`` with the fixed expressive rule of ``pianist``."""
    tempo = TEMPO_FACTORS[pianist]
    offset = VELOCITY_OFFSETS[pianist]
    notes = []
    for n in score.notes:
        on = int(round(n.onset * tempo))
        dur = max(1, int(round(n.duration * tempo * ARTICULATION)))
        # pitch-dependent accent keeps the velocity target non-constant
        vel = int(np.clip(n.velocity + offset + (n.pitch - 66) // 3, 1, 127))
        notes.append(NoteEvent(n.pitch, on, on + dur, vel))
    return MidiDocument(score.resolution, notes)


def pianist_names(count: int = 6) -> tuple[str, ...]:
    return PIANISTS[:count]


def synthetic_windows(n_scores: int, size: int, seed: int = 0,
                      pianists: int = 6) -> tuple[list[ModelIO], list[int]]:
    """Every pianist plays ``n_scores`` random scores of ``size`` notes.

    Returns model windows and their pianist indices, score-major.
    """
    wins, ids = [], []
    for k in range(n_scores):
        score = random_score(size, seed * 1000 + k)
        for p in range(pianists):
            perf = perform(score, p)
            scaled = scale_score_to_performance(score, perf)
            w = pair_windows(scaled, perf, PianistId(p, PIANISTS[p]), size)
            wins += w
            ids += [p] * len(w)
    return wins, ids
