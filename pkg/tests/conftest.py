import numpy as np
import pytest
from hypothesis import strategies as st

from pianoexpr.midi_io import MidiDocument, NoteEvent, PedalEvent, TempoEvent


def random_document(rng: np.random.Generator, n_notes: int = 20, resolution: int = 384,
                    max_duration: int = 4608, tempo_changes: int = 2, pedals: int = 2,
                    pitch_range=(21, 109)) -> MidiDocument:
    """Random valid document; same-pitch notes never overlap."""
    notes = []
    busy_until: dict[int, int] = {}
    t = 0
    while len(notes) < n_notes:
        t += int(rng.integers(0, 400))
        pitch = int(rng.integers(pitch_range[0], pitch_range[1] + 1))
        if busy_until.get(pitch, -1) > t:
            continue
        dur = int(rng.integers(1, max_duration + 1))
        notes.append(NoteEvent(pitch, t, t + dur, int(rng.integers(1, 128))))
        busy_until[pitch] = t + dur
    tempos = [TempoEvent(0, int(rng.integers(200_000, 1_500_000)))]
    for _ in range(tempo_changes):
        tempos.append(TempoEvent(int(rng.integers(1, t + 2)), int(rng.integers(200_000, 1_500_000))))
    by_tick = {tp.tick: tp for tp in tempos}
    peds = [PedalEvent(int(rng.integers(0, t + 1)), 0, int(rng.choice([0, 127]))) for _ in range(pedals)]
    return MidiDocument(resolution, notes, list(by_tick.values()), peds)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@st.composite
def documents(draw, max_notes=30, max_duration=4608):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(1, max_notes))
    return random_document(np.random.default_rng(seed), n, max_duration=max_duration)
