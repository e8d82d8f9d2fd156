"""Standard MIDI File reading/writing and the note-level document model.

Only the parts of SMF that matter for note-level modeling are kept: notes,
the tempo map and sustain-pedal (CC64) events.  Everything else is skipped
on read.  Output is always a format-0 file with a fixed event order and no
running status, so writing is byte-for-byte deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction

DEFAULT_TEMPO = 500_000  # microseconds per beat (120 BPM)
TOKEN_RESOLUTION = 384
MIN_PITCH = 21
MAX_PITCH = 109


class MidiError(ValueError):
    """Malformed or unrepresentable MIDI data.

    ``offset`` is the byte position in the input where the problem was
    detected, or None when the error does not come from parsing.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: int
    offset: int
    velocity: int

    def __post_init__(self):
        if self.offset <= self.onset:
            raise ValueError(f"note must have positive duration: {self}")
        if self.onset < 0:
            raise ValueError(f"negative onset: {self}")

    @property
    def duration(self) -> int:
        return self.offset - self.onset


@dataclass(frozen=True, order=True)
class TempoEvent:
    tick: int
    microseconds_per_beat: int

    def __post_init__(self):
        if self.microseconds_per_beat <= 0:
            raise ValueError(f"tempo must be positive: {self}")


@dataclass(frozen=True, order=True)
class PedalEvent:
    """A sustain-pedal (CC64) message, kept verbatim and otherwise ignored."""

    tick: int
    channel: int
    value: int


def round_half_away(x) -> int:
    """Round to the nearest integer, ties away from zero."""
    x = Fraction(x)
    n = int(abs(x) + Fraction(1, 2))
    return n if x >= 0 else -n


@dataclass
class MidiDocument:
    resolution: int = TOKEN_RESOLUTION
    notes: list[NoteEvent] = field(default_factory=list)
    tempos: list[TempoEvent] = field(default_factory=list)
    pedals: list[PedalEvent] = field(default_factory=list)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        self.notes = sorted(self.notes, key=lambda n: (n.onset, n.pitch, n.offset, n.velocity))
        self.tempos = sorted(self.tempos, key=lambda t: t.tick)
        if not self.tempos or self.tempos[0].tick != 0:
            self.tempos.insert(0, TempoEvent(0, DEFAULT_TEMPO))
        self.pedals = sorted(self.pedals)

    @property
    def end_tick(self) -> int:
        return max((n.offset for n in self.notes), default=0)


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------

def _read_vlq(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiError("truncated variable-length quantity", pos)
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MidiError("variable-length quantity longer than 4 bytes", pos)


def _parse_track(data: bytes, start: int, end: int):
    """Yield (abs_tick, kind, payload, byte_offset) for the events we keep."""
    tick = 0
    pos = start
    status = None
    while pos < end:
        delta, pos = _read_vlq(data, pos, end)
        tick += delta
        ev_pos = pos
        if pos >= end:
            raise MidiError("event truncated", pos)
        b = data[pos]
        if b == 0xFF:
            if pos + 2 > end:
                raise MidiError("meta event truncated", pos)
            mtype = data[pos + 1]
            length, pos = _read_vlq(data, pos + 2, end)
            if pos + length > end:
                raise MidiError("meta event overruns track", ev_pos)
            body = data[pos:pos + length]
            pos += length
            if mtype == 0x51 and length == 3:
                yield tick, "tempo", int.from_bytes(body, "big"), ev_pos
            elif mtype == 0x2F:
                return
            continue
        if b in (0xF0, 0xF7):
            length, pos = _read_vlq(data, pos + 1, end)
            if pos + length > end:
                raise MidiError("sysex overruns track", ev_pos)
            pos += length
            continue
        if b & 0x80:
            status = b
            pos += 1
        elif status is None:
            raise MidiError("running status without a previous status byte", pos)
        kind = status & 0xF0
        nbytes = 1 if kind in (0xC0, 0xD0) else 2
        if pos + nbytes > end:
            raise MidiError("channel message truncated", ev_pos)
        d1 = data[pos]
        d2 = data[pos + 1] if nbytes == 2 else 0
        pos += nbytes
        channel = status & 0x0F
        if kind == 0x90 and d2 > 0:
            yield tick, "on", (channel, d1, d2), ev_pos
        elif kind == 0x80 or (kind == 0x90 and d2 == 0):
            yield tick, "off", (channel, d1), ev_pos
        elif kind == 0xB0 and d1 == 64:
            yield tick, "pedal", (channel, d2), ev_pos


def read_midi(data: bytes) -> MidiDocument:
    """Parse an SMF (format 0 or 1) into a MidiDocument.

    Tracks are merged.  A note-on for a pitch that is already sounding on
    the same channel closes the earlier note at the new onset.  Stray
    note-offs are ignored; a note still sounding at the end of its track is
    an error.
    """
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiError("malformed header chunk: missing MThd", 0)
    hlen = struct.unpack(">I", data[4:8])[0]
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiError(f"malformed header chunk: bad length {hlen}", 4)
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiError(f"malformed header chunk: unsupported format {fmt}", 8)
    if division & 0x8000:
        raise MidiError("malformed header chunk: SMPTE time division not supported", 12)
    if division == 0:
        raise MidiError("malformed header chunk: zero ticks per beat", 12)

    notes: list[NoteEvent] = []
    tempos: list[TempoEvent] = []
    pedals: list[PedalEvent] = []
    pos = 8 + hlen
    seen = 0
    while pos < len(data) and seen < ntracks:
        if pos + 8 > len(data):
            raise MidiError("track length mismatch: truncated chunk header", pos)
        cid = data[pos:pos + 4]
        clen = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        body = pos + 8
        if body + clen > len(data):
            raise MidiError(
                f"track length mismatch: chunk declares {clen} bytes, "
                f"{len(data) - body} available", pos + 4)
        if cid == b"MTrk":
            seen += 1
            sounding: dict[tuple[int, int], tuple[int, int, int]] = {}
            for tick, kind, payload, ev_pos in _parse_track(data, body, body + clen):
                if kind == "on":
                    channel, pitch, vel = payload
                    prev = sounding.pop((channel, pitch), None)
                    if prev is not None and tick > prev[0]:
                        notes.append(NoteEvent(pitch, prev[0], tick, prev[1]))
                    sounding[(channel, pitch)] = (tick, vel, ev_pos)
                elif kind == "off":
                    channel, pitch = payload
                    prev = sounding.pop(payload, None)
                    # zero-length notes are dropped
                    if prev is not None and tick > prev[0]:
                        notes.append(NoteEvent(pitch, prev[0], tick, prev[1]))
                elif kind == "tempo":
                    tempos.append(TempoEvent(tick, payload))
                else:
                    pedals.append(PedalEvent(tick, payload[0], payload[1]))
            if sounding:
                (_, pitch), (_, _, ev_pos) = min(sounding.items(), key=lambda kv: kv[1][2])
                raise MidiError(f"unpaired note-on for pitch {pitch}", ev_pos)
        pos = body + clen
    if seen < ntracks:
        raise MidiError(f"track length mismatch: header declares {ntracks} tracks, found {seen}", pos)

    # Later tempo events at the same tick win (format-1 merge).
    by_tick: dict[int, TempoEvent] = {}
    for t in tempos:
        by_tick[t.tick] = t
    return MidiDocument(division, notes, list(by_tick.values()), pedals)


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def _vlq(value: int) -> bytes:
    if value < 0 or value > 0x0FFFFFFF:
        raise MidiError(f"delta time {value} not representable")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _check_range(name: str, value: int, lo: int, hi: int):
    if not lo <= value <= hi:
        raise MidiError(f"{name} {value} outside representable range {lo}..{hi}")


def write_midi(doc: MidiDocument) -> bytes:
    """Serialize ``doc`` as a format-0 SMF.

    Events at the same tick are ordered tempo, pedal, note-off, note-on.
    Notes go out on channel 0.
    """
    _check_range("resolution", doc.resolution, 1, 0x7FFF)
    events: list[tuple[int, int, int, bytes]] = []
    for t in doc.tempos:
        _check_range("tempo", t.microseconds_per_beat, 1, 0xFFFFFF)
        events.append((t.tick, 0, 0, b"\xFF\x51\x03" + t.microseconds_per_beat.to_bytes(3, "big")))
    for p in doc.pedals:
        _check_range("pedal channel", p.channel, 0, 15)
        _check_range("pedal value", p.value, 0, 127)
        events.append((p.tick, 1, 0, bytes([0xB0 | p.channel, 64, p.value])))
    for n in doc.notes:
        _check_range("pitch", n.pitch, 0, 127)
        _check_range("velocity", n.velocity, 1, 127)
        events.append((n.offset, 2, n.pitch, bytes([0x80, n.pitch, 0])))
        events.append((n.onset, 3, n.pitch, bytes([0x90, n.pitch, n.velocity])))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    track = bytearray()
    last = 0
    for tick, _, _, msg in events:
        if tick < 0:
            raise MidiError(f"negative tick {tick}")
        track += _vlq(tick - last)
        track += msg
        last = tick
    track += b"\x00\xFF\x2F\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, doc.resolution)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)


def load_midi(path) -> MidiDocument:
    with open(path, "rb") as fh:
        return read_midi(fh.read())


def save_midi(doc: MidiDocument, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_midi(doc))


# ---------------------------------------------------------------------------
# Time
# ---------------------------------------------------------------------------

def rescale_resolution(doc: MidiDocument, target: int) -> MidiDocument:
    """Return a copy of ``doc`` at ``target`` ticks per beat."""
    if target <= 0:
        raise ValueError(f"target resolution must be positive, got {target}")
    if target == doc.resolution:
        return MidiDocument(doc.resolution, list(doc.notes), list(doc.tempos), list(doc.pedals))
    ratio = Fraction(target, doc.resolution)

    def s(tick: int) -> int:
        return round_half_away(tick * ratio)

    notes = []
    for n in doc.notes:
        on = s(n.onset)
        # keep a one-tick minimum so the note survives coarsening
        notes.append(NoteEvent(n.pitch, on, max(s(n.offset), on + 1), n.velocity))
    tempos = {}
    for t in doc.tempos:
        tempos[s(t.tick)] = TempoEvent(s(t.tick), t.microseconds_per_beat)
    pedals = [PedalEvent(s(p.tick), p.channel, p.value) for p in doc.pedals]
    return MidiDocument(target, notes, list(tempos.values()), pedals)


def ticks_to_seconds(tick: float, doc: MidiDocument) -> float:
    """Convert an absolute tick to seconds by integrating the tempo map."""
    if tick < 0:
        raise ValueError(f"tick must be non-negative, got {tick}")
    seconds = 0.0
    tempos = doc.tempos or [TempoEvent(0, DEFAULT_TEMPO)]
    for i, t in enumerate(tempos):
        if t.tick >= tick:
            break
        seg_end = tempos[i + 1].tick if i + 1 < len(tempos) else tick
        seg_end = min(seg_end, tick)
        seconds += (seg_end - t.tick) * t.microseconds_per_beat / (1e6 * doc.resolution)
    return seconds
