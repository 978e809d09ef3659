"""Standard MIDI File codec reduced to note events.

Reads format 0/1 files, merges all tracks into a single time-ordered note
stream and writes format 0 files back out. Everything that is not a note
(meta, control change, sysex, ...) is skipped while parsing; running status
is accepted on input and never emitted on output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

NOTE_ON = "note_on"
NOTE_OFF = "note_off"

_HEADER = struct.Struct(">4sIHHH")
_CHUNK = struct.Struct(">4sI")


class MidiParseError(ValueError):
    """Malformed SMF data; carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class NoteEvent:
    """One note_on/note_off with its delta time in ticks."""

    kind: str
    pitch: int
    velocity: int
    delta_ticks: int

    def __post_init__(self):
        if self.kind not in (NOTE_ON, NOTE_OFF):
            raise ValueError(f"kind must be note_on or note_off, got {self.kind!r}")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 0 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        if self.delta_ticks < 0:
            raise ValueError(f"negative delta_ticks: {self.delta_ticks}")


@dataclass
class RepairCounts:
    """What was dropped or left dangling while normalizing a parsed stream."""

    orphan_note_offs: int = 0
    unclosed_note_ons: int = 0


@dataclass
class MidiTrack:
    """A merged, time-ordered note stream plus the file's tick resolution."""

    ticks_per_beat: int
    events: list[NoteEvent] = field(default_factory=list)
    repairs: RepairCounts = field(default_factory=RepairCounts, compare=False, repr=False)

    def __post_init__(self):
        if self.ticks_per_beat <= 0:
            raise ValueError(f"ticks_per_beat must be positive, got {self.ticks_per_beat}")

    def note_ons(self) -> list[NoteEvent]:
        return [e for e in self.events if e.kind == NOTE_ON]


def read_var_len(data: bytes, pos: int) -> tuple[int, int]:
    """Variable-length quantity at pos; returns (value, next position)."""
    value = 0
    for _ in range(4):
        if pos >= len(data):
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


def write_var_len(value: int) -> bytes:
    if value < 0:
        raise ValueError("variable-length quantity must be non-negative")
    out = bytearray([value & 0x7F])
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _data_byte(data: bytes, pos: int, what: str) -> int:
    if pos >= len(data):
        raise MidiParseError(f"truncated event, missing {what}", pos)
    byte = data[pos]
    if byte & 0x80:
        raise MidiParseError(f"expected {what} data byte, got status 0x{byte:02X}", pos)
    return byte


def _parse_track_events(data: bytes, start: int, end: int) -> list[tuple[int, NoteEvent]]:
    """Note events of one MTrk chunk as (absolute_tick, event) pairs."""
    events: list[tuple[int, NoteEvent]] = []
    pos = start
    tick = 0
    running_status = None
    while pos < end:
        delta, pos = read_var_len(data, pos)
        tick += delta
        if pos >= end:
            raise MidiParseError("truncated event, missing status byte", pos)
        status = data[pos]
        if status & 0x80:
            pos += 1
        elif running_status is None:
            raise MidiParseError(f"data byte 0x{status:02X} with no running status", pos)
        else:
            status = running_status

        kind = status & 0xF0
        if kind in (0x80, 0x90):
            pitch = _data_byte(data, pos, "pitch")
            velocity = _data_byte(data, pos + 1, "velocity")
            pos += 2
            running_status = status
            if kind == 0x90 and velocity > 0:
                events.append((tick, NoteEvent(NOTE_ON, pitch, velocity, 0)))
            else:
                # note_on with velocity 0 is a note_off by MIDI convention
                events.append((tick, NoteEvent(NOTE_OFF, pitch, velocity, 0)))
        elif kind in (0xA0, 0xB0, 0xE0):
            _data_byte(data, pos, "controller")
            _data_byte(data, pos + 1, "value")
            pos += 2
            running_status = status
        elif kind in (0xC0, 0xD0):
            _data_byte(data, pos, "value")
            pos += 1
            running_status = status
        elif status in (0xF0, 0xF7):
            length, pos = read_var_len(data, pos)
            pos += length
            running_status = None
        elif status == 0xFF:
            if pos >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos]
            length, pos = read_var_len(data, pos + 1)
            pos += length
            if meta_type == 0x2F:
                break
        else:
            raise MidiParseError(f"undefined status byte 0x{status:02X}", pos - 1)
        if pos > end:
            raise MidiParseError("event runs past end of track chunk", end)
    return events


def merge_and_order(tracks: list[list[NoteEvent]]) -> list[NoteEvent]:
    """Merge per-track delta-ordered streams into one global stream.

    Ties at the same tick break as note_off before note_on, then lower pitch
    first, so merging is a pure function of its input.
    """
    timed: list[tuple[int, int, int, NoteEvent]] = []
    for events in tracks:
        tick = 0
        for event in events:
            tick += event.delta_ticks
            timed.append((tick, 0 if event.kind == NOTE_OFF else 1, event.pitch, event))
    timed.sort(key=lambda item: item[:3])
    return _redelta(timed)


def _redelta(timed: list[tuple[int, int, int, NoteEvent]]) -> list[NoteEvent]:
    out = []
    previous = 0
    for tick, _, _, event in timed:
        out.append(NoteEvent(event.kind, event.pitch, event.velocity, tick - previous))
        previous = tick
    return out


def _repair_pairing(events: list[NoteEvent], repairs: RepairCounts) -> list[NoteEvent]:
    """Drop note_offs that close nothing; count (but keep) unclosed note_ons."""
    open_notes: dict[int, int] = {}
    kept: list[NoteEvent] = []
    pending_delta = 0
    for event in events:
        delta = event.delta_ticks + pending_delta
        pending_delta = 0
        if event.kind == NOTE_OFF:
            if open_notes.get(event.pitch, 0) == 0:
                repairs.orphan_note_offs += 1
                pending_delta = delta
                continue
            open_notes[event.pitch] -= 1
        else:
            open_notes[event.pitch] = open_notes.get(event.pitch, 0) + 1
        if delta != event.delta_ticks:
            event = NoteEvent(event.kind, event.pitch, event.velocity, delta)
        kept.append(event)
    repairs.unclosed_note_ons += sum(open_notes.values())
    return kept


def parse_smf(data: bytes) -> MidiTrack:
    """Parse a format 0/1 SMF into one merged note stream."""
    if len(data) < _HEADER.size:
        raise MidiParseError("file shorter than SMF header", 0)
    magic, header_len, fmt, ntrks, division = _HEADER.unpack_from(data, 0)
    if magic != b"MThd":
        raise MidiParseError(f"bad header magic {magic!r}", 0)
    if header_len < 6:
        raise MidiParseError(f"header length {header_len} < 6", 4)
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks_per_beat", 12)

    pos = 8 + header_len
    track_streams: list[list[tuple[int, NoteEvent]]] = []
    while len(track_streams) < ntrks:
        if pos + _CHUNK.size > len(data):
            raise MidiParseError(
                f"expected {ntrks} track chunks, found {len(track_streams)}", pos
            )
        chunk_id, chunk_len = _CHUNK.unpack_from(data, pos)
        body_start = pos + _CHUNK.size
        if body_start + chunk_len > len(data):
            raise MidiParseError(f"truncated chunk {chunk_id!r}", pos)
        if chunk_id == b"MTrk":
            track_streams.append(_parse_track_events(data, body_start, body_start + chunk_len))
        # other chunk types are skipped, as the SMF spec instructs
        pos = body_start + chunk_len

    timed = [
        (tick, 0 if event.kind == NOTE_OFF else 1, event.pitch, event)
        for stream in track_streams
        for tick, event in stream
    ]
    timed.sort(key=lambda item: item[:3])
    track = MidiTrack(ticks_per_beat=division)
    track.events = _repair_pairing(_redelta(timed), track.repairs)
    return track


def serialize_smf(track: MidiTrack) -> bytes:
    """Emit a format 0 SMF. Running status is never used."""
    if not 0 < track.ticks_per_beat <= 0x7FFF:
        raise ValueError(f"ticks_per_beat {track.ticks_per_beat} not encodable")
    body = bytearray()
    for event in track.events:
        if event.kind == NOTE_ON and event.velocity == 0:
            raise ValueError("note_on with velocity 0 must be normalized to note_off")
        body += write_var_len(event.delta_ticks)
        body.append(0x90 if event.kind == NOTE_ON else 0x80)
        body.append(event.pitch)
        body.append(event.velocity)
    body += b"\x00\xff\x2f\x00"
    return (
        _HEADER.pack(b"MThd", 6, 0, 1, track.ticks_per_beat)
        + _CHUNK.pack(b"MTrk", len(body))
        + bytes(body)
    )
