"""Deterministic demo corpus: major-scale runs, arpeggios and chord blocks.

Small, regular material that a desk-scale model can overfit quickly; also
handy as fixture data since generation is a pure function of the seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .midi_codec import NOTE_OFF, NOTE_ON, MidiTrack, NoteEvent, serialize_smf

MAJOR_STEPS = (0, 2, 4, 5, 7, 9, 11)
TRIAD_STEPS = (0, 4, 7)

_DURATIONS = (120, 240, 480)
_BASE_VELOCITIES = (45, 60, 72, 84, 96)
_ROOTS = (36, 48, 60)


def scale_run(root: int) -> list[int]:
    """Two octaves up and back down, endpoints not repeated."""
    up = [root + 12 * octave + step for octave in (0, 1) for step in MAJOR_STEPS]
    up.append(root + 24)
    return up + up[-2::-1]


def arpeggio_run(root: int) -> list[int]:
    up = [root + 12 * octave + step for octave in (0, 1) for step in TRIAD_STEPS]
    up.append(root + 24)
    return up + up[-2::-1]


def chord_blocks(root: int) -> list[list[int]]:
    """I-IV-V-I triads, each a simultaneous block voiced bottom-up."""
    return [[root + degree + step for step in TRIAD_STEPS] for degree in (0, 5, 7, 0)]


def _segment_events(
    rng: np.random.Generator, n_patterns: int = 3, repeats: int = 2
) -> list[NoteEvent]:
    key = int(rng.integers(0, 12))
    root = int(rng.choice(_ROOTS)) + key
    duration = int(rng.choice(_DURATIONS))
    base_velocity = int(rng.choice(_BASE_VELOCITIES))
    pattern = int(rng.integers(0, n_patterns))

    events: list[NoteEvent] = []

    def add_note(pitch, position):
        velocity = min(127, base_velocity + (12 if position % 4 == 0 else 0))
        events.append(NoteEvent(NOTE_ON, pitch, velocity, 0))
        events.append(NoteEvent(NOTE_OFF, pitch, 0, duration))

    if pattern == 0:
        run = scale_run(root) * repeats  # practice runs cycle like an etude
        for position, pitch in enumerate(run):
            add_note(pitch, position)
    elif pattern == 1:
        run = arpeggio_run(root) * repeats
        for position, pitch in enumerate(run):
            add_note(pitch, position)
    else:
        for block in chord_blocks(root):
            for pitch in block:
                events.append(NoteEvent(NOTE_ON, pitch, base_velocity, 0))
            for voice, pitch in enumerate(block):
                events.append(NoteEvent(NOTE_OFF, pitch, 0, duration if voice == 0 else 0))
    return events


def generate_tracks(
    seed: int = 0,
    target_note_ons: int = 5000,
    ticks_per_beat: int = 480,
    segments_per_track: int = 8,
    include_chords: bool = True,
) -> list[MidiTrack]:
    """Tracks totalling roughly target_note_ons note_on events."""
    rng = np.random.default_rng(seed)
    n_patterns = 3 if include_chords else 2
    tracks: list[MidiTrack] = []
    note_ons = 0
    while note_ons < target_note_ons:
        events: list[NoteEvent] = []
        for _ in range(segments_per_track):
            events.extend(_segment_events(rng, n_patterns))
        track = MidiTrack(ticks_per_beat, events)
        tracks.append(track)
        note_ons += sum(1 for e in events if e.kind == NOTE_ON)
    return tracks


def scale_arpeggio_corpus(seed: int = 0, target_note_ons: int = 5000) -> list[MidiTrack]:
    """Ascending/descending major scales and arpeggios, etude style: each
    track cycles one run (~170 notes), like practicing a single exercise.
    The material of the desk-scale training and injection checks."""
    rng = np.random.default_rng(seed)
    tracks: list[MidiTrack] = []
    note_ons = 0
    while note_ons < target_note_ons:
        key = int(rng.integers(0, 12))
        root = int(rng.choice((36, 48))) + key
        duration = int(rng.choice(_DURATIONS))
        base_velocity = int(rng.choice(_BASE_VELOCITIES))
        if rng.random() < 0.5:
            run = scale_run(root) * 12
        else:
            run = arpeggio_run(root) * 26
        events: list[NoteEvent] = []
        for position, pitch in enumerate(run):
            velocity = min(127, base_velocity + (12 if position % 4 == 0 else 0))
            events.append(NoteEvent(NOTE_ON, pitch, velocity, 0))
            events.append(NoteEvent(NOTE_OFF, pitch, 0, duration))
        tracks.append(MidiTrack(480, events))
        note_ons += len(run)
    return tracks


def write_corpus(directory: str | Path, tracks: list[MidiTrack]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, track in enumerate(tracks):
        path = directory / f"track_{index:03d}.mid"
        path.write_bytes(serialize_smf(track))
        paths.append(path)
    return paths
