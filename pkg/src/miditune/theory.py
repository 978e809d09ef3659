"""Musical context model: key/mode scale membership and nearest-scale-note snapping.

The context corrector is deliberately rule-based: a note outside the seven
pitch classes of the active scale is replaced by the closest note inside it.
"""

from __future__ import annotations

from dataclasses import dataclass

NOTE_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]

# The seven diatonic modes, as rotations of the major (ionian) interval set.
MODES = {
    "ionian":     (0, 2, 4, 5, 7, 9, 11),
    "dorian":     (0, 2, 3, 5, 7, 9, 10),
    "phrygian":   (0, 1, 3, 5, 7, 8, 10),
    "lydian":     (0, 2, 4, 6, 7, 9, 11),
    "mixolydian": (0, 2, 4, 5, 7, 9, 10),
    "aeolian":    (0, 2, 3, 5, 7, 8, 10),
    "locrian":    (0, 1, 3, 5, 6, 8, 10),
}

MODE_NAMES = tuple(MODES)


@dataclass(frozen=True)
class MusicalContext:
    """A key (0 = C .. 11 = B) plus one of the seven diatonic modes."""

    key: int
    mode: str

    def __post_init__(self):
        if not 0 <= self.key <= 11:
            raise ValueError(f"key must be in [0, 11], got {self.key}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODE_NAMES}")

    def __str__(self):
        return f"{NOTE_NAMES[self.key]} {self.mode}"


def scale_pitch_classes(ctx: MusicalContext) -> frozenset[int]:
    """The 7 pitch classes of the context's scale."""
    return frozenset((ctx.key + step) % 12 for step in MODES[ctx.mode])


def in_scale(pitch: int, ctx: MusicalContext) -> bool:
    """True iff the pitch's class belongs to the context's scale."""
    if not 0 <= pitch <= 127:
        raise ValueError(f"pitch must be in [0, 127], got {pitch}")
    return (pitch - ctx.key) % 12 in MODES[ctx.mode]


def snap_to_scale(pitch: int, ctx: MusicalContext) -> int:
    """Closest in-scale pitch; in-scale input is returned unchanged.

    Every off-scale pitch class in a diatonic mode sits exactly one semitone
    from two scale notes, so ties are the norm; they break downward (flatten)
    as a fixed convention. The result stays within [0, 127].
    """
    if in_scale(pitch, ctx):
        return pitch
    classes = scale_pitch_classes(ctx)
    for distance in range(1, 12):
        for candidate in (pitch - distance, pitch + distance):
            if 0 <= candidate <= 127 and candidate % 12 in classes:
                return candidate
    raise AssertionError("unreachable: diatonic scales cover every pitch within 11 semitones")
