"""Note streams to model-ready datasets.

Four cumulative representation levels (pitch only, +velocity bucket, +delta
bucket, +on/off kind), three encoding schemes (one-hot or ordinal on the
input side), fixed-length windows with next-pitch targets, corpus histogram
reports and a compact binary dataset container.
"""

from __future__ import annotations

import json
import struct
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .midi_codec import NOTE_OFF, NOTE_ON, MidiTrack, NoteEvent

# 88-key piano range in MIDI note numbers; the model's pitch alphabet.
PIANO_LOW = 21
PIANO_HIGH = 108
N_KEYS = 88

LEVEL_BASIC = "basic"
LEVEL_VELOCITY = "velocity"
LEVEL_BASIC_DELTA = "basic-delta"
LEVEL_FULL = "full"
LEVELS = (LEVEL_BASIC, LEVEL_VELOCITY, LEVEL_BASIC_DELTA, LEVEL_FULL)

SCHEME_ONE_HOT_BOTH = "one-hot-both"
SCHEME_ORDINAL_IN = "ordinal-in-one-hot-out"
SCHEME_ORDINAL_BOTH = "ordinal-both"
SCHEMES = (SCHEME_ONE_HOT_BOTH, SCHEME_ORDINAL_IN, SCHEME_ORDINAL_BOTH)

# Dynamics-aligned velocity bins: lower bounds of buckets 1..7 (bucket 0 opens at 0).
_VELOCITY_BOUNDS = (40, 50, 58, 65, 71, 78, 86)
N_VELOCITY_BUCKETS = 8

# Logarithmic delta bins: lower bounds of buckets 1..11, in ticks at the
# reference resolution of 480 ticks per beat.
_DELTA_BOUNDS = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)
N_DELTA_BUCKETS = 12
REFERENCE_TICKS_PER_BEAT = 480

_KIND_CODES = {NOTE_ON: 0, NOTE_OFF: 1}
N_KINDS = 2


def bucket_velocity(velocity: int) -> int:
    """Velocity 0..127 to one of 8 dynamics buckets."""
    if not 0 <= velocity <= 127:
        raise ValueError(f"velocity out of range: {velocity}")
    return bisect_right(_VELOCITY_BOUNDS, velocity)


def normalize_delta(delta_ticks: int, ticks_per_beat: int) -> int:
    """Rescale a raw delta to the 480 ticks-per-beat reference, rounding half up."""
    if ticks_per_beat <= 0:
        raise ValueError(f"ticks_per_beat must be positive, got {ticks_per_beat}")
    if delta_ticks < 0:
        raise ValueError(f"negative delta_ticks: {delta_ticks}")
    scaled, remainder = divmod(delta_ticks * REFERENCE_TICKS_PER_BEAT, ticks_per_beat)
    return scaled + (1 if 2 * remainder >= ticks_per_beat else 0)


def bucket_delta(delta_ticks: int, ticks_per_beat: int) -> int:
    """Delta ticks to one of 12 logarithmic buckets, after resolution scaling."""
    return bisect_right(_DELTA_BOUNDS, normalize_delta(delta_ticks, ticks_per_beat))


def level_attrs(level: str) -> tuple[str, ...]:
    """Attribute columns of a level, in declared order."""
    if level == LEVEL_BASIC:
        return ("pitch",)
    if level == LEVEL_VELOCITY:
        return ("pitch", "velocity")
    if level == LEVEL_BASIC_DELTA:
        return ("pitch", "velocity", "delta")
    if level == LEVEL_FULL:
        return ("kind", "pitch", "velocity", "delta")
    raise ValueError(f"unknown level {level!r}")


_ATTR_WIDTHS = {"kind": N_KINDS, "pitch": N_KEYS, "velocity": N_VELOCITY_BUCKETS, "delta": N_DELTA_BUCKETS}


def input_width(level: str, scheme: str) -> int:
    """Per-timestep feature width for a level/scheme combination."""
    attrs = level_attrs(level)
    if scheme == SCHEME_ONE_HOT_BOTH:
        return sum(_ATTR_WIDTHS[a] for a in attrs)
    if scheme in (SCHEME_ORDINAL_IN, SCHEME_ORDINAL_BOTH):
        return len(attrs)
    raise ValueError(f"unknown scheme {scheme!r}")


def infer_scheme(level: str, width: int) -> str:
    """Recover the input encoding from a model's level and input width."""
    if width == input_width(level, SCHEME_ONE_HOT_BOTH):
        return SCHEME_ONE_HOT_BOTH
    if width == input_width(level, SCHEME_ORDINAL_BOTH):
        return SCHEME_ORDINAL_BOTH
    raise ValueError(f"input width {width} matches no encoding at level {level!r}")


@dataclass(frozen=True)
class TokenizedEvent:
    """One event under a representation level, all attributes bucketized."""

    kind: str = NOTE_ON
    pitch_index: int = 0  # piano key index, MIDI pitch - 21
    velocity_bucket: int | None = None
    delta_bucket: int | None = None

    def __post_init__(self):
        if not 0 <= self.pitch_index < N_KEYS:
            raise ValueError(f"pitch_index out of range: {self.pitch_index}")


@dataclass
class TokenStream:
    """Tokenized events of one track plus drop counters."""

    level: str
    events: list[TokenizedEvent] = field(default_factory=list)
    dropped_out_of_range: int = 0
    dropped_note_offs: int = 0

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


def tokenize(track: MidiTrack, level: str) -> TokenStream:
    """Bucketize a note stream at the given level.

    note_offs are kept only at the full level; pitches outside the 88-key
    range are dropped. Deltas of dropped events are folded into the next
    kept event so timing survives the filtering.
    """
    attrs = level_attrs(level)
    has_velocity = "velocity" in attrs
    has_delta = "delta" in attrs
    stream = TokenStream(level=level)
    pending_delta = 0
    for event in track.events:
        delta = event.delta_ticks + pending_delta
        if event.kind == NOTE_OFF and level != LEVEL_FULL:
            stream.dropped_note_offs += 1
            pending_delta = delta
            continue
        if not PIANO_LOW <= event.pitch <= PIANO_HIGH:
            stream.dropped_out_of_range += 1
            pending_delta = delta
            continue
        pending_delta = 0
        stream.events.append(TokenizedEvent(
            kind=event.kind,
            pitch_index=event.pitch - PIANO_LOW,
            velocity_bucket=bucket_velocity(event.velocity) if has_velocity else None,
            delta_bucket=bucket_delta(delta, track.ticks_per_beat) if has_delta else None,
        ))
    return stream


def _token_columns(event: TokenizedEvent, attrs: tuple[str, ...]) -> list[int]:
    values = {
        "kind": _KIND_CODES[event.kind],
        "pitch": event.pitch_index,
        "velocity": event.velocity_bucket,
        "delta": event.delta_bucket,
    }
    out = []
    for attr in attrs:
        value = values[attr]
        if value is None:
            raise ValueError(f"event is missing the {attr!r} attribute required by the level")
        out.append(value)
    return out


@dataclass
class DatasetWindowSet:
    """Fixed-length token windows with the following event's pitch as target.

    tokens has shape (n, sequence_length, n_attrs) with attribute columns in
    level order; targets has shape (n,).
    """

    level: str
    scheme: str
    sequence_length: int
    tokens: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.targets)

    def window(self, i: int) -> list[TokenizedEvent]:
        """Reconstruct window i as TokenizedEvent objects."""
        attrs = level_attrs(self.level)
        out = []
        for row in self.tokens[i]:
            values = dict(zip(attrs, (int(v) for v in row)))
            out.append(TokenizedEvent(
                kind=NOTE_ON if values.get("kind", 0) == 0 else NOTE_OFF,
                pitch_index=values["pitch"],
                velocity_bucket=values.get("velocity"),
                delta_bucket=values.get("delta"),
            ))
        return out


def build_windows(
    stream: TokenStream,
    sequence_length: int,
    stride: int = 1,
    scheme: str = SCHEME_ONE_HOT_BOTH,
) -> DatasetWindowSet:
    """Slide a window over the stream; each target is the next event's pitch."""
    if sequence_length <= 0 or stride <= 0:
        raise ValueError("sequence_length and stride must be positive")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    attrs = level_attrs(stream.level)
    events = stream.events
    n_windows = max(0, (len(events) - sequence_length - 1) // stride + 1)
    tokens = np.zeros((n_windows, sequence_length, len(attrs)), dtype=np.uint8)
    targets = np.zeros(n_windows, dtype=np.uint8)
    for w in range(n_windows):
        begin = w * stride
        for t in range(sequence_length):
            tokens[w, t] = _token_columns(events[begin + t], attrs)
        targets[w] = events[begin + sequence_length].pitch_index
    return DatasetWindowSet(stream.level, scheme, sequence_length, tokens, targets)


def concat_window_sets(sets: list[DatasetWindowSet]) -> DatasetWindowSet:
    if not sets:
        raise ValueError("no window sets to concatenate")
    first = sets[0]
    for other in sets[1:]:
        if (other.level, other.scheme, other.sequence_length) != (
            first.level, first.scheme, first.sequence_length,
        ):
            raise ValueError("window sets differ in level, scheme or sequence length")
    return DatasetWindowSet(
        first.level,
        first.scheme,
        first.sequence_length,
        np.concatenate([s.tokens for s in sets]),
        np.concatenate([s.targets for s in sets]),
    )


def encode_batch(tokens: np.ndarray, level: str, scheme: str) -> np.ndarray:
    """Token batch (n, T, n_attrs) to model input features (n, T, width)."""
    attrs = level_attrs(level)
    if tokens.ndim != 3 or tokens.shape[2] != len(attrs):
        raise ValueError(f"token array shape {tokens.shape} does not match level {level!r}")
    if scheme in (SCHEME_ORDINAL_IN, SCHEME_ORDINAL_BOTH):
        return tokens.astype(np.float64)
    if scheme != SCHEME_ONE_HOT_BOTH:
        raise ValueError(f"unknown scheme {scheme!r}")
    n, seq_len, _ = tokens.shape
    out = np.zeros((n, seq_len, input_width(level, scheme)), dtype=np.float64)
    offset = 0
    for column, attr in enumerate(attrs):
        width = _ATTR_WIDTHS[attr]
        values = tokens[:, :, column].astype(np.int64)
        if values.min(initial=0) < 0 or values.max(initial=0) >= width:
            raise ValueError(f"{attr} value out of range for one-hot encoding")
        rows, cols = np.indices((n, seq_len))
        out[rows, cols, offset + values] = 1.0
        offset += width
    return out


def encode(window: list[TokenizedEvent], level: str, scheme: str) -> np.ndarray:
    """Encode one window as a (T, width) float matrix."""
    attrs = level_attrs(level)
    rows = np.array([_token_columns(e, attrs) for e in window], dtype=np.uint8)
    return encode_batch(rows[np.newaxis], level, scheme)[0]


def encode_event(event: TokenizedEvent, level: str, scheme: str) -> np.ndarray:
    """Encode a single event as a (width,) feature vector."""
    return encode([event], level, scheme)[0]


def decode_ordinal(matrix: np.ndarray, level: str) -> list[TokenizedEvent]:
    """Inverse of encode for the ordinal schemes."""
    attrs = level_attrs(level)
    if matrix.ndim != 2 or matrix.shape[1] != len(attrs):
        raise ValueError(f"matrix shape {matrix.shape} does not match level {level!r}")
    out = []
    for row in matrix:
        values = dict(zip(attrs, (int(v) for v in row)))
        out.append(TokenizedEvent(
            kind=NOTE_ON if values.get("kind", 0) == 0 else NOTE_OFF,
            pitch_index=values["pitch"],
            velocity_bucket=values.get("velocity"),
            delta_bucket=values.get("delta"),
        ))
    return out


# ---------------------------------------------------------------------------
# Corpus statistics


@dataclass
class StatsReport:
    """Histograms over a corpus: raw velocities/deltas and bucket occupancy."""

    velocity_histogram: np.ndarray  # 128 bins
    raw_delta_histogram: dict[int, int]
    normalized_delta_histogram: dict[int, int]
    velocity_bucket_counts: np.ndarray  # 8 bins
    delta_bucket_counts: np.ndarray  # 12 bins
    n_events: int

    def to_csv(self) -> str:
        lines = ["section,key,count"]
        for value, count in enumerate(self.velocity_histogram):
            if count:
                lines.append(f"velocity,{value},{count}")
        for value in sorted(self.raw_delta_histogram):
            lines.append(f"delta_raw,{value},{self.raw_delta_histogram[value]}")
        for value in sorted(self.normalized_delta_histogram):
            lines.append(f"delta_normalized,{value},{self.normalized_delta_histogram[value]}")
        for bucket, count in enumerate(self.velocity_bucket_counts):
            lines.append(f"velocity_bucket,{bucket},{count}")
        for bucket, count in enumerate(self.delta_bucket_counts):
            lines.append(f"delta_bucket,{bucket},{count}")
        lines.append(f"total,events,{self.n_events}")
        return "\n".join(lines) + "\n"


def compute_stats(tracks: list[MidiTrack]) -> StatsReport:
    """One pass over every note event; raw and scaled delta views are both kept."""
    velocity_histogram = np.zeros(128, dtype=np.int64)
    raw_deltas: dict[int, int] = {}
    norm_deltas: dict[int, int] = {}
    velocity_buckets = np.zeros(N_VELOCITY_BUCKETS, dtype=np.int64)
    delta_buckets = np.zeros(N_DELTA_BUCKETS, dtype=np.int64)
    n_events = 0
    for track in tracks:
        for event in track.events:
            n_events += 1
            velocity_histogram[event.velocity] += 1
            velocity_buckets[bucket_velocity(event.velocity)] += 1
            raw_deltas[event.delta_ticks] = raw_deltas.get(event.delta_ticks, 0) + 1
            normalized = normalize_delta(event.delta_ticks, track.ticks_per_beat)
            norm_deltas[normalized] = norm_deltas.get(normalized, 0) + 1
            delta_buckets[bucket_delta(event.delta_ticks, track.ticks_per_beat)] += 1
    return StatsReport(
        velocity_histogram=velocity_histogram,
        raw_delta_histogram=raw_deltas,
        normalized_delta_histogram=norm_deltas,
        velocity_bucket_counts=velocity_buckets,
        delta_bucket_counts=delta_buckets,
        n_events=n_events,
    )


# ---------------------------------------------------------------------------
# Dataset container

_DATASET_MAGIC = b"MTDS"
_DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sHBBIQ")


class DatasetFormatError(ValueError):
    pass


def save_dataset(dataset: DatasetWindowSet, path: str | Path, extra: dict | None = None) -> None:
    """Write the binary container and a JSON sidecar with counts."""
    path = Path(path)
    n = len(dataset)
    records = np.concatenate(
        [dataset.tokens.reshape(n, -1), dataset.targets.reshape(n, 1)], axis=1
    ).astype(np.uint8)
    header = _DATASET_HEADER.pack(
        _DATASET_MAGIC,
        _DATASET_VERSION,
        LEVELS.index(dataset.level),
        SCHEMES.index(dataset.scheme),
        dataset.sequence_length,
        n,
    )
    path.write_bytes(header + records.tobytes())

    attrs = level_attrs(dataset.level)
    pitch_column = attrs.index("pitch")
    sidecar = {
        "level": dataset.level,
        "scheme": dataset.scheme,
        "sequence_length": dataset.sequence_length,
        "windows": n,
        "pitch_counts": np.bincount(
            dataset.tokens[:, :, pitch_column].ravel(), minlength=N_KEYS
        ).tolist(),
    }
    if "velocity" in attrs:
        column = attrs.index("velocity")
        sidecar["velocity_bucket_counts"] = np.bincount(
            dataset.tokens[:, :, column].ravel(), minlength=N_VELOCITY_BUCKETS
        ).tolist()
    if "delta" in attrs:
        column = attrs.index("delta")
        sidecar["delta_bucket_counts"] = np.bincount(
            dataset.tokens[:, :, column].ravel(), minlength=N_DELTA_BUCKETS
        ).tolist()
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_dataset(path: str | Path) -> DatasetWindowSet:
    data = Path(path).read_bytes()
    if len(data) < _DATASET_HEADER.size:
        raise DatasetFormatError("file shorter than dataset header")
    magic, version, level_tag, scheme_tag, seq_len, n = _DATASET_HEADER.unpack_from(data)
    if magic != _DATASET_MAGIC:
        raise DatasetFormatError(f"bad dataset magic {magic!r}")
    if version != _DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if level_tag >= len(LEVELS) or scheme_tag >= len(SCHEMES):
        raise DatasetFormatError("unknown level or scheme tag")
    level = LEVELS[level_tag]
    n_attrs = len(level_attrs(level))
    record = seq_len * n_attrs + 1
    body = np.frombuffer(data, dtype=np.uint8, offset=_DATASET_HEADER.size)
    if body.size != n * record:
        raise DatasetFormatError(
            f"expected {n * record} payload bytes, found {body.size}"
        )
    records = body.reshape(n, record)
    tokens = records[:, :-1].reshape(n, seq_len, n_attrs).copy()
    targets = records[:, -1].copy()
    return DatasetWindowSet(level, SCHEMES[scheme_tag], seq_len, tokens, targets)
