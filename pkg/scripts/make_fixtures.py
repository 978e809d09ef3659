#!/usr/bin/env python3
"""Regenerate the checked-in test fixtures.

Writes tests/data/corpus (generated tracks plus hand-crafted special files),
the small fixture model, and the golden protocol transcript. Run from the
repository root after any deliberate change to the model format, the wire
protocol, or the corpus generator, then review the diff.
"""

import struct
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

from miditune import corpus
from miditune.neural import new_model, save_model
from miditune.representation import SCHEME_ONE_HOT_BOTH
from miditune.service import ServiceSession

from protocol_script import FakeClock, scripted_messages

DATA = ROOT / "tests" / "data"
EOT = b"\x00\xff\x2f\x00"


def track_chunk(body: bytes) -> bytes:
    return b"MTrk" + struct.pack(">I", len(body)) + body


def write_corpus_files():
    corpus_dir = DATA / "corpus"
    corpus_dir.mkdir(parents=True, exist_ok=True)
    for old in corpus_dir.glob("*.mid"):
        old.unlink()

    tracks = corpus.generate_tracks(seed=5, target_note_ons=2400, segments_per_track=5)
    corpus.write_corpus(corpus_dir, tracks[:20])

    # running status: one 0x90 status byte carries four events
    running = (
        b"MThd" + struct.pack(">IHHH", 6, 0, 1, 480)
        + track_chunk(
            b"\x00\x90\x3c\x50"
            b"\x60\x3e\x52"
            b"\x60\x3c\x00"
            b"\x00\x3e\x00"
            + EOT
        )
    )
    (corpus_dir / "special_running_status.mid").write_bytes(running)

    # format 1, two tracks that interleave in time
    t1 = b"\x00\x90\x30\x40" + b"\x83\x00\x80\x30\x40" + EOT
    t2 = b"\x60\x90\x43\x60" + b"\x81\x40\x80\x43\x00" + EOT
    format1 = (
        b"MThd" + struct.pack(">IHHH", 6, 1, 2, 240)
        + track_chunk(t1) + track_chunk(t2)
    )
    (corpus_dir / "special_format1.mid").write_bytes(format1)

    # note_on velocity 0 used as note_off, plus a skipped control change
    velzero = (
        b"MThd" + struct.pack(">IHHH", 6, 0, 1, 96)
        + track_chunk(
            b"\x00\xb0\x40\x7f"
            b"\x00\x90\x45\x31"
            b"\x30\x90\x45\x00"
            + EOT
        )
    )
    (corpus_dir / "special_velocity_zero_off.mid").write_bytes(velzero)
    print(f"corpus: {len(list(corpus_dir.glob('*.mid')))} files")


def write_fixture_model():
    model = new_model("basic", 8, 8, SCHEME_ONE_HOT_BOTH, seed=2024)
    save_model(model, DATA / "fixture_model.mtrn")
    print("fixture model written")
    return model


def write_golden_frames(model):
    session = ServiceSession(model, warmup=0, clock=FakeClock())
    frames = []
    for message in scripted_messages():
        frames.extend(session.handle(message))
    (DATA / "golden_frames.txt").write_bytes(b"\n".join(frames) + b"\n")
    print(f"golden transcript: {len(frames)} frames")
    for frame in frames[:4]:
        print(" ", frame.decode())


if __name__ == "__main__":
    write_corpus_files()
    write_golden_frames(write_fixture_model())
