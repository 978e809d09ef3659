"""Real-time MIDI error correction and performance aid."""

from .engine import CorrectionConfig, Decision, Session, correct_file, evaluate, inject_errors
from .midi_codec import MidiParseError, MidiTrack, NoteEvent, parse_smf, serialize_smf
from .neural import Hyperparams, LstmModel, load_model, new_model, save_model, train
from .representation import bucket_delta, bucket_velocity, build_windows, tokenize
from .theory import MusicalContext, in_scale, scale_pitch_classes, snap_to_scale

__version__ = "0.1.0"

__all__ = [
    "CorrectionConfig", "Decision", "Session", "correct_file", "evaluate",
    "inject_errors", "MidiParseError", "MidiTrack", "NoteEvent", "parse_smf",
    "serialize_smf", "Hyperparams", "LstmModel", "load_model", "new_model",
    "save_model", "train", "bucket_delta", "bucket_velocity", "build_windows",
    "tokenize", "MusicalContext", "in_scale", "scale_pitch_classes",
    "snap_to_scale", "__version__",
]
