"""Operator command line: preprocess, train, eval, correct, stats, serve.

Flag defaults can be overridden through MIDITUNE_* environment variables
(flag --inject-rate reads MIDITUNE_INJECT_RATE and so on); explicit flags
always win.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .engine import BACKEND_CONTEXT, BACKEND_MODEL, CorrectionConfig, correct_file, evaluate
from .midi_codec import MidiParseError, parse_smf, serialize_smf
from .neural import (
    Hyperparams,
    ModelFormatError,
    load_metadata,
    load_model,
    new_model,
    save_model,
    train,
)
from .representation import (
    LEVELS,
    SCHEME_ONE_HOT_BOTH,
    SCHEMES,
    DatasetFormatError,
    build_windows,
    compute_stats,
    concat_window_sets,
    load_dataset,
    save_dataset,
    tokenize,
)
from .service import serve
from .theory import MODE_NAMES, NOTE_NAMES, MusicalContext

ENV_PREFIX = "MIDITUNE_"


class _Parser(argparse.ArgumentParser):
    # usage errors exit with code 1; code 2 is reserved for data/model errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _env_default(flag: str, default, cast):
    raw = os.environ.get(ENV_PREFIX + flag.replace("-", "_").upper())
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        print(f"invalid value for {ENV_PREFIX}{flag.replace('-', '_').upper()}: {raw!r}",
              file=sys.stderr)
        raise SystemExit(1)


def parse_context(spec_text: str) -> MusicalContext:
    """KEY:MODE, each by name (c:ionian) or number (0:0)."""
    try:
        key_text, mode_text = spec_text.split(":", 1)
    except ValueError:
        raise ValueError(f"context must look like KEY:MODE, got {spec_text!r}")
    key_text = key_text.strip().upper()
    if key_text in NOTE_NAMES:
        key = NOTE_NAMES.index(key_text)
    else:
        key = int(key_text)
    mode_text = mode_text.strip().lower()
    if mode_text.isdigit():
        index = int(mode_text)
        if not 0 <= index < len(MODE_NAMES):
            raise ValueError(f"mode number out of range: {index}")
        mode = MODE_NAMES[index]
    else:
        mode = mode_text
    return MusicalContext(key, mode)


def _midi_files(directory: Path) -> list[Path]:
    files = sorted(
        p for p in directory.rglob("*") if p.suffix.lower() in (".mid", ".midi")
    )
    if not files:
        raise FileNotFoundError(f"no .mid/.midi files under {directory}")
    return files


def _load_tracks(directory: Path):
    return [parse_smf(path.read_bytes()) for path in _midi_files(directory)]


def _training_window(model_path: str) -> int:
    metadata = load_metadata(model_path)
    if metadata:
        return int(metadata.get("hyperparams", {}).get("sequence_length", 0))
    return 0


def _warmup_from_metadata(model_path: str, override: int | None) -> int:
    if override is not None:
        return override
    return _training_window(model_path)


def _context_window_from_metadata(model_path: str) -> int | None:
    # condition predictions on exactly the window length the model trained on
    window = _training_window(model_path)
    return window if window > 0 else None


# ---------------------------------------------------------------------------
# Subcommands


def cmd_preprocess(args) -> int:
    sets = []
    dropped = 0
    for path in _midi_files(Path(args.in_dir)):
        stream = tokenize(parse_smf(path.read_bytes()), args.level)
        dropped += stream.dropped_out_of_range
        window_set = build_windows(stream, args.seq_len, args.stride, args.scheme)
        if len(window_set):
            sets.append(window_set)
    if not sets:
        print("no windows produced; streams shorter than the sequence length",
              file=sys.stderr)
        return 2
    dataset = concat_window_sets(sets)
    save_dataset(dataset, args.out, extra={"dropped_out_of_range": dropped})
    print(f"wrote {len(dataset)} windows to {args.out}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    hp = Hyperparams(
        sequence_length=dataset.sequence_length,
        lstm_hidden=args.hidden,
        dense_size=args.dense,
        epochs=args.epochs,
        batch_size=args.batch,
        dropout=args.dropout,
        learning_rate=args.lr,
        seed=args.seed,
    )
    model = new_model(dataset.level, args.hidden, args.dense, dataset.scheme, args.seed)
    model, history = train(model, dataset, hp)
    for stats in history:
        print(f"epoch {stats.epoch} loss {stats.loss:.4f} accuracy {stats.accuracy:.4f}")
    fingerprint = hashlib.sha256(Path(args.data).read_bytes()).hexdigest()
    save_model(model, args.out, metadata={
        "seed": args.seed,
        "hyperparams": asdict(hp),
        "dataset_fingerprint": fingerprint,
        "final_accuracy": history[-1].accuracy,
    })
    print(f"wrote model to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    track = parse_smf(Path(args.in_file).read_bytes())
    cfg = CorrectionConfig(
        backend=BACKEND_MODEL,
        aid_level=args.aid,
        detection_threshold=args.threshold,
        warmup=_warmup_from_metadata(args.model, args.warmup),
    )
    metrics = evaluate(track, cfg, model, args.inject_rate, args.seed,
                       context_window=_context_window_from_metadata(args.model))
    if args.report:
        Path(args.report).write_text(metrics.to_csv())
    for line in metrics.to_csv().splitlines()[1:]:
        print(line.replace(",", " = "))
    return 0


def cmd_correct(args) -> int:
    if args.context:
        cfg = CorrectionConfig(
            backend=BACKEND_CONTEXT,
            aid_level=args.aid,
            context=parse_context(args.context),
        )
        model = None
    elif args.model:
        cfg = CorrectionConfig(
            backend=BACKEND_MODEL,
            aid_level=args.aid,
            detection_threshold=args.threshold,
            warmup=_warmup_from_metadata(args.model, args.warmup),
        )
        model = load_model(args.model)
    else:
        print("correct needs --model or --context", file=sys.stderr)
        return 1
    track = parse_smf(Path(args.in_file).read_bytes())
    context_window = _context_window_from_metadata(args.model) if args.model else None
    corrected, decisions = correct_file(track, cfg, model, context_window)
    Path(args.out).write_bytes(serialize_smf(corrected))
    overridden = sum(1 for d in decisions if d.overridden)
    print(f"wrote {args.out} ({overridden} of {len(decisions)} events overridden)")
    return 0


def cmd_stats(args) -> int:
    report = compute_stats(_load_tracks(Path(args.in_dir)))
    Path(args.out).write_text(report.to_csv())
    print(f"wrote {args.out} ({report.n_events} events)")
    return 0


def cmd_serve(args) -> int:
    model = load_model(args.model)
    warmup = _warmup_from_metadata(args.model, args.warmup)
    serve(model, args.host, args.port, raw_socket=args.raw_socket, warmup=warmup,
          context_window=_context_window_from_metadata(args.model))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="miditune",
                     description="real-time MIDI error correction and performance aid")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="tokenize a MIDI directory into a dataset")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of .mid files")
    p.add_argument("--level", choices=LEVELS,
                   default=_env_default("level", "basic", str),
                   help="representation level")
    p.add_argument("--seq-len", type=int, default=_env_default("seq_len", 64, int),
                   help="model look-back window length")
    p.add_argument("--stride", type=int, default=_env_default("stride", 1, int),
                   help="window stride")
    p.add_argument("--scheme", choices=SCHEMES,
                   default=_env_default("scheme", SCHEME_ONE_HOT_BOTH, str),
                   help="input/output encoding")
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a preprocessed dataset")
    p.add_argument("--data", required=True, help="dataset file from preprocess")
    p.add_argument("--hidden", type=int, default=_env_default("hidden", 256, int),
                   help="LSTM hidden size")
    p.add_argument("--dense", type=int, default=_env_default("dense", 128, int),
                   help="dense layer size")
    p.add_argument("--epochs", type=int, default=_env_default("epochs", 20, int),
                   help="training epochs")
    p.add_argument("--batch", type=int, default=_env_default("batch", 64, int),
                   help="mini-batch size")
    p.add_argument("--lr", type=float, default=_env_default("lr", 0.5, float),
                   help="SGD learning rate")
    p.add_argument("--dropout", type=float, default=_env_default("dropout", 0.0, float),
                   help="dropout on LSTM outputs during training")
    p.add_argument("--seed", type=int, default=_env_default("seed", 0, int),
                   help="seed for init, shuffling and dropout")
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="inject errors into a file and score the corrector")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--in", dest="in_file", required=True, help="input MIDI file")
    p.add_argument("--inject-rate", type=float,
                   default=_env_default("inject_rate", 0.1, float),
                   help="per-note corruption probability")
    p.add_argument("--seed", type=int, default=_env_default("seed", 0, int),
                   help="injection seed")
    p.add_argument("--aid", type=float, default=_env_default("aid", 1.0, float),
                   help="aid level (0 disables overrides)")
    p.add_argument("--threshold", type=float,
                   default=_env_default("threshold", 0.02, float),
                   help="detection threshold")
    p.add_argument("--warmup", type=int, default=None,
                   help="override the model's warmup event count")
    p.add_argument("--report", help="also write metrics to this CSV file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("correct", help="correct a MIDI file offline")
    p.add_argument("--model", help="model file (model backend)")
    p.add_argument("--in", dest="in_file", required=True, help="input MIDI file")
    p.add_argument("--out", required=True, help="output MIDI file")
    p.add_argument("--aid", type=float, default=_env_default("aid", 0.5, float),
                   help="aid level")
    p.add_argument("--threshold", type=float,
                   default=_env_default("threshold", 0.02, float),
                   help="detection threshold")
    p.add_argument("--warmup", type=int, default=None,
                   help="override the model's warmup event count")
    p.add_argument("--context",
                   help="KEY:MODE (names or numbers) to use the theory backend")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("stats", help="velocity/delta histograms over a MIDI directory")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of .mid files")
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("serve", help="run the streaming session endpoint")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--port", type=int, default=_env_default("port", 8765, int),
                   help="listen port")
    p.add_argument("--host", default=_env_default("host", "127.0.0.1", str),
                   help="listen address")
    p.add_argument("--raw-socket", action="store_true",
                   help="newline-delimited JSON over TCP instead of WebSocket")
    p.add_argument("--warmup", type=int, default=None,
                   help="override the model's warmup event count")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MidiParseError, DatasetFormatError, ModelFormatError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
