"""Live correction core.

A session consumes note events one at a time, asks the model (or the
music-theory context) whether the played pitch is plausible, and may emit a
nearby pitch instead. The aid level knob l in [0, 1] overrides the player
exactly when l * P[best neighbor] > P[played]; the detection threshold only
flags, it never acts. Corrected note_ons re-pitch their paired note_offs so
no note is left hanging.

The artificial error injector and the evaluation harness live here too.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .midi_codec import NOTE_OFF, NOTE_ON, MidiTrack, NoteEvent
from .neural import LstmModel, _sigmoid, forward_streaming, prior_distribution, zero_state
from .representation import (
    PIANO_HIGH,
    PIANO_LOW,
    TokenizedEvent,
    bucket_delta,
    bucket_velocity,
    encode_event,
    infer_scheme,
    level_attrs,
)
from .theory import MusicalContext, snap_to_scale

BACKEND_MODEL = "model"
BACKEND_CONTEXT = "context"


@dataclass(frozen=True)
class CorrectionConfig:
    backend: str = BACKEND_MODEL
    aid_level: float = 0.5
    detection_threshold: float = 0.02
    max_shift: int = 3
    context: MusicalContext | None = None
    warmup: int = 0

    def __post_init__(self):
        if self.backend not in (BACKEND_MODEL, BACKEND_CONTEXT):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not 0.0 <= self.aid_level <= 1.0:
            raise ValueError(f"aid_level must be in [0, 1], got {self.aid_level}")
        if not 0.0 <= self.detection_threshold <= 1.0:
            raise ValueError(
                f"detection_threshold must be in [0, 1], got {self.detection_threshold}"
            )
        if not 1 <= self.max_shift <= 11:
            raise ValueError(f"max_shift must be in [1, 11], got {self.max_shift}")
        if self.backend == BACKEND_CONTEXT and self.context is None:
            raise ValueError("context backend requires a musical context")
        if self.warmup < 0:
            raise ValueError(f"warmup must be non-negative, got {self.warmup}")


def limit_blas_threads_for_realtime() -> None:
    """Pin BLAS to one thread. Multi-threaded BLAS adds multi-millisecond
    synchronization stalls to the small per-event matrix products, wrecking
    tail latency; call this once in latency-sensitive processes."""
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=1, user_api="blas")


class _ReplayKernel:
    """Bounded-context inference in float32 with split weight matrices.

    Recomputes the next-pitch distribution from the recent-event buffer;
    32-bit precision is fine for inference and halves the memory traffic of
    the per-event replay.
    """

    def __init__(self, model: LstmModel):
        h = model.hidden_size
        d = model.input_width
        self.hidden = h
        f32 = np.float32
        self.w1x = np.ascontiguousarray(model.w1[:, :d], dtype=f32)
        self.w1h = np.ascontiguousarray(model.w1[:, d:], dtype=f32)
        self.b1 = model.b1.astype(f32)
        self.w2x = np.ascontiguousarray(model.w2[:, :h], dtype=f32)
        self.w2h = np.ascontiguousarray(model.w2[:, h:], dtype=f32)
        self.b2 = model.b2.astype(f32)
        self.wd = model.wd.astype(f32)
        self.bd = model.bd.astype(f32)
        self.wo = model.wo.astype(f32)
        self.bo = model.bo.astype(f32)

    @staticmethod
    def _cell(z: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        size = c.size
        i = _sigmoid(z[:size])
        f = _sigmoid(z[size:2 * size])
        g = np.tanh(z[2 * size:3 * size])
        o = _sigmoid(z[3 * size:])
        c_next = f * c + i * g
        return o * np.tanh(c_next), c_next

    def distribution(self, events) -> np.ndarray:
        h = self.hidden
        h1 = np.zeros(h, np.float32)
        c1 = np.zeros(h, np.float32)
        h2 = np.zeros(h, np.float32)
        c2 = np.zeros(h, np.float32)
        for x in events:
            h1, c1 = self._cell(self.w1x @ x + self.w1h @ h1 + self.b1, c1)
            h2, c2 = self._cell(self.w2x @ h1 + self.w2h @ h2 + self.b2, c2)
        dense = np.maximum(self.wd @ h2 + self.bd, 0.0)
        logits = (self.wo @ dense + self.bo).astype(np.float64)
        exp = np.exp(logits - logits.max())
        return exp / exp.sum()


@dataclass(frozen=True)
class Decision:
    """Verdict for one event: what was played, what was sounded, and why."""

    original_pitch: int
    emitted_pitch: int
    overridden: bool
    flagged_error: bool
    p_original: float | None = None
    p_emitted: float | None = None
    latency_us: int = 0


class Session:
    """Sequential per-performance state; share one model across many sessions.

    With context_window set (normally the model's training sequence length)
    the prediction is conditioned on exactly the last context_window sounded
    events, matching the distribution the model was trained on; a mistake
    then also slides out of view instead of tainting the state forever.
    context_window None keeps plain unbounded streaming.
    """

    def __init__(
        self,
        cfg: CorrectionConfig,
        model: LstmModel | None = None,
        ticks_per_beat: int = 480,
        context_window: int | None = None,
        clock=time.perf_counter_ns,
    ):
        if cfg.backend == BACKEND_MODEL and model is None:
            raise ValueError("model backend requires a loaded model")
        if context_window is not None and context_window <= 0:
            raise ValueError(f"context_window must be positive, got {context_window}")
        self.cfg = cfg
        self.model = model
        self.ticks_per_beat = ticks_per_beat
        self.context_window = context_window
        self._clock = clock
        self._scheme = (
            infer_scheme(model.level, model.input_width) if model is not None else None
        )
        self._attrs = level_attrs(model.level) if model is not None else ()
        if model is not None and context_window is not None:
            self._kernel = _ReplayKernel(model)
        self._open: dict[int, deque[int]] = {}
        self._reset_model_state()

    def _reset_model_state(self) -> None:
        if self.model is not None:
            self._state = zero_state(self.model)
            self._recent: deque[np.ndarray] = deque(maxlen=self.context_window)
            if self.context_window is not None:
                self._dist = self._kernel.distribution(())
            else:
                self._dist = prior_distribution(self.model)
            self._dist_stale = False
        self._events_fed = 0

    def reset(self) -> None:
        """Zero the recurrent state and forget open notes; config survives."""
        self._open.clear()
        self._reset_model_state()

    def set_aid_level(self, aid_level: float) -> None:
        self.cfg = replace(self.cfg, aid_level=aid_level)

    def set_backend(self, cfg: CorrectionConfig) -> None:
        """Swap the whole configuration; never touches recurrent state."""
        if cfg.backend == BACKEND_MODEL and self.model is None:
            raise ValueError("model backend requires a loaded model")
        self.cfg = cfg

    def process_event(self, event: NoteEvent) -> Decision:
        start = self._clock()
        if self.cfg.backend == BACKEND_CONTEXT:
            decision = self._process_context(event)
        else:
            decision = self._process_model(event)
        return replace(decision, latency_us=(self._clock() - start) // 1000)

    # -- context backend: a pure function of (pitch, context) ----------------

    def _process_context(self, event: NoteEvent) -> Decision:
        emitted = snap_to_scale(event.pitch, self.cfg.context)
        changed = emitted != event.pitch
        return Decision(event.pitch, emitted, overridden=changed, flagged_error=changed)

    # -- model backend --------------------------------------------------------

    def _process_model(self, event: NoteEvent) -> Decision:
        if not PIANO_LOW <= event.pitch <= PIANO_HIGH:
            return Decision(event.pitch, event.pitch, False, False)
        if event.kind == NOTE_OFF:
            return self._process_note_off(event)
        return self._process_note_on(event)

    def _process_note_off(self, event: NoteEvent) -> Decision:
        pending = self._open.get(event.pitch)
        emitted = pending.popleft() if pending else event.pitch
        if pending is not None and not pending:
            del self._open[event.pitch]
        if self.model.level == "full":
            self._feed(event.kind, emitted, event.velocity, event.delta_ticks)
        return Decision(event.pitch, emitted, overridden=emitted != event.pitch,
                        flagged_error=False)

    def _current_dist(self) -> np.ndarray:
        if self.context_window is not None and self._dist_stale:
            self._dist = self._kernel.distribution(self._recent)
            self._dist_stale = False
        return self._dist

    def _process_note_on(self, event: NoteEvent) -> Decision:
        cfg = self.cfg
        dist = self._current_dist()
        warmed = self._events_fed >= cfg.warmup
        index = event.pitch - PIANO_LOW
        p_original = float(dist[index])

        flagged = warmed and p_original < cfg.detection_threshold
        overridden = False
        emitted = event.pitch
        p_emitted = p_original
        if warmed:
            best = self._best_neighbor(dist, event.pitch, cfg.max_shift)
            if best is not None and cfg.aid_level * float(dist[best - PIANO_LOW]) > p_original:
                overridden = True
                emitted = best
                p_emitted = float(dist[best - PIANO_LOW])
        if overridden:
            self._open.setdefault(event.pitch, deque()).append(emitted)
        self._feed(NOTE_ON, emitted, event.velocity, event.delta_ticks)
        return Decision(event.pitch, emitted, overridden, flagged, p_original, p_emitted)

    @staticmethod
    def _best_neighbor(dist: np.ndarray, pitch: int, max_shift: int) -> int | None:
        """Most probable pitch within max_shift semitones; nearer, then lower,
        candidates win ties."""
        best = None
        best_p = -1.0
        for distance in range(1, max_shift + 1):
            for candidate in (pitch - distance, pitch + distance):
                if PIANO_LOW <= candidate <= PIANO_HIGH:
                    p = float(dist[candidate - PIANO_LOW])
                    if p > best_p:
                        best = candidate
                        best_p = p
        return best

    def _feed(self, kind: str, pitch: int, velocity: int, delta_ticks: int) -> None:
        """Advance the model on the event that was actually sounded."""
        attrs = self._attrs
        token = TokenizedEvent(
            kind=kind,
            pitch_index=pitch - PIANO_LOW,
            velocity_bucket=bucket_velocity(velocity) if "velocity" in attrs else None,
            delta_bucket=bucket_delta(delta_ticks, self.ticks_per_beat)
            if "delta" in attrs else None,
        )
        x = encode_event(token, self.model.level, self._scheme)
        if self.context_window is None:
            self._dist, self._state = forward_streaming(self.model, self._state, x)
        else:
            self._recent.append(x.astype(np.float32))
            self._dist_stale = True
        self._events_fed += 1


def correct_file(
    track: MidiTrack,
    cfg: CorrectionConfig,
    model: LstmModel | None = None,
    context_window: int | None = None,
) -> tuple[MidiTrack, list[Decision]]:
    """Offline pass over a whole file, from a fresh session at zero state."""
    session = Session(cfg, model, ticks_per_beat=track.ticks_per_beat,
                      context_window=context_window)
    decisions = []
    events = []
    for event in track.events:
        decision = session.process_event(event)
        decisions.append(decision)
        events.append(NoteEvent(event.kind, decision.emitted_pitch,
                                event.velocity, event.delta_ticks))
    return MidiTrack(track.ticks_per_beat, events), decisions


# ---------------------------------------------------------------------------
# Error injection and evaluation


@dataclass
class InjectionReport:
    """Corrupted stream plus which note_ons were altered (index -> true pitch)."""

    corrupted: list[NoteEvent]
    labels: dict[int, int] = field(default_factory=dict)


def inject_errors(
    track: MidiTrack, rate: float, max_shift: int = 3, seed: int = 0
) -> InjectionReport:
    """Randomly shift interior note_ons by 1..max_shift semitones.

    The first and last 5% of note_ons are left alone, paired note_offs follow
    their note_on's new pitch, and the same seed always yields the same report.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    note_on_count = sum(1 for e in track.events if e.kind == NOTE_ON)
    if note_on_count < 10:
        raise ValueError(f"need at least 10 note_ons to inject errors, got {note_on_count}")
    margin = int(np.ceil(0.05 * note_on_count))
    rng = np.random.default_rng(seed)

    report = InjectionReport(corrupted=[])
    open_notes: dict[int, deque[int]] = {}
    on_index = 0
    for index, event in enumerate(track.events):
        if event.kind == NOTE_OFF:
            pending = open_notes.get(event.pitch)
            pitch = pending.popleft() if pending else event.pitch
            if pending is not None and not pending:
                del open_notes[event.pitch]
            report.corrupted.append(
                NoteEvent(NOTE_OFF, pitch, event.velocity, event.delta_ticks)
            )
            continue

        pitch = event.pitch
        eligible = (
            margin <= on_index < note_on_count - margin
            and PIANO_LOW <= pitch <= PIANO_HIGH
        )
        if eligible and rng.random() < rate:
            while True:
                shift = int(rng.integers(1, max_shift + 1))
                if rng.random() < 0.5:
                    shift = -shift
                if PIANO_LOW <= pitch + shift <= PIANO_HIGH:
                    break
            report.labels[index] = pitch
            pitch = pitch + shift
        if pitch != event.pitch:
            open_notes.setdefault(event.pitch, deque()).append(pitch)
        report.corrupted.append(NoteEvent(NOTE_ON, pitch, event.velocity, event.delta_ticks))
        on_index += 1
    return report


@dataclass
class EvalMetrics:
    n_events: int
    n_note_ons: int
    n_injected: int
    n_flagged: int
    n_overridden: int
    detection_precision: float
    detection_recall: float
    correction_accuracy: float
    false_override_rate: float
    latency_mean_us: float
    latency_p50_us: float
    latency_p99_us: float

    def to_csv(self) -> str:
        lines = ["metric,value"]
        for name, value in vars(self).items():
            lines.append(f"{name},{value}")
        return "\n".join(lines) + "\n"


def summarize_run(
    decisions: list[Decision],
    labels: dict[int, int],
    corrupted: list[NoteEvent],
) -> EvalMetrics:
    """Score one corrected run against the injection labels.

    Precision/recall compare flagged_error with the labeled set; correction
    accuracy is the share of injected events whose emitted pitch equals the
    pre-injection pitch; the false-override rate is measured on clean note_ons.
    """
    note_on_indices = [i for i, e in enumerate(corrupted) if e.kind == NOTE_ON]
    flagged = {i for i in note_on_indices if decisions[i].flagged_error}
    true_positives = len(flagged & labels.keys())
    restored = sum(
        1 for i, original in labels.items() if decisions[i].emitted_pitch == original
    )
    clean = [i for i in note_on_indices if i not in labels]
    false_overrides = sum(1 for i in clean if decisions[i].overridden)
    latencies = np.array([d.latency_us for d in decisions], dtype=np.float64)
    return EvalMetrics(
        n_events=len(corrupted),
        n_note_ons=len(note_on_indices),
        n_injected=len(labels),
        n_flagged=len(flagged),
        n_overridden=sum(1 for i in note_on_indices if decisions[i].overridden),
        detection_precision=true_positives / len(flagged) if flagged else 0.0,
        detection_recall=true_positives / len(labels) if labels else 1.0,
        correction_accuracy=restored / len(labels) if labels else 0.0,
        false_override_rate=false_overrides / len(clean) if clean else 0.0,
        latency_mean_us=float(latencies.mean()) if len(latencies) else 0.0,
        latency_p50_us=float(np.percentile(latencies, 50)) if len(latencies) else 0.0,
        latency_p99_us=float(np.percentile(latencies, 99)) if len(latencies) else 0.0,
    )


def evaluate(
    track: MidiTrack,
    cfg: CorrectionConfig,
    model: LstmModel | None,
    rate: float,
    seed: int = 0,
    context_window: int | None = None,
) -> EvalMetrics:
    """Inject errors, correct the corrupted stream, and score the outcome."""
    report = inject_errors(track, rate, cfg.max_shift, seed)
    corrupted_track = MidiTrack(track.ticks_per_beat, report.corrupted)
    _, decisions = correct_file(corrupted_track, cfg, model, context_window)
    return summarize_run(decisions, report.labels, report.corrupted)
