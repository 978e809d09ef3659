import numpy as np
import pytest

from miditune.engine import (
    BACKEND_CONTEXT,
    BACKEND_MODEL,
    CorrectionConfig,
    Decision,
    Session,
    correct_file,
    evaluate,
    inject_errors,
    summarize_run,
)
from miditune.midi_codec import NOTE_OFF, NOTE_ON, MidiTrack, NoteEvent, serialize_smf
from miditune.neural import forward_streaming, new_model, zero_state
from miditune.representation import PIANO_HIGH, PIANO_LOW, SCHEME_ONE_HOT_BOTH
from miditune.theory import MusicalContext, in_scale


def rigged_model(bias_per_pitch=None, level="basic"):
    """Zero-weight model whose output distribution is constant: softmax(bo)."""
    model = new_model(level, 8, 8, SCHEME_ONE_HOT_BOTH, seed=0)
    for param in model.params().values():
        param[:] = 0.0
    if bias_per_pitch:
        for pitch, logit in bias_per_pitch.items():
            model.bo[pitch - PIANO_LOW] = logit
    return model


def on(pitch, velocity=80, delta=0):
    return NoteEvent(NOTE_ON, pitch, velocity, delta)


def off(pitch, delta=0):
    return NoteEvent(NOTE_OFF, pitch, 0, delta)


def paired_track(pitches, ticks_per_beat=480):
    events = []
    for p in pitches:
        events.append(on(p))
        events.append(off(p, delta=120))
    return MidiTrack(ticks_per_beat, events)


# -- override policy ---------------------------------------------------------------


def test_aid_level_zero_never_overrides():
    model = rigged_model({62: 50.0})  # all mass one step above
    session = Session(CorrectionConfig(aid_level=0.0), model)
    for pitch in (60, 61, 62, 90):
        decision = session.process_event(on(pitch))
        assert not decision.overridden
        assert decision.emitted_pitch == pitch


def test_full_mass_on_neighbor_overrides_at_aid_one():
    model = rigged_model({61: 50.0})
    session = Session(CorrectionConfig(aid_level=1.0), model)
    decision = session.process_event(on(60))
    assert decision.overridden
    assert decision.emitted_pitch == 61
    assert decision.p_emitted > decision.p_original


def test_uniform_distribution_never_overrides():
    # strict inequality: 1.0 * (1/88) > (1/88) is false
    session = Session(CorrectionConfig(aid_level=1.0), rigged_model())
    decision = session.process_event(on(60))
    assert not decision.overridden
    assert decision.emitted_pitch == 60


def test_aid_is_monotone():
    model = rigged_model({64: 3.0, 60: 1.0})
    fired_at = []
    for aid in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0):
        session = Session(CorrectionConfig(aid_level=aid), model)
        if session.process_event(on(62)).overridden:
            fired_at.append(aid)
    assert fired_at  # fires at least at aid one (mass ratio e^2 within 2 semitones)
    threshold = fired_at[0]
    assert fired_at == [a for a in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
                        if a >= threshold]


def test_override_respects_max_shift_bound():
    model = rigged_model({70: 50.0})  # far-away mass must not be reachable
    session = Session(CorrectionConfig(aid_level=1.0, max_shift=3), model)
    decision = session.process_event(on(60))
    assert abs(decision.emitted_pitch - decision.original_pitch) <= 3


def test_detection_threshold_flags_without_acting():
    model = rigged_model({61: 50.0})
    session = Session(
        CorrectionConfig(aid_level=0.0, detection_threshold=0.5), model
    )
    decision = session.process_event(on(60))
    assert decision.flagged_error
    assert not decision.overridden


def test_warmup_passes_through():
    model = rigged_model({61: 50.0})
    session = Session(CorrectionConfig(aid_level=1.0, detection_threshold=0.5,
                                       warmup=2), model)
    first = session.process_event(on(60))
    second = session.process_event(on(60))
    third = session.process_event(on(60))
    assert not first.overridden and not first.flagged_error
    assert not second.overridden
    assert third.overridden  # two events fed, warmup satisfied


def test_out_of_range_pitch_passes_through():
    model = rigged_model({61: 50.0})
    session = Session(CorrectionConfig(aid_level=1.0), model)
    decision = session.process_event(on(5))
    assert decision.emitted_pitch == 5
    assert decision.p_original is None


def test_overridden_note_off_follows_its_note_on():
    model = rigged_model({62: 50.0})
    session = Session(CorrectionConfig(aid_level=1.0), model)
    d_on = session.process_event(on(60))
    assert d_on.emitted_pitch == 62
    d_off = session.process_event(off(60))
    assert d_off.emitted_pitch == 62
    assert d_off.overridden
    # a second note_off for the same pitch has nothing pending
    assert session.process_event(off(60)).emitted_pitch == 60


def test_no_stuck_notes_after_corrections(toy_tracks):
    model = new_model("basic", 8, 8, SCHEME_ONE_HOT_BOTH, seed=14)
    cfg = CorrectionConfig(aid_level=1.0, detection_threshold=0.1)
    corrected, _ = correct_file(toy_tracks[0], cfg, model)
    open_notes = {}
    for event in corrected.events:
        if event.kind == NOTE_ON:
            open_notes[event.pitch] = open_notes.get(event.pitch, 0) + 1
        else:
            assert open_notes.get(event.pitch, 0) > 0, "note_off without open note"
            open_notes[event.pitch] -= 1
    assert all(count == 0 for count in open_notes.values())


def test_decision_invariants_over_random_model(toy_tracks):
    model = new_model("basic", 8, 8, SCHEME_ONE_HOT_BOTH, seed=2)
    cfg = CorrectionConfig(aid_level=1.0, detection_threshold=0.3, max_shift=2)
    _, decisions = correct_file(toy_tracks[0], cfg, model)
    for decision in decisions:
        if decision.overridden:
            assert decision.emitted_pitch != decision.original_pitch
            assert abs(decision.emitted_pitch - decision.original_pitch) <= 2
        else:
            assert decision.emitted_pitch == decision.original_pitch
        assert decision.latency_us >= 0


def test_latency_is_measured():
    session = Session(CorrectionConfig(aid_level=0.5), rigged_model())
    decision = session.process_event(on(60))
    assert isinstance(decision.latency_us, int)


# -- config handling -----------------------------------------------------------------


def test_model_backend_requires_model():
    with pytest.raises(ValueError, match="model"):
        Session(CorrectionConfig(backend=BACKEND_MODEL))


def test_config_validation():
    with pytest.raises(ValueError):
        CorrectionConfig(aid_level=1.5)
    with pytest.raises(ValueError):
        CorrectionConfig(detection_threshold=-0.1)
    with pytest.raises(ValueError):
        CorrectionConfig(max_shift=0)
    with pytest.raises(ValueError):
        CorrectionConfig(backend=BACKEND_CONTEXT)  # context missing
    with pytest.raises(ValueError):
        CorrectionConfig(backend="oracle")


def test_mid_stream_aid_change_preserves_state():
    pitches = [60, 62, 64, 65, 67]
    model = new_model("basic", 8, 8, SCHEME_ONE_HOT_BOTH, seed=6)

    # expected distribution after the pass-through history, straight from the net
    state = zero_state(model)
    dist = None
    for p in pitches:
        x = np.zeros(88)
        x[p - PIANO_LOW] = 1.0
        dist, state = forward_streaming(model, state, x)

    warmed = Session(CorrectionConfig(aid_level=0.0), model)
    for p in pitches:
        assert not warmed.process_event(on(p)).overridden
    warmed.set_aid_level(1.0)
    after_history = warmed.process_event(on(69))

    fresh = Session(CorrectionConfig(aid_level=1.0), model)
    cold = fresh.process_event(on(69))

    assert after_history.p_original == dist[69 - PIANO_LOW]
    assert after_history.p_original != cold.p_original


def test_bounded_context_matches_windowed_forward():
    from miditune.neural import forward

    model = new_model("basic", 8, 8, SCHEME_ONE_HOT_BOTH, seed=6)
    session = Session(CorrectionConfig(aid_level=0.0), model, context_window=4)
    history = [60, 62, 64, 65, 67, 69]
    for p in history:
        session.process_event(on(p))
    decision = session.process_event(on(71))
    window = np.zeros((4, 88))
    for t, p in enumerate(history[-4:]):
        window[t, p - PIANO_LOW] = 1.0
    expected = forward(model, window)
    # the replay kernel runs in float32; agreement is to inference precision
    assert decision.p_original == pytest.approx(float(expected[71 - PIANO_LOW]), rel=1e-5)


def test_bounded_context_forgets_old_mistakes():
    # an event older than the window must not influence the prediction
    model = new_model("basic", 8, 8, SCHEME_ONE_HOT_BOTH, seed=6)
    tail = [62, 64, 65, 67]

    def prediction_after(prefix):
        session = Session(CorrectionConfig(aid_level=0.0), model, context_window=4)
        for p in prefix + tail:
            session.process_event(on(p))
        return session.process_event(on(69)).p_original

    assert prediction_after([30]) == prediction_after([100])
    assert prediction_after([30]) == prediction_after([30, 55])


def test_context_window_validation():
    model = rigged_model()
    with pytest.raises(ValueError, match="context_window"):
        Session(CorrectionConfig(), model, context_window=0)


def test_reset_zeroes_state():
    model = new_model("basic", 8, 8, SCHEME_ONE_HOT_BOTH, seed=6)
    session = Session(CorrectionConfig(aid_level=0.5), model)
    baseline = session.process_event(on(60))
    session.process_event(on(72))
    session.reset()
    again = session.process_event(on(60))
    assert again.p_original == baseline.p_original


# -- context backend ------------------------------------------------------------------


def test_context_backend_snaps_to_scale():
    ctx = MusicalContext(0, "ionian")
    cfg = CorrectionConfig(backend=BACKEND_CONTEXT, context=ctx)
    session = Session(cfg)
    decision = session.process_event(on(61))
    assert decision.overridden
    assert decision.emitted_pitch == 60
    assert decision.p_original is None and decision.p_emitted is None
    assert in_scale(decision.emitted_pitch, ctx)


def test_context_backend_is_stateless_under_shuffle():
    ctx = MusicalContext(7, "mixolydian")
    cfg = CorrectionConfig(backend=BACKEND_CONTEXT, context=ctx)
    pitches = [60, 61, 63, 66, 70, 72, 75, 61, 66]

    def emitted(order):
        session = Session(cfg)
        return {
            (i, p): session.process_event(on(p)).emitted_pitch
            for i, p in enumerate(order)
        }

    forward_order = emitted(pitches)
    reverse_order = emitted(list(reversed(pitches)))
    by_pitch_fwd = {p: e for (_, p), e in forward_order.items()}
    by_pitch_rev = {p: e for (_, p), e in reverse_order.items()}
    assert by_pitch_fwd == by_pitch_rev


def test_context_backend_note_offs_follow_the_same_snap():
    ctx = MusicalContext(0, "ionian")
    cfg = CorrectionConfig(backend=BACKEND_CONTEXT, context=ctx)
    session = Session(cfg)
    assert session.process_event(on(61)).emitted_pitch == 60
    assert session.process_event(off(61)).emitted_pitch == 60


# -- offline correction ----------------------------------------------------------------


def test_pass_through_identity_bytes(toy_tracks):
    model = new_model("basic", 8, 8, SCHEME_ONE_HOT_BOTH, seed=1)
    cfg = CorrectionConfig(aid_level=0.0, detection_threshold=0.0)
    for track in toy_tracks[:3]:
        corrected, decisions = correct_file(track, cfg, model)
        assert serialize_smf(corrected) == serialize_smf(track)
        assert not any(d.overridden for d in decisions)


def test_correct_file_changes_only_overridden_pitches(toy_tracks):
    model = new_model("basic", 8, 8, SCHEME_ONE_HOT_BOTH, seed=3)
    cfg = CorrectionConfig(aid_level=1.0)
    track = toy_tracks[0]
    corrected, decisions = correct_file(track, cfg, model)
    assert len(corrected.events) == len(track.events)
    for before, after, decision in zip(track.events, corrected.events, decisions):
        assert after.kind == before.kind
        assert after.velocity == before.velocity
        assert after.delta_ticks == before.delta_ticks
        if decision.overridden:
            assert after.pitch != before.pitch
        else:
            assert after.pitch == before.pitch


# -- error injection ---------------------------------------------------------------------


def test_inject_rate_zero_is_identity(toy_tracks):
    report = inject_errors(toy_tracks[0], 0.0, 3, seed=1)
    assert report.labels == {}
    assert report.corrupted == toy_tracks[0].events


def test_inject_rate_one_corrupts_every_eligible_note():
    track = paired_track([60] * 40)
    report = inject_errors(track, 1.0, 3, seed=5)
    note_on_indices = [i for i, e in enumerate(track.events) if e.kind == NOTE_ON]
    margin = 2  # ceil(0.05 * 40)
    eligible = note_on_indices[margin:-margin]
    assert set(report.labels) == set(eligible)
    for index in eligible:
        shifted = report.corrupted[index].pitch
        assert 1 <= abs(shifted - 60) <= 3
    for index in note_on_indices[:margin] + note_on_indices[-margin:]:
        assert report.corrupted[index].pitch == 60


def test_inject_is_deterministic(toy_tracks):
    first = inject_errors(toy_tracks[0], 0.4, 3, seed=42)
    second = inject_errors(toy_tracks[0], 0.4, 3, seed=42)
    assert first.labels == second.labels
    assert first.corrupted == second.corrupted
    third = inject_errors(toy_tracks[0], 0.4, 3, seed=43)
    assert third.corrupted != first.corrupted


def test_inject_repitches_paired_note_offs():
    track = paired_track(list(range(50, 90)))
    report = inject_errors(track, 1.0, 3, seed=9)
    open_map = {}
    for event in report.corrupted:
        if event.kind == NOTE_ON:
            open_map[event.pitch] = open_map.get(event.pitch, 0) + 1
        else:
            assert open_map.get(event.pitch, 0) > 0
            open_map[event.pitch] -= 1
    assert all(v == 0 for v in open_map.values())


def test_inject_stays_in_piano_range():
    track = paired_track([PIANO_LOW] * 20 + [PIANO_HIGH] * 20)
    report = inject_errors(track, 1.0, 3, seed=2)
    for event in report.corrupted:
        assert PIANO_LOW <= event.pitch <= PIANO_HIGH


def test_inject_requires_ten_note_ons():
    with pytest.raises(ValueError, match="10"):
        inject_errors(paired_track([60] * 9), 0.5, 3, seed=0)


def test_inject_rejects_bad_rate(toy_tracks):
    with pytest.raises(ValueError, match="rate"):
        inject_errors(toy_tracks[0], 1.5, 3, seed=0)


# -- evaluation metrics ---------------------------------------------------------------------


def _decision(orig, out=None, flagged=False):
    out = orig if out is None else out
    return Decision(orig, out, overridden=out != orig, flagged_error=flagged,
                    latency_us=10)


def test_metrics_oracle_detector_scores_perfectly():
    corrupted = [on(60), on(61), on(62), on(63)]
    labels = {1: 60, 3: 65}
    decisions = [
        _decision(60),
        _decision(61, 60, flagged=True),
        _decision(62),
        _decision(63, 65, flagged=True),
    ]
    metrics = summarize_run(decisions, labels, corrupted)
    assert metrics.detection_precision == 1.0
    assert metrics.detection_recall == 1.0
    assert metrics.correction_accuracy == 1.0
    assert metrics.false_override_rate == 0.0


def test_metrics_with_no_overrides():
    corrupted = [on(60), on(61)]
    labels = {1: 60}
    decisions = [_decision(60), _decision(61)]
    metrics = summarize_run(decisions, labels, corrupted)
    assert metrics.correction_accuracy == 0.0
    assert metrics.false_override_rate == 0.0
    assert metrics.n_overridden == 0


def test_metrics_counts_false_overrides():
    corrupted = [on(60), on(61), off(61)]
    decisions = [_decision(60, 62), _decision(61), _decision(61)]
    metrics = summarize_run(decisions, {}, corrupted)
    assert metrics.false_override_rate == 0.5
    assert metrics.detection_recall == 1.0  # vacuous: nothing injected


def test_evaluate_end_to_end_smoke(toy_tracks):
    model = rigged_model()
    cfg = CorrectionConfig(aid_level=0.0, detection_threshold=0.0)
    metrics = evaluate(toy_tracks[0], cfg, model, rate=0.2, seed=3)
    assert metrics.n_injected > 0
    assert metrics.n_overridden == 0
    assert metrics.correction_accuracy == 0.0
    assert metrics.latency_p99_us >= metrics.latency_p50_us
    rows = metrics.to_csv().strip().splitlines()
    assert rows[0] == "metric,value"
    assert len(rows) == 13
