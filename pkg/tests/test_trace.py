import json

import pytest
from hypothesis import given, settings, strategies as st

from ctxdep.synth import SynthConfig, generate
from ctxdep.trace import (CYCLE_MINUTES, ContextSnapshot, Trace, TraceError, UsageKind, accel_log_power,
                          build_vocabulary, cycle_minute, dumps_trace, parse_trace, write_trace)

from conftest import chained, make_event


def test_empty_file_gives_empty_trace(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text("")
    assert len(parse_trace(p)) == 0


def test_one_line_gives_one_user_one_event(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(json.dumps({"user": "a", "ts": 5, "kind": "web", "label": "x", "alp": 0.0}) + "\n")
    tr = parse_trace(p)
    assert tr.user_ids() == ["a"]
    assert tr.events("a")[0].label == "x"


def test_round_trip_is_byte_identical(tmp_path, small_synth):
    trace, _ = small_synth
    p = tmp_path / "t.jsonl"
    write_trace(trace, p)
    again = tmp_path / "u.jsonl"
    write_trace(parse_trace(p), again)
    assert p.read_bytes() == again.read_bytes()


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "t.jsonl"
    good = json.dumps({"user": "a", "ts": 5, "kind": "web", "label": "x", "alp": 0.0})
    p.write_text(good + "\n{not json\n")
    with pytest.raises(TraceError, match="line 2"):
        parse_trace(p)


def test_backwards_timestamp_rejected(tmp_path):
    p = tmp_path / "t.jsonl"
    recs = [{"user": "a", "ts": t, "kind": "web", "label": "x", "alp": 0.0} for t in (10, 5)]
    p.write_text("".join(json.dumps(r) + "\n" for r in recs))
    with pytest.raises(TraceError, match="precedes"):
        parse_trace(p)


def test_inconsistent_prior_chain_rejected(tmp_path):
    p = tmp_path / "t.jsonl"
    recs = [{"user": "a", "ts": 0, "kind": "web", "label": "x", "alp": 0.0},
            {"user": "a", "ts": 1, "kind": "web", "label": "y", "alp": 0.0, "prior_web": ["z"]}]
    p.write_text("".join(json.dumps(r) + "\n" for r in recs))
    with pytest.raises(TraceError, match="disagrees"):
        parse_trace(p)


def test_unknown_kind_and_missing_field_rejected(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(json.dumps({"user": "a", "ts": 0, "kind": "sms", "label": "x", "alp": 0.0}) + "\n")
    with pytest.raises(TraceError, match="line 1"):
        parse_trace(p)
    p.write_text(json.dumps({"user": "a", "ts": 0, "kind": "web", "alp": 0.0}) + "\n")
    with pytest.raises(TraceError, match="label"):
        parse_trace(p)


def test_cycle_minute_weekend_offset():
    assert cycle_minute(0) == 0.0
    assert cycle_minute(90 * 60) == 90.0
    # epoch on Monday: day 5 is Saturday
    assert cycle_minute(5 * 86400 + 60) == 1441.0
    assert cycle_minute(60, epoch_weekday=6) == 1441.0


@given(st.integers(min_value=0, max_value=10**9), st.integers(min_value=0, max_value=6))
def test_cycle_minute_in_range(ts, wd):
    assert 0 <= cycle_minute(ts, wd) < CYCLE_MINUTES


def test_accel_log_power_clamps():
    assert accel_log_power(0.0) == pytest.approx(accel_log_power(0.1))
    assert accel_log_power(1e9) == pytest.approx(accel_log_power(1e4))


def test_snapshot_validation():
    with pytest.raises(TraceError):
        ContextSnapshot(CYCLE_MINUTES, 0.0)
    with pytest.raises(TraceError):
        ContextSnapshot(0.0, 0.0, gps=(91.0, 0.0))


def test_vocabulary_cap_keeps_most_frequent():
    evs = [make_event(lab) for lab in "aaaaabbbc"]
    v = build_vocabulary(evs, UsageKind.APP, cap=2)
    assert v.labels == ("a", "b")
    assert "c" not in v
    assert v.coverage == pytest.approx(8 / 9)


def test_vocabulary_cap_not_binding():
    evs = [make_event(f"l{i:02d}") for i in range(40)]
    assert build_vocabulary(evs, UsageKind.APP, cap=100).k == 40


def test_vocabulary_coverage_matches_direct_count():
    trace, _ = generate(SynthConfig(n_users=1, zipf_exponent=1.0, seed=3,
                                    vocab_sizes={"web": 150, "phone": 120, "app": 300}))
    evs = trace.events(trace.user_ids()[0], UsageKind.APP)
    v = build_vocabulary(evs, UsageKind.APP, cap=100)
    kept = sum(1 for e in evs if e.label in v)
    assert v.coverage == pytest.approx(kept / len(evs))
    kept_events, dropped = v.filter(evs)
    assert len(kept_events) == kept
    assert dropped == pytest.approx(1 - kept / len(evs))


def test_dumps_truncates_chains_to_depth():
    evs = chained(list("abcde"))
    tr = Trace({"u0": evs}, depth=2)
    last = json.loads(dumps_trace(tr).splitlines()[-1])
    assert last["prior_app"] == ["d", "c"]


def test_events_filter_by_kind():
    evs = [make_event("x", kind=UsageKind.WEB, ts=0), make_event("y", kind=UsageKind.APP, ts=1)]
    tr = Trace({"u0": evs})
    assert [e.label for e in tr.events("u0", UsageKind.APP)] == ["y"]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(list(UsageKind)), st.sampled_from("abc")), min_size=1, max_size=20))
def test_round_trip_property(tmp_path_factory, items):
    history = {k: [] for k in UsageKind}
    evs = []
    for i, (kind, lab) in enumerate(items):
        evs.append(make_event(lab, float(i), kind=kind, ts=i, prior={k: tuple(v) for k, v in history.items()}))
        history[kind].insert(0, lab)
    tr = Trace({"u0": evs})
    p = tmp_path_factory.mktemp("rt") / "t.jsonl"
    write_trace(tr, p)
    back = parse_trace(p)
    assert back.events("u0") == evs
