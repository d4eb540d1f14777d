import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualpilot.corpus import (
    InjectionPoint,
    Segment,
    Split,
    SplitAssignment,
    Transcript,
    Turn,
    class_distribution,
    emit_jsonl,
    emit_textgrid,
    inject_cross_meeting,
    inject_turn,
    injected_turns,
    parse_jsonl_corpus,
    parse_jsonl_turns,
    parse_textgrid,
    schedule_injections,
    segment,
    verify_splits,
)
from dualpilot.errors import DuplicateTurn, EmptyCorpus, ParseError, SameMeeting, SplitViolation
from dualpilot.evalkit import js_divergence
from dualpilot.synth import synthesize_corpus
from dualpilot.taxonomy import CD, CL, DK, TE, DEFAULT_BAND_WEIGHTS, ComplexityLabel

SIMPLE = ComplexityLabel(CL.LOW, CD.NONE, DK.GENERAL, TE.LOW)

APPENDIX_SAMPLE = '''File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0.0
xmax = 1949.076
tiers? <exists>
size = 1
item []:
    item [1]:
        class = "IntervalTier"
        name = "006-M"
        xmin = 0.0
        xmax = 1949.076
        intervals: size = 2
            intervals [1]:
                xmin = 0.0
                xmax = 18.305
                text = ""
            intervals [2]:
                xmin = 18.305
                xmax = 22.08
                text = "002 I'm the investment teacher"
'''


def make_meeting(mid, speakers=("A", "B"), n=6, step=10.0, recording=None):
    turns = [Turn(speakers[i % len(speakers)], i * step, i * step + 5.0, f"turn {i} of {mid}")
             for i in range(n)]
    return Transcript(mid, turns, speakers=speakers, recording_id=recording)


# -- TextGrid ---------------------------------------------------------------------

def test_appendix_sample_parses():
    t = parse_textgrid(APPENDIX_SAMPLE)
    assert len(t.turns) == 1
    turn = t.turns[0]
    assert (turn.speaker, turn.start_s, turn.end_s) == ("006-M", 18.305, 22.08)
    assert turn.text == "002 I'm the investment teacher"
    assert t.duration == pytest.approx(1949.076)


def test_empty_intervals_give_no_turns():
    data = APPENDIX_SAMPLE.replace("002 I'm the investment teacher", "  ")
    assert parse_textgrid(data).turns == []


def test_shipped_sample_textgrid(world):
    from importlib import resources

    text = (resources.files("dualpilot") / "data" / "sample.TextGrid").read_text("utf-8")
    t = parse_textgrid(text, "sample")
    assert t.speakers == ("Alice", "Bob")
    assert any('"phase two"' in x.text for x in t.turns)


@pytest.mark.parametrize("bad", [
    APPENDIX_SAMPLE.replace('"ooTextFile"', '"binary"'),
    APPENDIX_SAMPLE.replace("intervals [2]:", "intervals [3]:"),
    APPENDIX_SAMPLE.replace("xmin = 18.305\n                xmax = 22.08", "xmin = 22.08\n                xmax = 18.305"),
    APPENDIX_SAMPLE + "junk\n",
    APPENDIX_SAMPLE.replace('class = "IntervalTier"', 'class = "TextTier"'),
])
def test_malformed_textgrid(bad):
    with pytest.raises(ParseError):
        parse_textgrid(bad)


def test_textgrid_round_trip():
    t = make_meeting("m1")
    t.turns[2].text = 'she said "hi"'
    back = parse_textgrid(emit_textgrid(t), "m1")
    assert [(x.speaker, x.start_s, x.end_s, x.text) for x in back.turns] == \
        [(x.speaker, x.start_s, x.end_s, x.text) for x in t.turns]


turn_texts = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), min_size=1,
                     max_size=30).filter(lambda s: s.strip())


@given(st.lists(st.tuples(st.sampled_from(["S1", "S2", "S3"]), st.floats(0.5, 30.0), turn_texts),
                min_size=1, max_size=12))
@settings(max_examples=60, deadline=None)
def test_textgrid_round_trip_property(spec):
    clock, turns = 0.0, []
    for spk, dur, text in spec:
        turns.append(Turn(spk, round(clock, 3), round(clock + dur, 3), text))
        clock += dur + 1.0
    t = Transcript("p", turns, speakers=("S1", "S2", "S3"))
    back = parse_textgrid(emit_textgrid(t), "p")
    assert [(x.speaker, x.start_s, x.end_s, x.text) for x in back.turns] == \
        [(x.speaker, x.start_s, x.end_s, x.text) for x in turns]


# -- JSONL ------------------------------------------------------------------------

def test_jsonl_three_lines():
    lines = [json.dumps({"speaker": "A", "start_s": i, "end_s": i + 1, "text": f"t{i}"}) for i in range(3)]
    t = parse_jsonl_turns("\n".join(lines))
    assert len(t.turns) == 3


def test_jsonl_injected_without_label_rejected():
    line = json.dumps({"speaker": "A", "start_s": 0, "end_s": 0, "text": "q?", "injected": True})
    with pytest.raises(ParseError):
        parse_jsonl_turns(line)


def test_jsonl_duplicate_turn_rejected():
    line = json.dumps({"speaker": "A", "start_s": 0, "end_s": 1, "text": "x"})
    with pytest.raises(DuplicateTurn):
        parse_jsonl_turns(line + "\n" + line)


def test_jsonl_bad_json_reports_line():
    with pytest.raises(ParseError, match="line 2"):
        parse_jsonl_turns('{"speaker": "A", "start_s": 0, "end_s": 1, "text": "x"}\n{oops')


def test_jsonl_round_trip_with_injection():
    t = make_meeting("m1")
    inject_turn(t, InjectionPoint("m1", 25.0, "x"), "what now?", "gt", SIMPLE, metadata={"kind": "factual"})
    back = parse_jsonl_corpus(emit_jsonl([t]))["m1"]
    assert [x.to_json() for x in back.turns] == [x.to_json() for x in t.turns]


def test_shipped_corpus_counts(world):
    turns = [turn for _, turn in injected_turns(world.meetings.values())]
    assert len(turns) == 1180
    assert len(world.meetings) == 231
    assert len(turns) / len(world.meetings) == pytest.approx(5.11, abs=0.005)


# -- segmentation and scheduling ----------------------------------------------------

def test_two_hour_meeting_four_segments():
    t = make_meeting("long", n=720, step=10.0)
    t.duration_s = 7200.0
    segs = segment(t, 1800.0)
    assert len(segs) == 4
    assert sum(len(s.turns) for s in segs) == 720


def test_short_meeting_one_segment():
    t = make_meeting("short", n=5)
    t.duration_s = 100.0
    assert len(segment(t)) == 1


@given(st.floats(1.0, 10_000.0), st.floats(50.0, 3000.0))
@settings(max_examples=80, deadline=None)
def test_segment_preserves_turns(duration, unit):
    n = 20
    turns = [Turn("A", duration * i / n, duration * i / n, str(i)) for i in range(n)]
    t = Transcript("x", turns, duration_s=duration)
    segs = segment(t, unit)
    flat = [x for s in segs for x in s.turns]
    assert Counter(id(x) for x in flat) == Counter(id(x) for x in turns)


@pytest.mark.parametrize("duration, expected", [(1800.0, 6), (200.0, 0), (299.9, 0), (300.0, 1)])
def test_schedule_counts(duration, expected):
    seg = Segment("s", "r", 0, 0.0, duration, [])
    assert len(schedule_injections(seg, 300.0)) == expected


@given(st.floats(0.0, 20_000.0), st.floats(10.0, 2000.0))
@settings(max_examples=80, deadline=None)
def test_schedule_count_is_floor(duration, spacing):
    seg = Segment("s", "r", 0, 0.0, duration, [])
    pts = schedule_injections(seg, spacing)
    assert len(pts) == int(np.floor(duration / spacing + 1e-9))
    assert all(0 < p.offset_s <= duration + 1e-6 for p in pts)


def test_schedule_deterministic():
    seg = Segment("s", "r", 0, 0.0, 1800.0, [])
    a = schedule_injections(seg, rng=np.random.default_rng(4))
    b = schedule_injections(seg, rng=np.random.default_rng(4))
    assert [(p.offset_s, p.sampled_class.id) for p in a] == [(p.offset_s, p.sampled_class.id) for p in b]


# -- cross-meeting injection and leakage ---------------------------------------------

def two_meetings(split_a, split_b):
    a, b = make_meeting("a", ("A1", "A2")), make_meeting("b", ("B1", "B2"))
    splits = SplitAssignment.from_meetings([a, b], {"a": split_a, "b": split_b})
    return a, b, splits


def test_cross_injection_same_split_accepted():
    a, b, splits = two_meetings(Split.TRAIN, Split.TRAIN)
    turn = inject_cross_meeting(a, b, splits, InjectionPoint("b", 20.0, "x"), "q?", "gt", SIMPLE)
    assert turn.source_meeting_id == "a"
    assert turn.complexity.cd is CD.CROSS_MEETING


def test_cross_injection_across_splits_rejected():
    a, b, splits = two_meetings(Split.TRAIN, Split.TEST)
    with pytest.raises(SplitViolation):
        inject_cross_meeting(a, b, splits, InjectionPoint("b", 20.0, "x"), "q?", "gt", SIMPLE)


def test_cross_injection_same_meeting_rejected():
    a, _, splits = two_meetings(Split.TRAIN, Split.TRAIN)
    with pytest.raises(SameMeeting):
        inject_cross_meeting(a, a, splits, InjectionPoint("a", 20.0, "x"), "q?", "gt", SIMPLE)


@given(st.sampled_from(Split), st.sampled_from(Split))
def test_cross_injection_never_crosses_splits(sa, sb):
    a, b, splits = two_meetings(sa, sb)
    point = InjectionPoint("b", 20.0, "x")
    if sa is sb:
        inject_cross_meeting(a, b, splits, point, "q?", "gt", SIMPLE)
    else:
        with pytest.raises(SplitViolation):
            inject_cross_meeting(a, b, splits, point, "q?", "gt", SIMPLE)


def test_clean_corpus_passes(world):
    assert verify_splits(world.meetings.values(), world.splits).ok


def test_speaker_leak_detected():
    a, b = make_meeting("a", ("A", "Shared")), make_meeting("b", ("B", "Shared"))
    splits = SplitAssignment({"a": Split.TRAIN, "b": Split.TEST})
    report = verify_splits([a, b], splits)
    assert not report.ok
    assert any("Shared" in json.dumps(x) for x in report.speaker_leaks)


def test_injection_leak_detected():
    a, b, splits = two_meetings(Split.TEST, Split.TRAIN)
    t = inject_turn(b, InjectionPoint("b", 20.0, "x"), "q?", "gt", SIMPLE)
    t.source_meeting_id = "a"
    report = verify_splits([a, b], splits)
    assert not report.ok and report.injection_leaks


def test_recording_leak_detected():
    a = make_meeting("a", ("A1",), recording="rec")
    b = make_meeting("b", ("B1",), recording="rec")
    splits = SplitAssignment.from_meetings([a, b], {"a": Split.TRAIN, "b": Split.DEV})
    report = verify_splits([a, b], splits)
    assert not report.ok and report.recording_leaks


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_generator_output_is_clean(seed):
    c = synthesize_corpus(40, 150, seed=seed)
    assert verify_splits(c.meetings.values(), c.splits).ok


# -- class distribution ---------------------------------------------------------

def test_single_band_distribution():
    t = make_meeting("m")
    inject_turn(t, InjectionPoint("m", 5.0, "x"), "q?", "gt", SIMPLE)
    assert class_distribution([t]).weights == {"low": 1.0}


def test_no_injections_raises():
    with pytest.raises(EmptyCorpus):
        class_distribution([make_meeting("m")])


def test_shipped_distribution_matches_generator(world):
    d = class_distribution(world.meetings.values())
    for band, w in DEFAULT_BAND_WEIGHTS.items():
        assert d.weights[band] == pytest.approx(w, abs=0.02)


def test_identical_distributions_js_zero(world):
    d = class_distribution(world.meetings.values())
    p = d.probs(sorted(d.weights))
    assert js_divergence(p, p) == pytest.approx(0.0, abs=1e-12)
