"""Meeting transcripts: parsing, segmentation, question injection and split checks."""
from __future__ import annotations

import bisect
import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .errors import DuplicateTurn, EmptyCorpus, ParseError, SameMeeting, SplitViolation
from .taxonomy import (
    CD,
    ClassDistribution,
    ClassMapping,
    ComplexityClass,
    ComplexityLabel,
    default_mapping,
    sample_class,
)


class Split(Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


@dataclass
class Turn:
    speaker: str
    start_s: float
    end_s: float
    text: str
    injected: bool = False
    complexity: ComplexityLabel | None = None
    ground_truth: str | None = None
    source_meeting_id: str | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.end_s < self.start_s:
            raise ValueError(f"turn ends before it starts ({self.start_s} > {self.end_s})")
        if self.injected and self.complexity is None:
            raise ValueError("injected turn without a complexity label")

    def to_json(self):
        out = {
            "speaker": self.speaker,
            "start_s": self.start_s,
            "end_s": self.end_s,
            "text": self.text,
        }
        if self.injected:
            out["injected"] = True
        if self.complexity is not None:
            out["complexity"] = self.complexity.to_list()
        if self.ground_truth is not None:
            out["ground_truth"] = self.ground_truth
        if self.source_meeting_id is not None:
            out["source_meeting_id"] = self.source_meeting_id
        if self.metadata:
            out["metadata"] = dict(self.metadata)
        return out


@dataclass
class Transcript:
    meeting_id: str
    turns: list = field(default_factory=list)
    speakers: tuple = ()
    language: str = "other"
    domain_tag: str = ""
    recording_id: str | None = None
    duration_s: float | None = None

    def __post_init__(self):
        if self.recording_id is None:
            self.recording_id = self.meeting_id
        if not self.speakers:
            seen = dict.fromkeys(t.speaker for t in self.turns)
            self.speakers = tuple(seen)
        else:
            self.speakers = tuple(self.speakers)

    @property
    def duration(self):
        if self.duration_s is not None:
            return self.duration_s
        return max((t.end_s for t in self.turns), default=0.0)

    @property
    def injected_turns(self):
        return [t for t in self.turns if t.injected]

    def validate(self):
        starts = [t.start_s for t in self.turns]
        if starts != sorted(starts):
            raise ValueError(f"{self.meeting_id}: turns not ordered by start time")
        speakers = set(self.speakers)
        for t in self.turns:
            if t.speaker not in speakers:
                raise ValueError(f"{self.meeting_id}: unknown speaker {t.speaker!r}")

    def insert(self, turn: Turn):
        """Insert keeping start-time order (after existing turns at the same time)."""
        keys = [t.start_s for t in self.turns]
        self.turns.insert(bisect.bisect_right(keys, turn.start_s), turn)
        if turn.speaker not in self.speakers:
            self.speakers = self.speakers + (turn.speaker,)

    def most_active_speaker(self):
        counts = Counter(t.speaker for t in self.turns if not t.injected)
        if not counts:
            return self.speakers[0] if self.speakers else "user"
        best = max(counts.values())
        return next(s for s in self.speakers if counts.get(s) == best)


# ---------------------------------------------------------------- TextGrid

_KV = re.compile(r"^([A-Za-z][\w ?]*?)\s*=\s*(.*)$")
_ITEM = re.compile(r"^item\s*\[(\d+)\]\s*:$")
_INTERVAL = re.compile(r"^intervals\s*\[(\d+)\]\s*:$")
_INTERVALS_SIZE = re.compile(r"^intervals\s*:\s*size\s*=\s*(\d+)$")


class _Lines:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    def next_nonblank(self):
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        return None

    @property
    def lineno(self):
        return self.pos

    def peek(self):
        save = self.pos
        line = self.next_nonblank()
        self.pos = save
        return line


def _read_string(lines: _Lines, rest: str, lineno: int) -> str:
    """Read a Praat quoted string that may continue over several lines."""
    if not rest.startswith('"'):
        raise ParseError(f"expected quoted string, got {rest!r}", lineno)
    buf = rest[1:]
    parts = []
    while True:
        i = 0
        closed = False
        out = []
        while i < len(buf):
            ch = buf[i]
            if ch == '"':
                if i + 1 < len(buf) and buf[i + 1] == '"':
                    out.append('"')
                    i += 2
                    continue
                closed = True
                if buf[i + 1:].strip():
                    raise ParseError("trailing characters after string", lines.lineno)
                break
            out.append(ch)
            i += 1
        parts.append("".join(out))
        if closed:
            return "\n".join(parts)
        if lines.pos >= len(lines.lines):
            raise ParseError("unterminated string", lineno)
        buf = lines.lines[lines.pos]
        lines.pos += 1


def _expect_kv(lines: _Lines, key: str):
    line = lines.next_nonblank()
    if line is None:
        raise ParseError(f"missing field {key!r} at end of file", lines.lineno)
    m = _KV.match(line)
    if not m or m.group(1).strip() != key:
        raise ParseError(f"expected {key!r}, got {line!r}", lines.lineno)
    return m.group(2).strip()


def _expect_float(lines, key):
    raw = _expect_kv(lines, key)
    try:
        return float(raw)
    except ValueError:
        raise ParseError(f"{key} is not a number: {raw!r}", lines.lineno) from None


def _expect_str(lines, key):
    raw = _expect_kv(lines, key)
    return _read_string(lines, raw, lines.lineno)


def parse_textgrid(data, meeting_id="textgrid", **meta) -> Transcript:
    """Parse the long-form interval-tier TextGrid subset.

    Each non-empty interval becomes one turn whose speaker is the tier name.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    lines = _Lines(data)
    if _expect_str(lines, "File type") != "ooTextFile":
        raise ParseError("not an ooTextFile", lines.lineno)
    if _expect_str(lines, "Object class") != "TextGrid":
        raise ParseError("object class is not TextGrid", lines.lineno)
    xmin = _expect_float(lines, "xmin")
    xmax = _expect_float(lines, "xmax")
    if xmax < xmin:
        raise ParseError("file xmax < xmin", lines.lineno)
    line = lines.next_nonblank()
    if line is None or not line.startswith("tiers?"):
        raise ParseError(f"expected 'tiers? <exists>', got {line!r}", lines.lineno)
    n_tiers = int(_expect_float(lines, "size"))
    line = lines.next_nonblank()
    if line is None or not re.match(r"^item\s*\[\s*\]\s*:$", line):
        raise ParseError(f"expected 'item []:', got {line!r}", lines.lineno)

    turns = []
    speakers = []
    for k in range(1, n_tiers + 1):
        line = lines.next_nonblank()
        m = _ITEM.match(line or "")
        if not m or int(m.group(1)) != k:
            raise ParseError(f"expected 'item [{k}]:', got {line!r}", lines.lineno)
        klass = _expect_str(lines, "class")
        if klass != "IntervalTier":
            raise ParseError(f"unsupported tier class {klass!r}", lines.lineno)
        name = _expect_str(lines, "name")
        _expect_float(lines, "xmin")
        _expect_float(lines, "xmax")
        line = lines.next_nonblank()
        m = _INTERVALS_SIZE.match(line or "")
        if not m:
            raise ParseError(f"expected 'intervals: size = N', got {line!r}", lines.lineno)
        n_int = int(m.group(1))
        speakers.append(name)
        prev_end = None
        for j in range(1, n_int + 1):
            line = lines.next_nonblank()
            m = _INTERVAL.match(line or "")
            if not m or int(m.group(1)) != j:
                raise ParseError(f"expected 'intervals [{j}]:', got {line!r}", lines.lineno)
            a = _expect_float(lines, "xmin")
            b = _expect_float(lines, "xmax")
            if b < a:
                raise ParseError(f"interval bounds decrease ({a} > {b})", lines.lineno)
            if prev_end is not None and a < prev_end:
                raise ParseError(f"interval starts at {a} before previous end {prev_end}", lines.lineno)
            prev_end = b
            text = _expect_str(lines, "text")
            if text.strip():
                turns.append(Turn(speaker=name, start_s=a, end_s=b, text=text))
    trailing = lines.next_nonblank()
    if trailing is not None:
        raise ParseError(f"unexpected content {trailing!r}", lines.lineno)
    turns.sort(key=lambda t: t.start_s)
    return Transcript(meeting_id=meeting_id, turns=turns, speakers=tuple(speakers),
                      duration_s=xmax, **meta)


def _quote(text):
    return '"' + text.replace('"', '""') + '"'


def emit_textgrid(transcript: Transcript) -> str:
    """Serialise to the long TextGrid form, padding gaps with empty intervals."""
    xmax = transcript.duration
    out = [
        'File type = "ooTextFile"',
        'Object class = "TextGrid"',
        "",
        "xmin = 0.0",
        f"xmax = {xmax!r}",
        "tiers? <exists>",
        f"size = {len(transcript.speakers)}",
        "item []:",
    ]
    for k, speaker in enumerate(transcript.speakers, 1):
        own = sorted((t for t in transcript.turns if t.speaker == speaker), key=lambda t: t.start_s)
        intervals = []
        cursor = 0.0
        for t in own:
            if t.start_s < cursor:
                raise ValueError(f"overlapping turns for speaker {speaker!r} at {t.start_s}")
            if t.start_s > cursor:
                intervals.append((cursor, t.start_s, ""))
            intervals.append((t.start_s, t.end_s, t.text))
            cursor = t.end_s
        if cursor < xmax or not intervals:
            intervals.append((cursor, xmax, ""))
        out += [
            f"    item [{k}]:",
            '        class = "IntervalTier"',
            f"        name = {_quote(speaker)}",
            "        xmin = 0.0",
            f"        xmax = {xmax!r}",
            f"        intervals: size = {len(intervals)}",
        ]
        for j, (a, b, text) in enumerate(intervals, 1):
            out += [
                f"            intervals [{j}]:",
                f"                xmin = {float(a)!r}",
                f"                xmax = {float(b)!r}",
                f"                text = {_quote(text)}",
            ]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- JSONL

_META_FIELDS = ("language", "domain_tag", "recording_id", "duration_s")


def _parse_complexity(value, lineno):
    if value is None:
        return None
    try:
        if isinstance(value, Mapping):
            value = [value["cl"], value["cd"], value["dk"], value["te"]]
        return ComplexityLabel.from_list(value)
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad complexity {value!r}: {exc}", lineno) from None


def _turn_from_obj(obj, lineno):
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", lineno)
    try:
        speaker = str(obj["speaker"])
        start, end = float(obj["start_s"]), float(obj["end_s"])
        text = obj["text"]
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", lineno) from None
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), lineno) from None
    if not isinstance(text, str):
        raise ParseError("text must be a string", lineno)
    meta = obj.get("metadata") or {}
    if not isinstance(meta, dict):
        raise ParseError("metadata must be an object", lineno)
    try:
        return Turn(
            speaker=speaker,
            start_s=start,
            end_s=end,
            text=text,
            injected=bool(obj.get("injected", False)),
            complexity=_parse_complexity(obj.get("complexity"), lineno),
            ground_truth=obj.get("ground_truth"),
            source_meeting_id=obj.get("source_meeting_id"),
            metadata={str(k): str(v) for k, v in meta.items()},
        )
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None


def _iter_json_lines(data):
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    for lineno, line in enumerate(data.splitlines(), 1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None


def parse_jsonl_corpus(data) -> dict:
    """Parse a multi-meeting JSONL file into ``{meeting_id: Transcript}``.

    Lines without ``meeting_id`` belong to the meeting ``"default"``. Meeting
    level fields (language, domain_tag, recording_id, duration_s) are taken
    from the first line of each meeting that carries them.
    """
    turns = defaultdict(list)
    meta = defaultdict(dict)
    seen = {}
    for lineno, obj in _iter_json_lines(data):
        turn = _turn_from_obj(obj, lineno)
        mid = str(obj.get("meeting_id", "default"))
        key = (mid, turn.speaker, turn.start_s)
        if key in seen:
            raise DuplicateTurn(
                f"speaker {turn.speaker!r} already has a turn at {turn.start_s} (line {seen[key]})",
                lineno,
            )
        seen[key] = lineno
        turns[mid].append(turn)
        for f in _META_FIELDS:
            if f in obj and f not in meta[mid]:
                meta[mid][f] = obj[f]
    out = {}
    for mid, ts in turns.items():
        ts.sort(key=lambda t: t.start_s)
        out[mid] = Transcript(meeting_id=mid, turns=ts, **meta[mid])
    return out


def parse_jsonl_turns(data, meeting_id=None) -> Transcript:
    """Parse a single-meeting JSONL turn file."""
    meetings = parse_jsonl_corpus(data)
    if not meetings:
        return Transcript(meeting_id=meeting_id or "default")
    if len(meetings) > 1:
        raise ParseError(f"expected one meeting, found {len(meetings)}: {sorted(meetings)}")
    (t,) = meetings.values()
    if meeting_id is not None:
        t.meeting_id = meeting_id
    return t


def emit_jsonl(transcripts) -> str:
    lines = []
    for t in _meetings(transcripts):
        head = {"meeting_id": t.meeting_id, "language": t.language, "domain_tag": t.domain_tag,
                "recording_id": t.recording_id}
        if t.duration_s is not None:
            head["duration_s"] = t.duration_s
        for turn in t.turns:
            lines.append(json.dumps({**head, **turn.to_json()}, ensure_ascii=False, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def _meetings(corpus) -> list:
    if isinstance(corpus, Transcript):
        return [corpus]
    if isinstance(corpus, Mapping):
        return list(corpus.values())
    return list(corpus)


# ---------------------------------------------------------------- segmentation

@dataclass
class Segment:
    segment_id: str
    recording_id: str
    index: int
    start_s: float
    end_s: float
    turns: list

    @property
    def duration(self):
        return self.end_s - self.start_s

    def to_transcript(self, source: Transcript) -> Transcript:
        """A standalone meeting with times rebased to the segment start."""
        turns = [
            Turn(**{**t.__dict__, "start_s": t.start_s - self.start_s, "end_s": t.end_s - self.start_s,
                    "metadata": dict(t.metadata)})
            for t in self.turns
        ]
        return Transcript(
            meeting_id=self.segment_id,
            turns=turns,
            speakers=source.speakers,
            language=source.language,
            domain_tag=source.domain_tag,
            recording_id=source.recording_id,
            duration_s=self.duration,
        )


def segment(transcript: Transcript, unit_s: float = 1800.0) -> list:
    """Cut a meeting into consecutive windows; turns go to the window of their start."""
    if unit_s <= 0:
        raise ValueError("unit_s must be positive")
    duration = transcript.duration
    n = max(1, math.ceil(duration / unit_s - 1e-9))
    segments = [
        Segment(
            segment_id=f"{transcript.meeting_id}-seg{k}",
            recording_id=transcript.recording_id,
            index=k,
            start_s=k * unit_s,
            end_s=min((k + 1) * unit_s, duration) if k == n - 1 else (k + 1) * unit_s,
            turns=[],
        )
        for k in range(n)
    ]
    for t in transcript.turns:
        k = min(int(t.start_s // unit_s), n - 1)
        segments[k].turns.append(t)
    return segments


# ---------------------------------------------------------------- injection

@dataclass(frozen=True)
class InjectionPoint:
    segment_id: str
    offset_s: float
    sampled_class: ComplexityClass | str
    segment_start_s: float = 0.0

    @property
    def time_s(self):
        return self.segment_start_s + self.offset_s


def schedule_injections(seg, spacing_s: float = 300.0, dist: ClassDistribution | None = None,
                        rng: np.random.Generator | None = None,
                        mapping: ClassMapping | None = None) -> list:
    """Injection points every ``spacing_s`` seconds inside a segment.

    ``seg`` is a :class:`Segment` or a :class:`Transcript`. Offsets are
    relative to the segment start and satisfy ``0 < offset <= duration``.
    """
    if spacing_s <= 0:
        raise ValueError("spacing_s must be positive")
    dist = dist or ClassDistribution.default()
    rng = rng if rng is not None else np.random.default_rng(0)
    mapping = mapping or default_mapping()
    if isinstance(seg, Segment):
        seg_id, start, duration = seg.segment_id, seg.start_s, seg.duration
    else:
        seg_id, start, duration = seg.meeting_id, 0.0, seg.duration
    n = int(math.floor(duration / spacing_s + 1e-9))
    return [
        InjectionPoint(seg_id, k * spacing_s, sample_class(dist, rng, mapping), start)
        for k in range(1, n + 1)
    ]


def _label_for(point: InjectionPoint, label, rng=None):
    if label is not None:
        return label
    cls = point.sampled_class
    if isinstance(cls, ComplexityClass):
        return sorted(cls.cells)[0]
    raise ValueError("a complexity label is required when the point carries no class")


def inject_turn(target: Transcript, point: InjectionPoint, turn_text: str, gt: str | None = None,
                label: ComplexityLabel | None = None, speaker: str | None = None,
                metadata: Mapping | None = None) -> Turn:
    """Insert a zero-length injected query into ``target`` at the point's time."""
    turn = Turn(
        speaker=speaker or target.most_active_speaker(),
        start_s=point.time_s,
        end_s=point.time_s,
        text=turn_text,
        injected=True,
        complexity=_label_for(point, label),
        ground_truth=gt,
        metadata=dict(metadata or {}),
    )
    target.insert(turn)
    return turn


@dataclass
class SplitAssignment:
    meetings: dict
    speakers: dict = field(default_factory=dict)

    def __getitem__(self, meeting_id) -> Split:
        return self.meetings[meeting_id]

    def get(self, meeting_id):
        return self.meetings.get(meeting_id)

    @classmethod
    def from_meetings(cls, corpus, meeting_splits: Mapping) -> "SplitAssignment":
        """Derive the speaker map from meeting membership (first meeting wins)."""
        speakers = {}
        for t in _meetings(corpus):
            split = meeting_splits[t.meeting_id]
            for s in t.speakers:
                speakers.setdefault(s, split)
        return cls(dict(meeting_splits), speakers)

    def to_json(self):
        return {
            "meetings": {k: v.value for k, v in sorted(self.meetings.items())},
            "speakers": {k: v.value for k, v in sorted(self.speakers.items())},
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            {k: Split(v) for k, v in obj["meetings"].items()},
            {k: Split(v) for k, v in obj.get("speakers", {}).items()},
        )


def inject_cross_meeting(source: Transcript, target: Transcript, splits: SplitAssignment,
                         point: InjectionPoint, turn_text: str, gt: str | None = None,
                         label: ComplexityLabel | None = None, speaker: str | None = None,
                         metadata: Mapping | None = None) -> Turn:
    """Inject a question into ``target`` that draws on ``source``.

    Both meetings must differ and belong to the same split. The injected
    label always carries cross-meeting context dependency.
    """
    if source.meeting_id == target.meeting_id:
        raise SameMeeting(f"source and target are both {source.meeting_id!r}")
    s_split, t_split = splits.get(source.meeting_id), splits.get(target.meeting_id)
    if s_split is None or t_split is None or s_split != t_split:
        raise SplitViolation(
            f"{source.meeting_id} ({getattr(s_split, 'value', None)}) -> "
            f"{target.meeting_id} ({getattr(t_split, 'value', None)})"
        )
    base = _label_for(point, label)
    label = ComplexityLabel(base.cl, CD.CROSS_MEETING, base.dk, base.te)
    turn = inject_turn(target, point, turn_text, gt, label, speaker, metadata)
    turn.source_meeting_id = source.meeting_id
    return turn


# ---------------------------------------------------------------- verification

@dataclass
class LeakageReport:
    speaker_leaks: list = field(default_factory=list)
    injection_leaks: list = field(default_factory=list)
    recording_leaks: list = field(default_factory=list)
    unassigned_meetings: list = field(default_factory=list)

    @property
    def ok(self):
        return not (self.speaker_leaks or self.injection_leaks or self.recording_leaks
                    or self.unassigned_meetings)

    def to_json(self):
        return {**asdict(self), "ok": self.ok}


def verify_splits(corpus, splits: SplitAssignment) -> LeakageReport:
    report = LeakageReport()
    meetings = _meetings(corpus)
    speaker_splits = defaultdict(set)
    recording_splits = defaultdict(set)
    for t in meetings:
        split = splits.get(t.meeting_id)
        if split is None:
            report.unassigned_meetings.append(t.meeting_id)
            continue
        recording_splits[t.recording_id].add(split)
        for s in set(t.speakers) | {turn.speaker for turn in t.turns}:
            speaker_splits[s].add(split)
    for s, declared in splits.speakers.items():
        if s in speaker_splits:
            speaker_splits[s].add(declared)
    for s in sorted(speaker_splits):
        if len(speaker_splits[s]) > 1:
            report.speaker_leaks.append(
                {"speaker": s, "splits": sorted(x.value for x in speaker_splits[s])})
    for rec in sorted(recording_splits):
        if len(recording_splits[rec]) > 1:
            report.recording_leaks.append(
                {"recording_id": rec, "splits": sorted(x.value for x in recording_splits[rec])})
    for t in meetings:
        target_split = splits.get(t.meeting_id)
        for i, turn in enumerate(t.turns):
            if not turn.injected or turn.source_meeting_id is None:
                continue
            src_split = splits.get(turn.source_meeting_id)
            if src_split != target_split:
                report.injection_leaks.append({
                    "meeting_id": t.meeting_id,
                    "turn_index": i,
                    "start_s": turn.start_s,
                    "source_meeting_id": turn.source_meeting_id,
                    "source_split": getattr(src_split, "value", None),
                    "target_split": getattr(target_split, "value", None),
                })
    report.unassigned_meetings.sort()
    return report


def class_distribution(corpus, mapping: ClassMapping | None = None) -> ClassDistribution:
    """Band frequencies over all injected turns."""
    mapping = mapping or default_mapping()
    counts = Counter()
    for t in _meetings(corpus):
        for turn in t.turns:
            if turn.injected:
                counts[mapping.consolidate(turn.complexity).band] += 1
    total = sum(counts.values())
    if total == 0:
        raise EmptyCorpus("no injected turns")
    return ClassDistribution({band: n / total for band, n in sorted(counts.items())})


def injected_turns(corpus) -> Iterable:
    """Yield ``(transcript, turn)`` for every injected turn in corpus order."""
    for t in _meetings(corpus):
        for turn in t.turns:
            if turn.injected:
                yield t, turn
