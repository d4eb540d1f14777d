"""Seeded generator for a small meeting corpus in the shipped formats.

The generator stands in for real meeting data: it produces meetings grouped
into recordings, speaker-disjoint splits, organic turns that state facts,
injected questions whose wording reflects their four-axis label, and the KB
and web fixture documents those questions may need.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    Segment,
    Split,
    SplitAssignment,
    Transcript,
    Turn,
    inject_cross_meeting,
    inject_turn,
    schedule_injections,
    segment,
)
from .taxonomy import (
    CD,
    CL,
    DK,
    TE,
    ClassDistribution,
    ClassMapping,
    ComplexityLabel,
    default_mapping,
    sample_label,
)

DOMAINS = {"product": 0.42, "technical": 0.31, "ops": 0.18, "compliance": 0.09}
LANGUAGES = {"zh": 0.706, "en": 0.294}

TOPICS = {
    "product": ["pricing", "onboarding", "roadmap", "launch", "retention", "checkout"],
    "technical": ["latency", "migration", "cache", "gateway", "deployment", "monitoring"],
    "ops": ["vendor", "staffing", "budget", "logistics", "inventory", "shipping"],
    "compliance": ["audit", "retention policy", "privacy", "controls", "licensing", "reporting"],
}
PROJECTS = ["Atlas", "Beacon", "Cobalt", "Delta", "Ember", "Falcon", "Granite", "Harbor",
            "Iris", "Juniper", "Keystone", "Lumen", "Meridian", "Nimbus", "Onyx", "Pioneer"]
CODENAMES = ["orion", "vega", "lyra", "draco", "hydra", "cygnus", "aquila", "carina",
             "pavo", "tucana", "volans", "norma"]
FILLER = [
    "Okay, good, let's keep going.",
    "I think that makes sense for now.",
    "Can everyone see the shared screen?",
    "Let me check the numbers after the meeting.",
    "That's a fair point, we should revisit it.",
    "Sorry, could you repeat that last part?",
    "We are a bit behind schedule on this one.",
    "Right, and the team agreed with that last week.",
]

# phrasing per axis level; the router sees only this text
CD_PHRASE = {
    CD.NONE: ["", "right now"],
    CD.RECENT: ["a few minutes ago", "just before this"],
    CD.LONG_RANGE: ["at the start of the meeting", "much earlier today"],
    CD.CROSS_MEETING: ["across our previous meetings", "in the earlier sessions"],
}
CL_PHRASE = {
    CL.LOW: ["what is", "tell me"],
    CL.MEDIUM: ["summarize", "pull together"],
    CL.HIGH: ["what can we infer about", "explain the reasons behind"],
}
DK_PHRASE = {
    DK.GENERAL: ["", ""],
    DK.BASIC: ["in terms of our metrics", "using the usual team terms"],
    DK.EXPERT: ["under the regulatory policy", "per the technical standard"],
}
TE_PHRASE = {
    TE.LOW: ["", ""],
    TE.MEDIUM: ["and organize it as a list", "and structure the points"],
    TE.HIGH: ["then draft the action items with owners", "and plan the next steps with assignees"],
}


def query_kind(label: ComplexityLabel) -> str:
    if label.cd is CD.CROSS_MEETING:
        return "cross_meeting"
    if label.te is TE.HIGH:
        return "task_execution"
    return "factual"


def answer_source(label: ComplexityLabel) -> str:
    kind = query_kind(label)
    if kind == "cross_meeting":
        return "cross"
    if kind == "factual" and (label.dk is DK.EXPERT or label.cl is CL.HIGH):
        return "kb"
    return "meeting"


@dataclass
class SyntheticCorpus:
    meetings: dict
    splits: SplitAssignment
    kb: list = field(default_factory=list)
    web: list = field(default_factory=list)
    weights: ClassDistribution | None = None


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


def _weighted(rng, table):
    keys = list(table)
    p = np.array([table[k] for k in keys])
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def _fact_sentence(project, topic, value):
    return f"The {topic} target for {project} is {value} percent."


def _compose_query(label, rng, subject):
    parts = ["Hello Jiaojiao,", _pick(rng, CL_PHRASE[label.cl]), subject]
    for table, level in ((CD_PHRASE, label.cd), (DK_PHRASE, label.dk), (TE_PHRASE, label.te)):
        phrase = _pick(rng, table[level])
        if phrase:
            parts.append(phrase)
    return " ".join(parts) + "?"


def synthesize_corpus(n_meetings: int = 231, n_injected: int = 1180, seed: int = 0,
                      dist: ClassDistribution | None = None, mapping: ClassMapping | None = None,
                      organic: bool = True, unit_s: float = 1800.0,
                      spacing_s: float = 300.0) -> SyntheticCorpus:
    """Generate meetings, splits and injected questions.

    Injected questions are spread as evenly as possible (``n_injected //
    n_meetings`` per meeting plus one for a seeded subset) and placed on the
    ``spacing_s`` grid. With ``organic=False`` only injected turns are
    produced, which is enough for label statistics at large scale.
    """
    rng = np.random.default_rng(seed)
    dist = dist or ClassDistribution.default()
    mapping = mapping or default_mapping()
    per_meeting_max = int(unit_s // spacing_s)
    if n_injected > n_meetings * per_meeting_max:
        raise ValueError(f"cannot place {n_injected} questions in {n_meetings} meetings")

    # recordings of 1-4 half-hour meetings; splits assigned per recording
    recordings = []
    remaining = n_meetings
    while remaining:
        size = min(remaining, int(rng.integers(1, 5)))
        recordings.append(size)
        remaining -= size
    order = rng.permutation(len(recordings))
    split_of_rec = {}
    done = 0
    for r in order:
        frac = done / n_meetings
        split_of_rec[int(r)] = Split.TRAIN if frac < 0.7 else (Split.DEV if frac < 0.85 else Split.TEST)
        done += recordings[r]

    meetings = {}
    meeting_split = {}
    for r, size in enumerate(recordings):
        domain = _weighted(rng, DOMAINS)
        language = _weighted(rng, LANGUAGES)
        n_spk = int(rng.integers(5, 9))
        speakers = tuple(f"R{r:03d}-{k:02d}{'MF'[int(rng.integers(2))]}" for k in range(n_spk))
        for s in range(size):
            mid = f"R{r:03d}-S{s}"
            t = Transcript(meeting_id=mid, speakers=speakers, language=language, domain_tag=domain,
                           recording_id=f"R{r:03d}", duration_s=unit_s)
            t.metadata = {"facts": []}
            if organic:
                _fill_organic(t, rng, unit_s)
            meetings[mid] = t
            meeting_split[mid] = split_of_rec[r]
    splits = SplitAssignment.from_meetings(meetings.values(), meeting_split)
    by_split = {sp: sorted(m for m, v in meeting_split.items() if v is sp) for sp in Split}

    ids = list(meetings)
    counts = np.full(len(ids), n_injected // n_meetings)
    counts[rng.permutation(len(ids))[: n_injected % n_meetings]] += 1

    kb, web = [], []
    for mid, count in zip(ids, counts):
        t = meetings[mid]
        seg = Segment(mid, t.recording_id, 0, 0.0, unit_s, t.turns)
        points = schedule_injections(seg, spacing_s, dist, rng, mapping)
        chosen = sorted(rng.choice(len(points), size=int(count), replace=False))
        for i in chosen:
            point = points[i]
            label = sample_label(point.sampled_class, rng)
            _inject(t, point, label, rng, meetings, splits, by_split[meeting_split[mid]], kb, web,
                    organic)
    for t in meetings.values():
        del t.metadata
    return SyntheticCorpus(meetings, splits, kb, web, dist)


def _fill_organic(t: Transcript, rng, unit_s):
    topics = TOPICS[t.domain_tag]
    facts = []
    for _ in range(4):
        facts.append((_pick(rng, PROJECTS), _pick(rng, topics), int(rng.integers(5, 96))))
    t.metadata["facts"] = facts
    clock = float(rng.uniform(2, 10))
    k = 0
    while clock < unit_s - 5:
        dur = float(np.round(rng.uniform(3, 18), 3))
        if k % 3 == 0:
            project, topic, value = facts[(k // 3) % len(facts)]
            text = _fact_sentence(project, topic, value)
        else:
            text = _pick(rng, FILLER)
        speaker = t.speakers[int(rng.integers(len(t.speakers)))]
        start = float(np.round(clock, 3))
        end = min(float(np.round(clock + dur, 3)), unit_s)
        t.turns.append(Turn(speaker, start, end, text))
        clock += dur + float(rng.uniform(1, 25))
        k += 1


def _inject(t, point, label, rng, meetings, splits, same_split, kb, web, organic):
    kind = query_kind(label)
    source = answer_source(label)
    facts = t.metadata["facts"] or [(_pick(rng, PROJECTS), _pick(rng, TOPICS[t.domain_tag]), 50)]
    project, topic, value = facts[int(rng.integers(len(facts)))]
    meta = {"kind": kind, "answer_source": source, "project": project, "topic": topic}

    if kind == "cross_meeting":
        entity = f"{_pick(rng, CODENAMES)}{int(rng.integers(10, 100))}"
        # index into same_split with this meeting skipped, without copying the list
        self_pos = bisect.bisect_left(same_split, t.meeting_id)
        n_others = len(same_split) - 1
        picks = rng.choice(n_others, size=min(4, n_others), replace=False)
        linked = [same_split[i + (i >= self_pos)] for i in sorted(picks)]
        present = {4: 0.5, 3: 0.35, 2: 0.1, 1: 0.05}
        k = min(_weighted(rng, present), len(linked))
        holders = linked[:k]
        if organic:
            for m in holders:
                other = meetings[m]
                start = float(np.round(rng.uniform(10, other.duration - 20), 3))
                other.insert(Turn(other.speakers[int(rng.integers(len(other.speakers)))], start,
                                  start + 4.0, f"For the {entity.capitalize()} initiative we agreed on "
                                               f"the {topic} plan for {project}."))
        subject = f"how the {entity.capitalize()} initiative {topic} discussion for {project} evolved"
        gt = (f"Across {k} earlier meetings the {entity.capitalize()} initiative settled the {topic} plan "
              f"for {project}.")
        meta.update(entity=entity, linked_meetings=",".join(linked), holders=",".join(holders))
        text = _compose_query(label, rng, subject)
        inject_cross_meeting(meetings[linked[0]], t, splits, point, text, gt, label, metadata=meta)
        return

    if kind == "task_execution":
        owners = [t.speakers[int(i)] for i in rng.choice(len(t.speakers), size=2, replace=False)]
        subject = f"the {topic} work for {project}"
        gt = "\n".join([
            f"- Finalize the {topic} plan for {project} (owner: {owners[0]})",
            f"- Review the {topic} numbers with the team (owner: {owners[1]})",
        ])
        meta.update(owners=",".join(owners))
    elif source == "kb":
        code = f"POL-{int(rng.integers(100, 1000))}"
        doc_id = f"KB-{len(kb):04d}"
        days = int(rng.integers(7, 366))
        fact = f"Policy {code} requires {topic} reviews for {project} every {days} days."
        kb.append({"doc_id": doc_id, "text": f"{fact} The rule applies to all regulated "
                                              f"{t.domain_tag} projects and is audited yearly."})
        web.append({"doc_id": f"https://example.org/{code.lower()}",
                    "text": f"Industry note on {topic}: policies like {code} are common in "
                            f"{t.domain_tag} teams."})
        subject = f"the {topic} requirement of policy {code} for {project}"
        gt = fact
        meta.update(gold_doc=doc_id, policy=code)
    else:
        subject = f"the {topic} target for {project}"
        gt = _fact_sentence(project, topic, value)
    text = _compose_query(label, rng, subject)
    inject_turn(t, point, text, gt, label, metadata=meta)


def separable_dataset(n: int = 5000, dim: int = 576, n_classes: int = 4, seed: int = 0,
                      margin: float = 1.0, proportions=None):
    """Unit-norm points labelled by a random linear rule with a margin.

    Class scores are standard-normal projections; points whose top two
    scores differ by less than ``margin`` are redrawn, so the returned set is linearly separable by construction.
    Returns ``(X, y, V)`` with ``V`` the generating rule (dim x n_classes).
    """
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(dim, n_classes))
    V /= np.linalg.norm(V, axis=0)
    want = None
    if proportions is not None:
        p = np.asarray(proportions, dtype=float)
        want = np.floor(p / p.sum() * n).astype(int)
        want[0] += n - want.sum()
    X, y = [], []
    counts = np.zeros(n_classes, dtype=int)
    while len(y) < n:
        cand = rng.normal(size=(4096, dim))
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        s = cand @ V * np.sqrt(dim)
        top2 = np.sort(s, axis=1)[:, -2:]
        lab = np.argmax(s, axis=1)
        for row, c, ok in zip(cand, lab, top2[:, 1] - top2[:, 0] >= margin):
            if not ok or len(y) >= n:
                continue
            if want is not None and counts[c] >= want[c]:
                continue
            X.append(row)
            y.append(int(c))
            counts[c] += 1
    return np.array(X), np.array(y), V


# Mean judge scores per dimension for twelve reference systems
# (factual, user need, conciseness, structure, completeness).
REFERENCE_PROFILES = {
    "sys-01": (7.92, 7.08, 7.81, 7.47, 6.82),
    "sys-02": (7.61, 6.87, 7.69, 7.33, 6.54),
    "sys-03": (7.41, 6.65, 7.48, 7.19, 6.38),
    "sys-04": (3.59, 3.31, 4.01, 3.67, 3.05),
    "sys-05": (5.58, 5.07, 6.14, 6.08, 4.77),
    "sys-06": (7.31, 6.18, 7.06, 6.89, 5.56),
    "sys-07": (6.01, 5.29, 6.33, 6.17, 4.91),
    "sys-08": (7.32, 6.43, 7.74, 7.21, 5.91),
    "sys-09": (7.44, 6.53, 7.72, 7.24, 6.21),
    "sys-10": (5.38, 5.27, 6.12, 5.13, 6.17),
    "sys-11": (5.98, 5.63, 6.17, 5.68, 6.34),
    "sys-12": (7.50, 6.57, 7.76, 7.33, 6.36),
}


def human_link(auto, slope: float = 1.3):
    """Monotone, non-linear map from judge overall to the human scale."""
    return 1.0 + 9.0 / (1.0 + np.exp(-slope * (np.asarray(auto, dtype=float) - 5.5)))


def calibration_dataset(n: int = 400, seed: int = 0, slope: float = 2.0, noise_sd: float = 0.5):
    """Paired ``(auto, human)`` scores with ``human = human_link(auto) + noise``, auto ~ U(1, 10)."""
    rng = np.random.default_rng(seed)
    auto = rng.uniform(1.0, 10.0, n)
    return auto, human_link(auto, slope) + rng.normal(0.0, noise_sd, n)


def synthetic_judge_scores(n_per_model: int = 25, seed: int = 0, profiles=None,
                           dim_sd: float = 1.2, human_sd: float = 0.35, human_share: float = 0.5):
    """Score records ``{query_id, model, dims, human_overall?}``.

    Dimension scores scatter around each profile and are clipped to [1, 10].
    A seeded share of records carries a human overall score drawn as
    ``human_link(mean of dims) + noise``.
    """
    from .evalkit import DIMENSIONS

    rng = np.random.default_rng(seed)
    profiles = profiles or REFERENCE_PROFILES
    out = []
    for model in sorted(profiles):
        mu = np.asarray(profiles[model], dtype=float)
        for q in range(n_per_model):
            dims = np.clip(np.round(mu + rng.normal(0, dim_sd, mu.size), 2), 1.0, 10.0)
            rec = {"query_id": f"q{q:04d}", "model": model,
                   "dims": {d: float(v) for d, v in zip(DIMENSIONS, dims)}}
            if rng.random() < human_share:
                h = human_link(dims.mean()) + rng.normal(0, human_sd)
                rec["human_overall"] = float(np.round(np.clip(h, 1.0, 10.0), 2))
            out.append(rec)
    return out


def inject_existing(meetings: dict, seed: int = 0, spacing_s: float = 300.0, unit_s: float = 1800.0,
                    dist: ClassDistribution | None = None, mapping: ClassMapping | None = None,
                    split_fracs=(0.7, 0.15)):
    """Inject templated questions into ingested meetings and assign splits.

    Each question asks about the last organic turn before its injection
    point, which becomes the ground truth. Splits are drawn per recording.
    Returns ``(meetings, SplitAssignment)``; meetings are modified in place.
    """
    rng = np.random.default_rng(seed)
    mapping = mapping or default_mapping()
    recordings = sorted({t.recording_id for t in meetings.values()})
    order = rng.permutation(len(recordings))
    rec_split = {}
    for rank, i in enumerate(order):
        frac = rank / len(recordings)
        rec_split[recordings[i]] = (Split.TRAIN if frac < split_fracs[0] else
                                    Split.DEV if frac < split_fracs[0] + split_fracs[1] else Split.TEST)
    meeting_split = {m: rec_split[t.recording_id] for m, t in sorted(meetings.items())}
    for mid in sorted(meetings):
        t = meetings[mid]
        for seg in segment(t, unit_s):
            for point in schedule_injections(seg, spacing_s, dist, rng, mapping):
                prior = [x for x in t.turns if not x.injected and x.start_s < point.time_s]
                if not prior:
                    continue
                label = sample_label(point.sampled_class, rng)
                text = _compose_query(label, rng, "the point raised just before")
                meta = {"kind": query_kind(label), "answer_source": "meeting"}
                inject_turn(t, point, text, prior[-1].text, label, metadata=meta)
    return meetings, SplitAssignment.from_meetings(meetings.values(), meeting_split)
