"""Dual-lane query handling on a virtual clock.

A query is routed, then served by the Talker lane (fast, shallow), the
Planner lane (slow, tool-using) or both at once. When the router is unsure,
both lanes start and the Planner's first token acts as a gate: the sentinel
token within the window releases the cached Talker answer, otherwise the
Talker is interrupted and the Planner answers.

Lanes are generators of timed events merged by :class:`LaneScheduler`.
Cancelling a lane closes its generator, so no event of a cancelled lane
can appear after the cancellation time.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
import re
import time
import urllib.request
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

from .errors import BackendFailure, EmptyTraces
from .policy import EvidenceState, ToolAction
from .taxonomy import CD, CL, DK, TE, ComplexityLabel, RoutingAction
from .text import count_tokens, token_pieces, tokenize
from .tools import _STOP, cross_session_aggregate, entity_tokens, hybrid_search, meet_sum, \
    web_search_mock

log = logging.getLogger(__name__)


class Lane(Enum):
    TALKER = "Talker"
    PLANNER = "Planner"


class GateOutcome(Enum):
    CONFIDENT_FAST = "ConfidentFast"
    CONFIDENT_SLOW = "ConfidentSlow"
    SENTINEL_FAST = "SentinelFast"
    SENTINEL_TIMEOUT = "SentinelTimeout"
    # annotations
    MISS_TRIGGER = "MissTrigger"
    LATE_TRIGGER = "LateTrigger"


RESOLUTIONS = (GateOutcome.CONFIDENT_FAST, GateOutcome.CONFIDENT_SLOW,
               GateOutcome.SENTINEL_FAST, GateOutcome.SENTINEL_TIMEOUT)


class Mode(Enum):
    ROUTING_ONLY = "routing_only"
    TOOLS_ONLY = "tools_only"
    SERIAL = "serial"
    PARALLEL = "parallel"


EVENTS = ("Received", "RouterDecision", "TalkerFirstToken", "TalkerToken", "SentinelEmitted",
          "GateResolved", "TalkerInterrupted", "ToolCall", "HopCompleted", "Composed", "Responded",
          "BackendFailure")


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class GateConfig:
    confidence_threshold: float = 0.75
    sentinel_window_ms: int = 400
    sentinel_target_ms: int = 300
    sentinel_token: str = "T"

    def __post_init__(self):
        if not (0 < self.sentinel_target_ms <= self.sentinel_window_ms):
            raise ValueError("need 0 < sentinel_target_ms <= sentinel_window_ms")


@dataclass(frozen=True)
class SentinelDelay:
    """Lognormal sentinel delay with a point mass on "never emitted".

    ``p_exceed`` is P(delay > ``threshold_ms``) given that the sentinel is
    emitted; ``sigma`` is solved from it around ``median_ms``.
    """

    median_ms: float = 250.0
    p_exceed: float = 0.031 / (1 - 0.018)
    threshold_ms: float = 400.0
    p_absent: float = 0.018

    def __post_init__(self):
        if not (0 < self.p_exceed < 0.5) or not (0 <= self.p_absent < 1):
            raise ValueError("need 0 < p_exceed < 0.5 and 0 <= p_absent < 1")
        if not (0 < self.median_ms < self.threshold_ms):
            raise ValueError("median must lie below the threshold")

    @property
    def sigma(self):
        return math.log(self.threshold_ms / self.median_ms) / stats.norm.isf(self.p_exceed)

    def from_draws(self, u_absent, z):
        """Delay in ms (None when absent) from a uniform and a standard normal draw."""
        if u_absent < self.p_absent:
            return None
        return self.median_ms * math.exp(self.sigma * z)


@dataclass(frozen=True)
class BackendTiming:
    talker_first_ms: float = 210.0
    talker_per_token_ms: float = 30.0
    planner_first_ms: float = 520.0
    planner_per_token_ms: float = 310.0
    router_ms: float = 1.0
    sentinel: SentinelDelay = SentinelDelay()

    def __post_init__(self):
        vals = (self.talker_first_ms, self.talker_per_token_ms, self.planner_first_ms,
                self.planner_per_token_ms, self.router_ms)
        if any(v < 0 for v in vals):
            raise ValueError("timings must be non-negative")


@dataclass(frozen=True)
class ToolTiming:
    kb_ms: float = 350.0
    cross_ms: float = 900.0
    web_ms: float = 1200.0
    meet_sum_ms: float = 250.0

    def of(self, tool: ToolAction):
        return {ToolAction.KB_RETRIEVAL: self.kb_ms, ToolAction.CROSS_MEETING: self.cross_ms,
                ToolAction.WEB: self.web_ms}[tool]


# ---------------------------------------------------------------- traces

@dataclass(frozen=True)
class TraceEvent:
    t_ms: float
    event: str
    detail: dict = field(default_factory=dict)


@dataclass
class ExecutionTrace:
    query_id: str
    events: list = field(default_factory=list)
    lane_used: Lane | None = None
    talker_tokens_k: float = 0.0
    planner_tokens_k: float = 0.0
    gate_outcome: GateOutcome | None = None
    gate_annotation: GateOutcome | None = None
    mode: Mode = Mode.PARALLEL
    band: str | None = None

    def add(self, t_ms, event, **detail):
        if event not in EVENTS:
            raise ValueError(f"unknown event {event!r}")
        if self.events:
            last = self.events[-1]
            if t_ms < last.t_ms:
                raise ValueError(f"event {event} at {t_ms} precedes {last.event} at {last.t_ms}")
            if last.event == "Responded":
                raise ValueError("no events after Responded")
        self.events.append(TraceEvent(float(t_ms), event, detail))

    @property
    def latency_ms(self):
        for ev in reversed(self.events):
            if ev.event == "Responded":
                return ev.t_ms
        raise ValueError(f"trace {self.query_id} has no Responded event")

    @property
    def latency_s(self):
        return self.latency_ms / 1000.0

    @property
    def tokens_k(self):
        return self.talker_tokens_k + self.planner_tokens_k

    @property
    def tool_calls(self):
        return [ev.detail["tool"] for ev in self.events if ev.event == "ToolCall"]

    def names(self):
        return [ev.event for ev in self.events]

    def validate(self):
        names = self.names()
        assert names and names[-1] == "Responded", "Responded must be last"
        assert names.count("GateResolved") <= 1, "gate resolved twice"
        ts = [ev.t_ms for ev in self.events]
        assert all(a <= b for a, b in zip(ts, ts[1:])), "timestamps decrease"
        if "TalkerInterrupted" in names:
            cut = names.index("TalkerInterrupted")
            assert not {"TalkerToken", "TalkerFirstToken"} & set(names[cut:]), "token after interrupt"
        return True

    def to_jsonl(self):
        return "".join(
            json.dumps({"query_id": self.query_id, "t_ms": ev.t_ms, "event": ev.event,
                        "detail": ev.detail}, sort_keys=True) + "\n"
            for ev in self.events
        )

    def summary(self):
        return {
            "query_id": self.query_id,
            "latency_s": self.latency_s,
            "lane_used": self.lane_used.value if self.lane_used else None,
            "gate_outcome": self.gate_outcome.value if self.gate_outcome else None,
            "gate_annotation": self.gate_annotation.value if self.gate_annotation else None,
            "talker_tokens_k": self.talker_tokens_k,
            "planner_tokens_k": self.planner_tokens_k,
            "tool_calls": self.tool_calls,
            "band": self.band,
        }


# ---------------------------------------------------------------- clock and scheduler

class VirtualClock:
    def __init__(self, start_ms: float = 0.0):
        self.now_ms = float(start_ms)

    def advance_to(self, t_ms):
        if t_ms < self.now_ms:
            raise ValueError(f"clock cannot go back from {self.now_ms} to {t_ms}")
        self.now_ms = float(t_ms)

    def now(self):
        return self.now_ms


class WallClock:
    """Monotonic wall time in ms since construction (live mode)."""

    def __init__(self):
        self._t0 = time.monotonic()

    def now(self):
        return (time.monotonic() - self._t0) * 1000.0

    def advance_to(self, t_ms):
        delay = (t_ms - self.now()) / 1000.0
        if delay > 0:
            time.sleep(delay)


class LaneScheduler:
    """Merge timed event streams from lane generators in time order.

    Each source yields ``(t_ms, event, detail)`` with non-decreasing times.
    Equal times are ordered by source priority, then by insertion.
    """

    def __init__(self, clock):
        self.clock = clock
        self._heap = []
        self._sources = {}
        self._seq = 0

    def start(self, name, gen, priority=1):
        self._sources[name] = (gen, priority)
        self._pull(name)

    def timer(self, name, t_ms, priority=0):
        self.start(name, iter([(t_ms, name, {})]), priority)

    def cancel(self, name):
        src = self._sources.pop(name, None)
        if src is not None:
            src[0].close() if hasattr(src[0], "close") else None

    def active(self, name):
        return name in self._sources

    def _pull(self, name):
        gen, prio = self._sources[name]
        try:
            t, ev, detail = next(gen)
        except StopIteration:
            del self._sources[name]
            return
        self._seq += 1
        heapq.heappush(self._heap, (t, prio, self._seq, name, ev, detail))

    def __iter__(self):
        while self._heap:
            t, _, _, name, ev, detail = heapq.heappop(self._heap)
            if name not in self._sources:
                continue  # cancelled after this item was queued
            self.clock.advance_to(t)
            self._pull(name)
            yield name, t, ev, detail


# ---------------------------------------------------------------- backends

@dataclass
class Generation:
    text: str
    offsets_ms: list  # per token, relative to the call start

    @property
    def n_tokens(self):
        return len(self.offsets_ms)


class SimulatedBackend:
    """Streams a given target text with a first-token / per-token timing model."""

    def __init__(self, first_ms, per_token_ms, fail=False):
        self.first_ms, self.per_token_ms, self.fail = first_ms, per_token_ms, fail

    def generate(self, prompt, max_tokens=512, target=None) -> Generation:
        if self.fail:
            raise BackendFailure("simulated backend failure")
        pieces = token_pieces(target or "")[:max_tokens] or ["."]
        offs = [self.first_ms + i * self.per_token_ms for i in range(len(pieces))]
        return Generation(target or "", offs)


class RemoteBackend:
    """HTTP JSON backend: POST {prompt, max_tokens}; response lines {token, t_ms}."""

    def __init__(self, url, timeout_s=30.0):
        self.url, self.timeout_s = url, timeout_s

    def generate(self, prompt, max_tokens=512, target=None) -> Generation:
        body = json.dumps({"prompt": prompt, "max_tokens": int(max_tokens)}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        tokens, offs = [], []
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                for raw in resp:
                    line = raw.decode("utf-8").strip()
                    if not line:
                        continue
                    obj = json.loads(line)
                    tokens.append(str(obj["token"]))
                    offs.append(float(obj["t_ms"]))
        except (OSError, ValueError, KeyError) as exc:
            raise BackendFailure(f"remote backend {self.url}: {exc}") from exc
        if not tokens:
            raise BackendFailure(f"remote backend {self.url} returned no tokens")
        return Generation("".join(tokens).strip(), offs)


@dataclass
class Backends:
    talker: object
    planner: object

    @classmethod
    def simulated(cls, timing: BackendTiming | None = None):
        timing = timing or BackendTiming()
        return cls(SimulatedBackend(timing.talker_first_ms, timing.talker_per_token_ms),
                   SimulatedBackend(timing.planner_first_ms, timing.planner_per_token_ms))


# ---------------------------------------------------------------- tools and plan cards

class Toolbox:
    """Per-query tool access: in-meeting context, KB, cross-session history and web."""

    def __init__(self, meeting_index=None, kb_index=None, history=None, web=None,
                 participants=(), context_tokens=0, recent_tokens=0, context_k=3, kb_k=3,
                 web_k=3, cross_window=6, mix=0.5):
        self.meeting_index, self.kb_index = meeting_index, kb_index
        self.history = history or {}
        self.web = web
        self.participants = list(participants)
        self.context_tokens, self.recent_tokens = context_tokens, recent_tokens
        self.context_k, self.kb_k, self.web_k = context_k, kb_k, web_k
        self.cross_window, self.mix = cross_window, mix
        self._cross_cache = {}
        self._context_cache = {}

    def context(self, query):
        if self.meeting_index is None or not len(self.meeting_index):
            return []
        if query not in self._context_cache:
            self._context_cache[query] = hybrid_search(self.meeting_index, query, self.context_k, self.mix)
        return list(self._context_cache[query])

    def cross(self, query):
        if query not in self._cross_cache:
            ents = entity_tokens(query)
            if len(self.history) < 2 or not ents:
                self._cross_cache[query] = ([], 0.0)
            else:
                res = cross_session_aggregate(self.history, ents, self.cross_window)
                self._cross_cache[query] = (res.snippets, res.hit_rate)
        return self._cross_cache[query]

    def call(self, tool: ToolAction, query):
        """Snippets from one tool plus the cross-session hit rate (None for other tools)."""
        if tool is ToolAction.KB_RETRIEVAL:
            if self.kb_index is None or not len(self.kb_index):
                return [], None
            return hybrid_search(self.kb_index, query, self.kb_k, self.mix), None
        if tool is ToolAction.CROSS_MEETING:
            return self.cross(query)
        if tool is ToolAction.WEB:
            return web_search_mock(self.web, query, self.web_k), None
        raise ValueError(f"{tool} is not a single tool")

    def probe(self, query) -> EvidenceState:
        """Cheap pre-decision evidence: context retrieval confidence and cached cross hit rate."""
        ctx = self.context(query)
        conf = float(np.clip(ctx[0].score, 0.0, 1.0)) if ctx else 0.0
        return EvidenceState(conf, float(self.cross(query)[1]))


TOOL_CHAINS = {
    ToolAction.NONE: [],
    ToolAction.KB_RETRIEVAL: [ToolAction.KB_RETRIEVAL],
    ToolAction.CROSS_MEETING: [ToolAction.CROSS_MEETING],
    ToolAction.WEB: [ToolAction.WEB],
    ToolAction.COMBO: [ToolAction.KB_RETRIEVAL, ToolAction.CROSS_MEETING, ToolAction.WEB],
}
MAX_HOPS = 3


def tool_chain(route: RoutingAction, tool: ToolAction) -> list:
    """Chain for a (route, tool) pair; RAG and cross routes force their own tool first."""
    chain = list(TOOL_CHAINS[tool])
    forced = {RoutingAction.SLOW_RAG: ToolAction.KB_RETRIEVAL,
              RoutingAction.SLOW_CROSS: ToolAction.CROSS_MEETING}.get(route)
    if forced is not None and forced not in chain:
        chain.insert(0, forced)
    return chain[:MAX_HOPS]


@dataclass
class PlanCard:
    analysis: ComplexityLabel
    tool_chain: list
    evidence_sources: list = field(default_factory=list)
    max_hops: int = MAX_HOPS
    confidence_tau: float = 0.8
    no_new_evidence: bool = True

    def __post_init__(self):
        if self.max_hops != MAX_HOPS:
            raise ValueError("plan cards run at most three hops")
        if len(self.tool_chain) > MAX_HOPS:
            raise ValueError("tool chain longer than three")

    def render(self):
        a = self.analysis
        tools = ", ".join(t.name.lower() for t in self.tool_chain) or "none"
        return (f"Plan: CL {a.cl.value}, CD {a.cd.value}, DK {a.dk.value}, TE {a.te.value}. "
                f"Tools: {tools}. Stop: conf > {self.confidence_tau}, no new evidence, "
                f"{self.max_hops} hops.")


@dataclass
class HopRecord:
    hop: int
    tool: ToolAction
    new_snippets: int
    confidence: float
    failed: bool = False


@dataclass
class PlanResult:
    answer: str
    hops_used: int
    evidence: EvidenceState
    snippets: list
    hops: list
    stop_reason: str


def _confidence(snippets):
    if not snippets:
        return 0.0
    return float(np.mean([min(max(s.score, 0.0), 1.0) for s in snippets]))


_SENT = re.compile(r"(?<=[.!?])\s+")


def first_sentence(text):
    return _SENT.split(text.strip(), maxsplit=1)[0]


def best_snippet(query, snippets):
    """Index of the snippet covering most query content words (first wins ties)."""
    q = set(tokenize(query)) - _STOP
    best, best_score = None, -1.0
    for i, s in enumerate(snippets):
        score = len(q & set(tokenize(s.text))) / max(len(q), 1)
        if score > best_score:
            best, best_score = i, score
    return best


def compose(query, card: PlanCard, snippets, participants=(), structured=True):
    """Template answer citing evidence as [1]..[n]."""
    if card.analysis.te is TE.HIGH and structured:
        owners = list(participants) or ["team"]
        picks = sorted(range(len(snippets)), key=lambda i: -snippets[i].score)[:2]
        lines = [f"- {first_sentence(snippets[i].text)} [{i + 1}] (owner: {owners[k % len(owners)]})"
                 for k, i in enumerate(picks)]
        if not lines:
            lines = [f"- Follow up on this request (owner: {owners[0]})"]
        return "\n".join(lines)
    if not snippets:
        return "I could not find supporting evidence in the meeting context."
    if card.analysis.cd is CD.CROSS_MEETING:
        cross = [s for s in snippets if s.timestamp_s is not None] or snippets
        summary = meet_sum([s.text for s in cross])
        cites = sorted({next(i for i, s in enumerate(snippets) if sent in s.text) + 1
                        for sent in summary.sentences})
        return summary.text + " " + " ".join(f"[{i}]" for i in cites)
    i = best_snippet(query, snippets)
    return f"{first_sentence(snippets[i].text)} [{i + 1}]"


def plan_loop(query, plan_card: PlanCard, tools: Toolbox, evidence_budget: int = 6,
              structured=True, context=None) -> PlanResult:
    """Run the tool chain and compose an answer.

    The first hop always runs; the loop stops after a hop that adds nothing
    new, lifts confidence above tau, or fills the evidence budget.
    Confidence is the mean clipped score of the collected snippets.
    """
    evidence = list(tools.context(query) if context is None else context)[:evidence_budget]
    seen = {s.source_id for s in evidence}
    hit_rate = 0.0
    hops, stop = [], "chain_exhausted"
    for h, tool in enumerate(plan_card.tool_chain[:plan_card.max_hops], start=1):
        failed = False
        try:
            found, rate = tools.call(tool, query)
        except Exception as exc:  # tool failures are recorded and the loop proceeds
            log.warning("tool %s failed: %s", tool.name, exc)
            found, rate, failed = [], None, True
        if rate is not None:
            hit_rate = rate
        new = []
        for s in found:
            if s.source_id not in seen and len(evidence) + len(new) < evidence_budget:
                new.append(s)
                seen.add(s.source_id)
        evidence += new
        conf = _confidence(evidence)
        hops.append(HopRecord(h, tool, len(new), conf, failed))
        if not new and plan_card.no_new_evidence:
            stop = "no_new_evidence"
            break
        if conf > plan_card.confidence_tau:
            stop = "confidence"
            break
        if len(evidence) >= evidence_budget:
            stop = "budget"
            break
    plan_card.evidence_sources = [s.source_id for s in evidence]
    answer = compose(query, plan_card, evidence, tools.participants, structured)
    state = EvidenceState(_confidence(evidence), hit_rate)
    return PlanResult(answer, len(hops), state, evidence, hops, stop)


# ---------------------------------------------------------------- query handling

@dataclass
class Response:
    query_id: str
    text: str
    lane: Lane
    degraded: bool = False


@dataclass
class Draws:
    """Per-query random numbers, drawn in a fixed order for common random numbers."""

    u_talker: float
    u_structure: float
    u_absent: float
    z_delay: float

    @classmethod
    def from_rng(cls, rng):
        u = rng.random(3)
        return cls(float(u[0]), float(u[1]), float(u[2]), float(rng.standard_normal()))


@dataclass
class Decision:
    route: RoutingAction
    confidence: float
    tool: ToolAction
    probe: EvidenceState


class _Lanes:
    """Event generators for the two lanes of one query."""

    def __init__(self, query, toolbox, backends, timing, tool_timing, draws, world_model, gate):
        self.query, self.toolbox, self.backends = query, toolbox, backends
        self.timing, self.tool_timing, self.draws = timing, tool_timing, draws
        self.world, self.gate = world_model, gate
        self.talker_text = None
        self.talker_tokens = 0
        self.plan = None
        self.planner_tokens = 0
        self.analysis = None
        self.sentinel_ms = None

    def talker(self, t0):
        ctx = self.toolbox.context(self.query.text)
        target = self.world.talker_draft(self.query, ctx, self.draws.u_talker)
        try:
            gen = self.backends.talker.generate(self.query.text, 128, target)
        except BackendFailure as exc:
            yield t0, "BackendFailure", {"lane": Lane.TALKER.value, "error": str(exc)}
            yield t0, "_talker_failed", {}
            return
        self.talker_text = gen.text
        self.talker_tokens = self.toolbox.recent_tokens + count_tokens(self.query.text)
        for i, off in enumerate(gen.offsets_ms):
            yield t0 + off, ("TalkerFirstToken" if i == 0 else "TalkerToken"), {"i": i}
            self.talker_tokens += 1
        yield t0 + gen.offsets_ms[-1], "_talker_done", {}

    def planner(self, t0, chain, tools_enabled=True):
        self.analysis, sentinel = self.world.planner_classify(self.query, self.draws, self.timing)
        self.sentinel_ms = sentinel
        # the classification call reads the prompt and emits one token
        self.planner_tokens = self.toolbox.context_tokens + count_tokens(self.query.text) + 1
        first = self.timing.planner_first_ms
        if sentinel is not None and sentinel <= first:
            yield t0 + sentinel, "SentinelEmitted", {"token": self.gate.sentinel_token}
            sentinel = None
        card = PlanCard(self.analysis, chain if tools_enabled else [])
        plan_text = card.render()
        try:
            gen = self.backends.planner.generate(self.query.text, 256, plan_text)
        except BackendFailure as exc:
            yield t0 + first, "BackendFailure", {"lane": Lane.PLANNER.value, "error": str(exc)}
            yield t0 + first, "_planner_failed", {}
            return
        t = t0 + gen.offsets_ms[-1]
        pending = []
        if sentinel is not None:
            pending.append((t0 + sentinel, "SentinelEmitted", {"token": self.gate.sentinel_token}))
        structured = self.draws.u_structure < self.world.planner_structure_p
        result = plan_loop(self.query.text, card, self.toolbox, structured=structured)
        self.plan = result
        for hop in result.hops:
            pending.append((t, "ToolCall", {"tool": hop.tool.name, "hop": hop.hop}))
            t += self.tool_timing.of(hop.tool)
            pending.append((t, "HopCompleted", {"hop": hop.hop, "new": hop.new_snippets,
                                                "confidence": round(hop.confidence, 6)}))
        if card.analysis.cd is CD.CROSS_MEETING and result.snippets:
            t += self.tool_timing.meet_sum_ms
        answer = self.backends.planner.generate(self.query.text, 256, result.answer)
        t += self.timing.planner_per_token_ms * answer.n_tokens
        pending.append((t, "Composed", {"snippets": len(result.snippets)}))
        snippet_tokens = sum(count_tokens(s.text) for s in result.snippets)
        self.planner_tokens += gen.n_tokens + answer.n_tokens + snippet_tokens
        pending.sort(key=lambda e: e[0])
        yield from pending
        yield t, "_planner_done", {}


def handle_query(query, toolbox: Toolbox, decision: Decision, gate_cfg: GateConfig | None = None,
                 backends: Backends | None = None, clock=None, mode: Mode = Mode.PARALLEL,
                 draws: Draws | None = None, timing: BackendTiming | None = None,
                 tool_timing: ToolTiming | None = None, world_model=None):
    """Serve one query; returns ``(Response, ExecutionTrace, PlanResult | None)``."""
    gate = gate_cfg or GateConfig()
    timing = timing or BackendTiming()
    tool_timing = tool_timing or ToolTiming()
    backends = backends or Backends.simulated(timing)
    clock = clock or VirtualClock()
    draws = draws or Draws(0.0, 0.0, 1.0, 0.0)
    world = world_model or WorldModel()
    trace = ExecutionTrace(query.query_id, mode=mode, band=getattr(query, "band", None))
    lanes = _Lanes(query, toolbox, backends, timing, tool_timing, draws, world, gate)
    sched = LaneScheduler(clock)

    t_start = clock.now()
    trace.add(t_start, "Received")
    t_r = t_start + timing.router_ms
    clock.advance_to(t_r)
    trace.add(t_r, "RouterDecision", action=decision.route.name,
              confidence=round(decision.confidence, 6), tool=decision.tool.name)

    tools_enabled = mode is not Mode.ROUTING_ONLY
    route, tool = decision.route, decision.tool
    if mode is Mode.TOOLS_ONLY:
        route = route if route.is_planner else RoutingAction.SLOW
        tool = tool if tool is not ToolAction.NONE else ToolAction.KB_RETRIEVAL
    chain = tool_chain(route, tool)

    state = {"resolved": None, "t_resolved": None, "talker_done": None, "sentinel_seen": False,
             "deadline": None, "degraded": False}

    def resolve(t, outcome, **detail):
        state["resolved"], state["t_resolved"] = outcome, t
        trace.gate_outcome = outcome
        trace.add(t, "GateResolved", outcome=outcome.value, **detail)

    def interrupt_talker(t):
        sched.cancel(Lane.TALKER)
        trace.add(t, "TalkerInterrupted")

    def start_planner(t, chain=chain):
        sched.start(Lane.PLANNER, lanes.planner(t, chain, tools_enabled), priority=2)

    def start_talker(t):
        sched.start(Lane.TALKER, lanes.talker(t), priority=3)

    confident = decision.confidence >= gate.confidence_threshold
    if mode is Mode.TOOLS_ONLY:
        resolve(t_r, GateOutcome.CONFIDENT_SLOW, forced=True)
        start_planner(t_r)
    elif confident and route is RoutingAction.FAST:
        resolve(t_r, GateOutcome.CONFIDENT_FAST)
        start_talker(t_r)
    elif confident:
        resolve(t_r, GateOutcome.CONFIDENT_SLOW)
        if mode is Mode.PARALLEL:
            trace.add(t_r, "TalkerInterrupted", started=True)
        start_planner(t_r)
    else:
        start_talker(t_r)
        if mode is Mode.SERIAL:
            pass  # planner starts once the Talker finishes
        else:
            start_planner(t_r)
            state["deadline"] = t_r + gate.sentinel_window_ms
            sched.timer("_window", state["deadline"])

    responded = None
    for name, t, ev, detail in sched:
        if ev == "_window":
            if state["resolved"] is None:
                resolve(t, GateOutcome.SENTINEL_TIMEOUT)
                if sched.active(Lane.TALKER):
                    interrupt_talker(t)
            continue
        if ev == "SentinelEmitted":
            trace.add(t, ev, **detail)
            state["sentinel_seen"] = True
            if state["resolved"] is None and t <= state["deadline"]:
                resolve(t, GateOutcome.SENTINEL_FAST, sentinel_ms=round(t - state["deadline"]
                                                                           + gate.sentinel_window_ms, 6))
                sched.cancel(Lane.PLANNER)
                sched.cancel("_window")
                if state["talker_done"] is not None:
                    responded = (t, Lane.TALKER)
                    break
            elif state["resolved"] is GateOutcome.SENTINEL_TIMEOUT:
                trace.gate_annotation = GateOutcome.LATE_TRIGGER
            continue
        if ev == "_talker_done":
            state["talker_done"] = t
            if state["resolved"] in (GateOutcome.CONFIDENT_FAST, GateOutcome.SENTINEL_FAST) or (
                    lanes.plan is not None and lanes.plan.stop_reason == "backend_failure"):
                responded = (t, Lane.TALKER)
                break
            if mode is Mode.SERIAL and state["resolved"] is None:
                start_planner(t)
                state["deadline"] = t + gate.sentinel_window_ms
                sched.timer("_window", state["deadline"])
            continue
        if ev == "_talker_failed":
            # fall back to a conservative Planner path
            state["degraded"] = True
            if not sched.active(Lane.PLANNER):
                start_planner(t, [])
            continue
        if ev == "_planner_failed":
            state["degraded"] = True
            lanes.plan = PlanResult("The assistant could not complete this request.", 0,
                                    EvidenceState(), [], [], "backend_failure")
            if lanes.talker_text is not None and state["talker_done"] is not None:
                responded = (max(t, state["talker_done"]), Lane.TALKER)
                break
            if sched.active(Lane.TALKER):
                sched.cancel("_window")  # keep the Talker answer instead of interrupting it
                continue
            responded = (t, Lane.PLANNER)
            break
        if ev == "_planner_done":
            if (state["resolved"] is GateOutcome.SENTINEL_TIMEOUT and not state["sentinel_seen"]
                    and lanes.analysis is not None and lanes.analysis.is_simple):
                trace.gate_annotation = GateOutcome.MISS_TRIGGER
            responded = (t, Lane.PLANNER)
            break
        trace.add(t, ev, **detail)

    if responded is None:
        raise RuntimeError(f"query {query.query_id} finished without a response")
    t_resp, lane = responded
    if lane is Lane.TALKER:
        text = lanes.talker_text
    else:
        text = lanes.plan.answer
    trace.lane_used = lane
    trace.talker_tokens_k = lanes.talker_tokens / 1000.0 if lanes.talker_text is not None else 0.0
    trace.planner_tokens_k = lanes.planner_tokens / 1000.0
    trace.add(t_resp, "Responded", lane=lane.value)
    return Response(query.query_id, text, lane, state["degraded"]), trace, lanes.plan


# ---------------------------------------------------------------- world model hooks

class WorldModel:
    """What the simulated models say. The default knows nothing about ground truth."""

    planner_structure_p = 1.0

    def talker_draft(self, query, context_snippets, u):
        if context_snippets:
            i = best_snippet(query.text, context_snippets)
            return "Sure, as mentioned just now: " + first_sentence(context_snippets[i].text)
        return "Sorry, I did not catch that in the recent discussion."

    def planner_classify(self, query, draws, timing):
        label = getattr(query, "label", None) or ComplexityLabel(CL.MEDIUM, CD.RECENT, DK.BASIC, TE.LOW)
        delay = timing.sentinel.from_draws(draws.u_absent, draws.z_delay) if label.is_simple else None
        return label, delay


# ---------------------------------------------------------------- latency statistics

SLO = {"simple": (1.5, 2.0), "complex": (20.0, 30.0)}


def nearest_rank(values, p):
    v = sorted(values)
    if not v:
        raise EmptyTraces("no values")
    k = max(1, math.ceil(p * len(v) / 100.0))
    return v[min(k, len(v)) - 1]


@dataclass
class LatencyStats:
    n: int
    percentiles: dict
    by_band: dict
    tokens_k: dict
    slo: dict

    def to_json(self):
        return {"n": self.n, "percentiles": self.percentiles, "by_band": self.by_band,
                "tokens_k": self.tokens_k, "slo": self.slo}


def latency_stats(traces, percentile_list=(50, 90), suite=None) -> LatencyStats:
    """Nearest-rank latency percentiles overall and per band, with SLO flags.

    ``suite`` ("simple" or "complex") applies that budget to the whole set;
    otherwise the low band is checked against the simple budget and the
    remaining bands against the complex one.
    """
    traces = list(traces)
    if not traces:
        raise EmptyTraces("no traces")
    lat = [t.latency_s for t in traces]
    pct = {f"p{p}": nearest_rank(lat, p) for p in percentile_list}
    groups = {}
    for t in traces:
        groups.setdefault(t.band or "unknown", []).append(t.latency_s)
    by_band = {b: {f"p{p}": nearest_rank(v, p) for p in percentile_list} | {"n": len(v)}
               for b, v in sorted(groups.items())}
    talker = [t.talker_tokens_k for t in traces if t.talker_tokens_k > 0]
    planner = [t.planner_tokens_k for t in traces if t.planner_tokens_k > 0]
    tokens = {"talker": float(np.mean(talker)) if talker else 0.0,
              "planner": float(np.mean(planner)) if planner else 0.0}

    def flags(values, kind):
        b50, b90 = SLO[kind]
        p50, p90 = nearest_rank(values, 50), nearest_rank(values, 90)
        return {"p50": p50, "p90": p90, "p50_budget": b50, "p90_budget": b90,
                "p50_ok": p50 <= b50, "p90_ok": p90 <= b90, "pass": p50 <= b50 and p90 <= b90}

    slo = {}
    if suite is not None:
        slo[suite] = flags(lat, suite)
    else:
        simple = [t.latency_s for t in traces if t.band == "low"]
        complex_ = [t.latency_s for t in traces if t.band != "low"]
        if simple:
            slo["simple"] = flags(simple, "simple")
        if complex_:
            slo["complex"] = flags(complex_, "complex")
    return LatencyStats(len(traces), pct, by_band, tokens, slo)
