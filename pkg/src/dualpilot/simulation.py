"""Simulated meeting world: scenarios, per-query toolboxes and model behaviour.

A :class:`World` wraps a corpus (meetings, splits, KB documents and web
fixtures). Every injected question becomes a :class:`Scenario`. The
:class:`Simulator` runs a policy on a scenario through
:func:`~dualpilot.orchestrator.handle_query` and scores the answer with the
task-success proxies.

Model behaviour is deliberately simple. The Talker sees only in-meeting
context and answers meeting facts correctly with a probability that
depends on the question's load and context range. It never uses tools and
never produces structured action lists. The Planner's quality comes from
real retrieval over the indexes, and it formats task-execution answers
correctly with probability ``planner_structure_p``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import Split, SplitAssignment, Transcript, emit_jsonl, parse_jsonl_corpus
from .orchestrator import (
    Backends,
    BackendTiming,
    Decision,
    Draws,
    GateConfig,
    Lane,
    Mode,
    Toolbox,
    ToolTiming,
    WorldModel,
    best_snippet,
    first_sentence,
    handle_query,
    latency_stats,
    nearest_rank,
)
from .policy import (
    BehaviorPolicy,
    CqlConfig,
    CqlResult,
    EvidenceState,
    GreedyPolicy,
    Policy,
    QueryKind,
    RewardSpec,
    ToolAction,
    collect_replay,
    evaluate_policy,
    heuristic_tool,
    task_success,
    train_cql,
)
from .router import HashedNgramExtractor, RouterWeights, derive_labels, train_supervised
from .taxonomy import CD, CL, ComplexityLabel, RoutingAction, default_mapping, route_label
from .text import count_tokens
from .tools import RetrievalIndex, load_jsonl_docs

log = logging.getLogger(__name__)

TALKER_PREFIX = "Sure, as we mentioned in the meeting: "
TALKER_HEDGE = "Sorry, I did not catch that in the recent discussion."
RECENT_TURNS = 12
CONTEXT_TOKEN_CAP = 1500


@dataclass
class Scenario:
    query_id: str
    meeting_id: str
    text: str
    context_digest: str
    time_s: float
    split: str
    label: ComplexityLabel
    kind: str
    answer_source: str
    ground_truth: str | None = None
    history: list = field(default_factory=list)
    gold_doc: str | None = None
    entity: str | None = None
    band: str | None = None

    def to_json(self):
        d = dict(self.__dict__)
        d["label"] = self.label.to_list()
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        obj["label"] = ComplexityLabel.from_list(obj["label"])
        return cls(**obj)


def dump_scenarios(scenarios, path):
    with open(path, "w", encoding="utf-8") as fh:
        for sc in scenarios:
            fh.write(json.dumps(sc.to_json(), sort_keys=True) + "\n")


def load_scenarios(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Scenario.from_json(json.loads(line)))
    return out


class CachedExtractor(HashedNgramExtractor):
    """Hashed features memoised by (text, context); texts repeat a lot in meetings."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._cache = {}

    def __call__(self, query, context=""):
        key = (query, context)
        v = self._cache.get(key)
        if v is None:
            v = super().__call__(query, context)
            v.setflags(write=False)
            self._cache[key] = v
        return v


class SimWorldModel(WorldModel):
    """Talker competence and Planner formatting reliability."""

    planner_structure_p = 0.9
    talker_p_easy = 0.92  # low load, no or recent context
    talker_p_hard = 0.6

    def talker_p(self, label: ComplexityLabel):
        if label.cl is CL.LOW and label.cd in (CD.NONE, CD.RECENT):
            return self.talker_p_easy
        return self.talker_p_hard

    def talker_draft(self, query, context_snippets, u):
        if not context_snippets:
            return TALKER_HEDGE
        label = getattr(query, "label", None)
        if label is not None and getattr(query, "answer_source", "meeting") == "meeting" \
                and getattr(query, "kind", "factual") == QueryKind.FACTUAL.value \
                and u >= self.talker_p(label):
            return TALKER_HEDGE
        i = best_snippet(query.text, context_snippets)
        return TALKER_PREFIX + first_sentence(context_snippets[i].text)


class World:
    def __init__(self, meetings: dict, splits: SplitAssignment, kb=(), web=(), extractor=None,
                 mapping=None):
        self.meetings = meetings
        self.splits = splits
        self.kb = list(kb)
        self.web = list(web)
        self.extractor = extractor or CachedExtractor()
        self.mapping = mapping or default_mapping()
        self._kb_index = None
        self._full_index = {}
        self._toolboxes = {}
        self._scenarios = None
        self._router = None

    # -- construction -------------------------------------------------------
    @classmethod
    def from_corpus(cls, corpus, **kw):
        return cls(corpus.meetings, corpus.splits, corpus.kb, corpus.web, **kw)

    @classmethod
    def load(cls, directory, **kw):
        d = Path(directory)
        meetings = parse_jsonl_corpus((d / "corpus.jsonl").read_text("utf-8"))
        splits = SplitAssignment.from_json(json.loads((d / "splits.json").read_text("utf-8")))
        kb = load_jsonl_docs(d / "kb.jsonl") if (d / "kb.jsonl").exists() else []
        web = load_jsonl_docs(d / "web.jsonl") if (d / "web.jsonl").exists() else []
        return cls(meetings, splits, kb, web, **kw)

    @classmethod
    def shipped(cls, **kw):
        """The seeded world packaged with the library."""
        with resources.as_file(resources.files("dualpilot") / "data") as d:
            return cls.load(d, **kw)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "corpus.jsonl").write_text(emit_jsonl(self.meetings.values()), "utf-8")
        (d / "splits.json").write_text(json.dumps(self.splits.to_json(), indent=1, sort_keys=True)
                                       + "\n", "utf-8")
        for name, docs in (("kb.jsonl", self.kb), ("web.jsonl", self.web)):
            with open(d / name, "w", encoding="utf-8") as fh:
                for doc in docs:
                    fh.write(json.dumps(doc, sort_keys=True) + "\n")

    # -- scenarios ------------------------------------------------------------
    def scenarios(self, split=None) -> list:
        if self._scenarios is None:
            self._scenarios = self._build_scenarios()
        if split is None:
            return list(self._scenarios)
        split = getattr(split, "value", split)
        return [s for s in self._scenarios if s.split == split]

    def _build_scenarios(self):
        by_split = {}
        for mid in sorted(self.meetings):
            by_split.setdefault(self.splits[mid].value, []).append(mid)
        out = []
        for mid in sorted(self.meetings):
            t = self.meetings[mid]
            split = self.splits[mid].value
            peers = by_split[split]
            pos = peers.index(mid)
            default_history = [peers[(pos + k) % len(peers)] for k in range(1, 5)
                               if peers[(pos + k) % len(peers)] != mid]
            for turn in t.turns:
                if not turn.injected:
                    continue
                meta = turn.metadata
                linked = [m for m in meta.get("linked_meetings", "").split(",") if m]
                out.append(Scenario(
                    query_id=f"{mid}@{turn.start_s:g}",
                    meeting_id=mid,
                    text=turn.text,
                    context_digest=t.domain_tag,
                    time_s=turn.start_s,
                    split=split,
                    label=turn.complexity,
                    kind=meta.get("kind", "factual"),
                    answer_source=meta.get("answer_source", "meeting"),
                    ground_truth=turn.ground_truth,
                    history=linked or sorted(set(default_history)),
                    gold_doc=meta.get("gold_doc"),
                    entity=meta.get("entity"),
                    band=self.mapping.consolidate(turn.complexity).band,
                ))
        return out

    # -- per-query resources --------------------------------------------------
    def kb_index(self):
        if self._kb_index is None:
            self._kb_index = RetrievalIndex(self.kb, self.extractor)
        return self._kb_index

    def meeting_index(self, mid):
        if mid not in self._full_index:
            t = self.meetings[mid]
            docs = [{"doc_id": f"Meeting-{mid}#{i:04d}", "text": turn.text, "timestamp_s": turn.start_s}
                    for i, turn in enumerate(t.turns) if not turn.injected]
            self._full_index[mid] = RetrievalIndex(docs, self.extractor)
        return self._full_index[mid]

    def toolbox(self, sc: Scenario) -> Toolbox:
        box = self._toolboxes.get(sc.query_id)
        if box is None:
            t = self.meetings[sc.meeting_id]
            past = [(i, turn) for i, turn in enumerate(t.turns)
                    if not turn.injected and turn.start_s < sc.time_s]
            docs = [{"doc_id": f"Meeting-{sc.meeting_id}#{i:04d}", "text": turn.text,
                     "timestamp_s": turn.start_s} for i, turn in past]
            index = RetrievalIndex(docs, self.extractor)
            ctx_tokens = min(CONTEXT_TOKEN_CAP, sum(count_tokens(tn.text) for _, tn in past))
            recent = sum(count_tokens(tn.text) for _, tn in past[-RECENT_TURNS:])
            history = {m: self.meeting_index(m) for m in sc.history if m in self.meetings}
            speakers = _top_speakers(t, sc.time_s)
            box = Toolbox(index, self.kb_index(), history, self.web, speakers, ctx_tokens, recent)
            self._toolboxes[sc.query_id] = box
        return box

    def features(self, sc: Scenario):
        return self.extractor(sc.text, sc.context_digest)

    # -- supervised router ----------------------------------------------------
    def supervised_router(self, epochs=5, seed=0) -> RouterWeights:
        """Routing head trained on the label rule over the train split."""
        if self._router is None:
            train = [self.meetings[m] for m in sorted(self.meetings)
                     if self.splits[m] is Split.TRAIN]
            data = derive_labels(train, self.extractor)
            self._router = train_supervised(data, epochs=epochs, seed=seed, holdout=0.0).weights
        return self._router


def _top_speakers(t: Transcript, before_s: float, k=3):
    counts = {}
    for turn in t.turns:
        if not turn.injected and turn.start_s < before_s:
            counts[turn.speaker] = counts.get(turn.speaker, 0) + 1
    return [s for s, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


# ---------------------------------------------------------------- policies tied to the world

class LabelPolicy(Policy):
    """Oracle: the label routing rule with full confidence and the matching tool."""

    name = "label-oracle"

    def route(self, features, scenario=None, rng=None):
        return route_label(scenario.label), 1.0

    def tool(self, features, evidence, route, scenario=None, rng=None):
        return heuristic_tool(route, evidence)


# ---------------------------------------------------------------- engine

@dataclass
class Outcome:
    query_id: str
    features: np.ndarray
    route: RoutingAction
    confidence: float
    tool: ToolAction
    success: bool
    latency_s: float
    tokens_k: float
    probe: EvidenceState
    evidence: EvidenceState
    trace: object
    answer: str


class Simulator:
    """Runs policies on scenarios of a :class:`World` under the virtual clock.

    With ``direct=True`` the gate threshold is 0, so the routing action is
    always executed as chosen (used for replay logging and policy values).
    """

    def __init__(self, world: World, mode: Mode = Mode.PARALLEL, gate: GateConfig | None = None,
                 timing: BackendTiming | None = None, tool_timing: ToolTiming | None = None,
                 backends: Backends | None = None, direct: bool = False, world_model=None):
        self.world = world
        self.mode = Mode(mode)
        self.gate = gate or GateConfig()
        if direct:
            self.gate = GateConfig(0.0, self.gate.sentinel_window_ms, self.gate.sentinel_target_ms,
                                   self.gate.sentinel_token)
        self.timing = timing or BackendTiming()
        self.tool_timing = tool_timing or ToolTiming()
        self.backends = backends or Backends.simulated(self.timing)
        self.world_model = world_model or SimWorldModel()

    @staticmethod
    def streams(seed, index):
        idx = tuple(index) if isinstance(index, (tuple, list)) else (int(index),)
        world_rng = np.random.default_rng([int(seed), *map(int, idx), 0])
        policy_rng = np.random.default_rng([int(seed), *map(int, idx), 1])
        return world_rng, policy_rng

    def run(self, sc: Scenario, policy: Policy, seed: int = 0, index=0) -> Outcome:
        world_rng, policy_rng = self.streams(seed, index)
        draws = Draws.from_rng(world_rng)
        feats = self.world.features(sc)
        box = self.world.toolbox(sc)
        route, conf = policy.route(feats, sc, policy_rng)
        probe = box.probe(sc.text)
        tool = policy.tool(feats, probe, route, sc, policy_rng)
        decision = Decision(route, conf, tool, probe)
        resp, trace, plan = handle_query(sc, box, decision, self.gate, self.backends, None, self.mode,
                                         draws, self.timing, self.tool_timing, self.world_model)
        evidence = plan.evidence if (plan is not None and resp.lane is Lane.PLANNER) else EvidenceState()
        ok = task_success(sc.kind, resp.text, sc.ground_truth, evidence, trace)
        return Outcome(sc.query_id, feats, route, conf, tool, bool(ok), trace.latency_s,
                       trace.tokens_k, probe, evidence, trace, resp.text)


# ---------------------------------------------------------------- suites and ablation

def build_suite(world: World, name: str = "stratified", seed: int = 0, n: int = 300, split=None):
    """Scenario suites: simple, complex, te, stratified (equal per band) or all."""
    pool = world.scenarios(split)
    if name == "all":
        return pool
    if name == "simple":
        return [s for s in pool if s.label.is_simple]
    if name == "complex":
        return [s for s in pool if not s.label.is_simple]
    if name == "te":
        return [s for s in pool if s.kind == QueryKind.TASK_EXECUTION.value]
    if name != "stratified":
        raise ValueError(f"unknown suite {name!r}")
    rng = np.random.default_rng(seed)
    bands = sorted({s.band for s in pool})
    per = n // len(bands)
    out = []
    for b in bands:
        members = [s for s in pool if s.band == b]
        take = min(per, len(members))
        out += [members[i] for i in sorted(rng.choice(len(members), size=take, replace=False))]
    return out


@dataclass
class AblationReport:
    mode: str
    seed: int
    n: int
    quality: float
    p50_s: float
    p90_s: float
    mean_tokens_k: float
    tool_call_rate: float
    latencies_s: list = field(repr=False, default_factory=list)

    def to_json(self, with_latencies=False):
        d = {k: v for k, v in self.__dict__.items() if k != "latencies_s"}
        if with_latencies:
            d["latencies_s"] = list(self.latencies_s)
        return d


def default_policy(world: World) -> Policy:
    """Supervised routing head with the route-matched tool rule."""
    return GreedyPolicy(world.supervised_router())


def run_ablation(mode, scenario_suite, seed: int = 0, world: World | None = None,
                 policy: Policy | None = None, **sim_kw) -> AblationReport:
    suite = list(scenario_suite)
    if not suite:
        raise ValueError("empty scenario suite")
    world = world or World.shipped()
    policy = policy or default_policy(world)
    sim = Simulator(world, Mode(mode), **sim_kw)
    outs = [sim.run(sc, policy, seed, i) for i, sc in enumerate(suite)]
    lat = [o.latency_s for o in outs]
    return AblationReport(
        mode=Mode(mode).value,
        seed=seed,
        n=len(outs),
        quality=float(np.mean([o.success for o in outs])),
        p50_s=nearest_rank(lat, 50),
        p90_s=nearest_rank(lat, 90),
        mean_tokens_k=float(np.mean([o.tokens_k for o in outs])),
        tool_call_rate=float(np.mean([bool(o.trace.tool_calls) for o in outs])),
        latencies_s=lat,
    )


def suite_latency(world: World, suite, seed=0, policy=None, mode=Mode.PARALLEL, suite_name=None, **kw):
    """Latency statistics of a suite run under the label-oracle policy by default."""
    sim = Simulator(world, mode, **kw)
    policy = policy or LabelPolicy()
    traces = [sim.run(sc, policy, seed, i).trace for i, sc in enumerate(suite)]
    return latency_stats(traces, suite=suite_name), traces


@dataclass
class GateTrialReport:
    n: int
    late_trigger_rate: float
    miss_trigger_rate: float
    sentinel_fast_rate: float
    outcomes: dict

    def to_json(self):
        return dict(self.__dict__)


def gate_trials(world: World, n: int = 5000, seed: int = 0, confidence: float = 0.5,
                timing: BackendTiming | None = None) -> GateTrialReport:
    """Send simple queries through the gated path and count gate resolutions.

    The routing head's confidence is pinned below the gate threshold so every
    trial starts both lanes and waits on the sentinel.
    """
    simple = [s for s in world.scenarios() if s.label.is_simple]
    if not simple:
        raise ValueError("world has no simple scenarios")
    timing = timing or BackendTiming()
    backends = Backends.simulated(timing)
    gate = GateConfig()
    if confidence >= gate.confidence_threshold:
        raise ValueError("confidence must sit below the gate threshold")
    model = SimWorldModel()
    counts = {}
    late = miss = 0
    for i in range(n):
        sc = simple[i % len(simple)]
        box = world.toolbox(sc)
        draws = Draws.from_rng(np.random.default_rng([seed, i, 0]))
        decision = Decision(RoutingAction.FAST, confidence, ToolAction.NONE, EvidenceState())
        _, trace, _ = handle_query(sc, box, decision, gate, backends, None, Mode.PARALLEL, draws,
                                   timing, None, model)
        key = trace.gate_outcome.value
        counts[key] = counts.get(key, 0) + 1
        ann = trace.gate_annotation.value if trace.gate_annotation else None
        late += ann == "LateTrigger"
        miss += ann == "MissTrigger"
    return GateTrialReport(n, late / n, miss / n, counts.get("SentinelFast", 0) / n,
                           dict(sorted(counts.items())))


# ---------------------------------------------------------------- offline policy pipeline

# Route exploration is uniform so the conservative penalty does not pin the
# routing head to the supervised action; tools mostly follow the route.
BEHAVIOR_EPSILON = 1.0
BEHAVIOR_TOOL_EPSILON = 0.2
REPLAY_SIZE = 8500


def behavior_policy(world: World) -> BehaviorPolicy:
    return BehaviorPolicy(GreedyPolicy(world.supervised_router()), epsilon=BEHAVIOR_EPSILON,
                          tool_epsilon=BEHAVIOR_TOOL_EPSILON)


def collect_world_replay(world: World, n: int = REPLAY_SIZE, seed: int = 0, split="train"):
    """Replay logged by the exploring supervised policy on one split."""
    sim = Simulator(world, direct=True)
    return collect_replay(world.scenarios(split), behavior_policy(world), sim, n, seed)


def train_dual_policy(world: World, replay, cfg: CqlConfig | None = None,
                      spec: RewardSpec | None = None, init: RouterWeights | None = None) -> CqlResult:
    """CQL refinement of the supervised routing head plus a fresh tool head."""
    cfg = cfg or CqlConfig()
    init = init or world.supervised_router()
    tool_init = RouterWeights.init(init.dim + 2, len(ToolAction), init.hidden, seed=cfg.seed + 1)
    return train_cql(replay, init, tool_init, cfg, spec)


def compare_policies(world: World, policies, spec: RewardSpec | None = None, seed: int = 0,
                     split="test") -> list:
    """Online J of each policy under direct execution with shared random streams."""
    sim = Simulator(world, direct=True)
    scenarios = world.scenarios(split)
    return [evaluate_policy(p, scenarios, sim, spec, seed) for p in policies]
