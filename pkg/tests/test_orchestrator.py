from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualpilot.errors import EmptyTraces
from dualpilot.orchestrator import (
    RESOLUTIONS,
    BackendTiming,
    Backends,
    Decision,
    Draws,
    ExecutionTrace,
    GateConfig,
    GateOutcome,
    Lane,
    Mode,
    PlanCard,
    SentinelDelay,
    SimulatedBackend,
    Toolbox,
    WorldModel,
    handle_query,
    latency_stats,
    nearest_rank,
    plan_loop,
    tool_chain,
)
from dualpilot.policy import EvidenceState, ToolAction
from dualpilot.simulation import LabelPolicy, Simulator, build_suite
from dualpilot.taxonomy import CD, CL, DK, TE, ComplexityLabel, RoutingAction
from dualpilot.tools import Snippet

SIMPLE = ComplexityLabel(CL.LOW, CD.NONE, DK.GENERAL, TE.LOW)
MEDIUM = ComplexityLabel(CL.MEDIUM, CD.RECENT, DK.BASIC, TE.LOW)


@dataclass
class Query:
    query_id: str
    text: str
    label: ComplexityLabel = SIMPLE
    band: str = "low"


class FixedSentinel(WorldModel):
    def __init__(self, delay_ms):
        self.delay_ms = delay_ms

    def planner_classify(self, query, draws, timing):
        return query.label, self.delay_ms


class StubTools(Toolbox):
    """Toolbox whose tools return canned snippets."""

    def __init__(self, per_tool=None, context=()):
        super().__init__()
        self.per_tool = per_tool or {}
        self._context = list(context)

    def context(self, query):
        return list(self._context)

    def call(self, tool, query):
        return list(self.per_tool.get(tool, [])), (0.75 if tool is ToolAction.CROSS_MEETING else None)


def snip(i, score=0.5, prefix="kb"):
    return Snippet(f"{prefix}-{i:02d}", f"Fact number {i} about the atlas budget.", score)


def run(query, decision, delay=None, mode=Mode.PARALLEL, tools=None, **kw):
    world = FixedSentinel(delay) if delay is not None or "world_model" not in kw else kw.pop("world_model")
    return handle_query(query, tools or StubTools(context=[snip(0)]), decision, mode=mode,
                        world_model=world, **kw)


def unsure(route=RoutingAction.FAST):
    return Decision(route, 0.5, ToolAction.NONE, EvidenceState())


# -- gate --------------------------------------------------------------------------

def test_gate_config_validation():
    with pytest.raises(ValueError):
        GateConfig(sentinel_target_ms=500, sentinel_window_ms=400)
    with pytest.raises(ValueError):
        GateConfig(sentinel_target_ms=0)


def test_confident_fast_serves_talker():
    resp, trace, _ = run(Query("q", "what is the budget"), Decision(RoutingAction.FAST, 0.9, ToolAction.NONE,
                                                                    EvidenceState()), delay=None)
    assert trace.gate_outcome is GateOutcome.CONFIDENT_FAST
    assert resp.lane is Lane.TALKER
    assert "ToolCall" not in trace.names()
    trace.validate()


@pytest.mark.parametrize("mode, interrupted", [(Mode.PARALLEL, True), (Mode.ROUTING_ONLY, False)])
def test_confident_slow(mode, interrupted):
    d = Decision(RoutingAction.SLOW_RAG, 0.9, ToolAction.KB_RETRIEVAL, EvidenceState())
    resp, trace, _ = run(Query("q", "what is the budget", MEDIUM, "medium"), d, mode=mode,
                         tools=StubTools({ToolAction.KB_RETRIEVAL: [snip(1)]}))
    assert trace.gate_outcome is GateOutcome.CONFIDENT_SLOW
    assert resp.lane is Lane.PLANNER
    assert "TalkerFirstToken" not in trace.names()
    assert ("TalkerInterrupted" in trace.names()) is interrupted
    assert (mode is Mode.ROUTING_ONLY) == ("ToolCall" not in trace.names())


def test_sentinel_inside_window_releases_talker():
    resp, trace, _ = run(Query("q", "what is the budget"), unsure(), delay=250.0)
    assert trace.gate_outcome is GateOutcome.SENTINEL_FAST
    assert trace.gate_annotation is None
    assert resp.lane is Lane.TALKER
    trace.validate()


def test_sentinel_at_450_is_late_trigger():
    resp, trace, _ = run(Query("q", "what is the budget"), unsure(), delay=450.0)
    assert trace.gate_outcome is GateOutcome.SENTINEL_TIMEOUT
    assert trace.gate_annotation is GateOutcome.LATE_TRIGGER
    assert resp.lane is Lane.PLANNER
    names = trace.names()
    assert "TalkerInterrupted" in names
    assert names.index("GateResolved") < names.index("SentinelEmitted")
    trace.validate()


def test_missing_sentinel_is_miss_trigger():
    resp, trace, _ = handle_query(Query("q", "what is the budget"), StubTools(context=[snip(0)]), unsure(),
                                  world_model=FixedSentinel(None))
    assert trace.gate_outcome is GateOutcome.SENTINEL_TIMEOUT
    assert trace.gate_annotation is GateOutcome.MISS_TRIGGER
    assert resp.lane is Lane.PLANNER


def test_complex_timeout_is_not_annotated():
    _, trace, _ = run(Query("q", "plan the launch", MEDIUM, "medium"), unsure(RoutingAction.SLOW), delay=None)
    assert trace.gate_outcome is GateOutcome.SENTINEL_TIMEOUT
    assert trace.gate_annotation is None


def test_backend_failure_degrades_to_planner():
    backends = Backends(SimulatedBackend(210, 30, fail=True), SimulatedBackend(520, 310))
    resp, trace, _ = run(Query("q", "what is the budget"), Decision(RoutingAction.FAST, 0.9, ToolAction.NONE,
                                                                    EvidenceState()),
                         delay=None, backends=backends)
    assert "BackendFailure" in trace.names()
    assert resp.degraded and resp.lane is Lane.PLANNER
    trace.validate()


def test_sentinel_delay_calibration():
    s = SentinelDelay()
    from scipy import stats

    p = (1 - s.p_absent) * stats.norm.sf(np.log(400 / 250) / s.sigma)
    assert p == pytest.approx(0.031, abs=1e-12)
    assert s.from_draws(0.0, 0.0) is None
    assert s.from_draws(0.5, 0.0) == pytest.approx(250.0)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(-3, 3), st.floats(0, 1),
       st.sampled_from(list(RoutingAction)), st.sampled_from(list(Mode)))
@settings(max_examples=60, deadline=None)
def test_trace_invariants(u1, u2, u3, z, conf, route, mode):
    q = Query("q", "what is the atlas budget", SIMPLE if route is RoutingAction.FAST else MEDIUM,
              "low" if route is RoutingAction.FAST else "medium")
    tools = StubTools({t: [snip(i, prefix=t.name) for i in range(2)] for t in ToolAction}, [snip(0)])
    resp, trace, _ = handle_query(q, tools, Decision(route, conf, ToolAction.KB_RETRIEVAL, EvidenceState()),
                                  mode=mode, draws=Draws(u1, u2, u3, z))
    trace.validate()
    names = trace.names()
    assert trace.gate_outcome in RESOLUTIONS
    assert names.count("GateResolved") == 1
    if "TalkerInterrupted" in names:
        assert "TalkerToken" not in names[names.index("TalkerInterrupted"):]
    assert trace.gate_annotation in (None, GateOutcome.MISS_TRIGGER, GateOutcome.LATE_TRIGGER)


def test_default_simple_latency_under_one_second():
    resp, trace, _ = run(Query("q", "what is the budget"), Decision(RoutingAction.FAST, 0.9, ToolAction.NONE,
                                                                    EvidenceState()), delay=None)
    n = sum(e in ("TalkerFirstToken", "TalkerToken") for e in trace.names())
    assert trace.latency_ms == pytest.approx(1.0 + 210.0 + 30.0 * (n - 1))


# -- plan loop ---------------------------------------------------------------------

def card(chain, label=MEDIUM, tau=0.8):
    return PlanCard(label, list(chain), confidence_tau=tau)


def test_plan_card_limits():
    with pytest.raises(ValueError):
        PlanCard(MEDIUM, [ToolAction.KB_RETRIEVAL] * 4)
    with pytest.raises(ValueError):
        PlanCard(MEDIUM, [], max_hops=4)
    assert len(tool_chain(RoutingAction.SLOW_CROSS, ToolAction.COMBO)) == 3
    assert tool_chain(RoutingAction.SLOW_RAG, ToolAction.NONE) == [ToolAction.KB_RETRIEVAL]


def test_confidence_stop_after_second_hop():
    tools = StubTools({ToolAction.KB_RETRIEVAL: [snip(1, 0.5)], ToolAction.WEB: [snip(2, 1.0), snip(3, 1.0)],
                       ToolAction.CROSS_MEETING: [snip(4, 1.0)]}, context=[])
    res = plan_loop("atlas budget", card([ToolAction.KB_RETRIEVAL, ToolAction.WEB, ToolAction.CROSS_MEETING]),
                    tools)
    assert res.hops_used == 2
    assert res.stop_reason == "confidence"


def test_ten_candidates_give_six_snippets():
    tools = StubTools({ToolAction.KB_RETRIEVAL: [snip(i, 0.1) for i in range(10)]}, context=[])
    res = plan_loop("atlas budget", card([ToolAction.KB_RETRIEVAL]), tools)
    assert len(res.snippets) == 6


def test_empty_tools_stop_without_new_evidence():
    tools = StubTools({}, context=[])
    res = plan_loop("atlas budget", card([ToolAction.KB_RETRIEVAL, ToolAction.WEB]), tools)
    assert res.stop_reason == "no_new_evidence" and res.hops_used == 1
    assert res.snippets == []
    assert "could not find" in res.answer


def test_tool_failure_recorded():
    class Broken(StubTools):
        def call(self, tool, query):
            raise RuntimeError("down")

    res = plan_loop("atlas budget", card([ToolAction.KB_RETRIEVAL]), Broken(context=[snip(0)]))
    assert res.hops[0].failed
    assert "[1]" in res.answer


@given(st.lists(st.sampled_from([ToolAction.KB_RETRIEVAL, ToolAction.CROSS_MEETING, ToolAction.WEB]),
                max_size=3), st.integers(0, 12), st.floats(0.0, 1.0))
@settings(max_examples=80, deadline=None)
def test_plan_loop_bounds(chain, n, score):
    tools = StubTools({t: [snip(i, score, t.name) for i in range(n)] for t in ToolAction},
                      [snip(i, score, "ctx") for i in range(n % 4)])
    res = plan_loop("atlas budget", card(chain), tools)
    assert res.hops_used <= 3
    assert len(res.snippets) <= 6
    assert 0.0 <= res.evidence.retrieval_confidence <= 1.0


# -- simulated world -------------------------------------------------------------

@pytest.fixture(scope="module")
def stratified(world):
    return build_suite(world, "stratified", seed=0, n=60)


def test_parallel_never_slower_than_serial(world, stratified):
    policy = LabelPolicy()
    par, ser = Simulator(world, Mode.PARALLEL), Simulator(world, Mode.SERIAL)
    for i, sc in enumerate(stratified):
        a = par.run(sc, policy, 3, i).latency_s
        b = ser.run(sc, policy, 3, i).latency_s
        assert a <= b + 1e-9


def test_virtual_clock_reproducible(world, stratified):
    sim = Simulator(world)
    a = [sim.run(sc, LabelPolicy(), 5, i).trace.to_jsonl() for i, sc in enumerate(stratified[:15])]
    b = [sim.run(sc, LabelPolicy(), 5, i).trace.to_jsonl() for i, sc in enumerate(stratified[:15])]
    assert a == b


def test_trace_jsonl_lines(world, stratified):
    out = Simulator(world).run(stratified[0], LabelPolicy(), 0, 0)
    lines = out.trace.to_jsonl().splitlines()
    assert len(lines) == len(out.trace.events)
    assert '"event": "Responded"' in lines[-1]


# -- latency statistics ---------------------------------------------------------

def fake_trace(latency_s, band="low"):
    t = ExecutionTrace("q", band=band)
    t.add(0.0, "Received")
    t.add(latency_s * 1000.0, "Responded")
    return t


def test_one_trace():
    s = latency_stats([fake_trace(1.3)])
    assert s.percentiles == {"p50": 1.3, "p90": 1.3}


def test_nearest_rank_one_to_hundred():
    s = latency_stats([fake_trace(float(v)) for v in range(1, 101)])
    assert s.percentiles["p50"] == 50.0 and s.percentiles["p90"] == 90.0


@given(st.lists(st.floats(0, 100), min_size=1, max_size=60), st.integers(1, 100))
def test_nearest_rank_oracle(values, p):
    v = sorted(values)
    k = int(np.ceil(p / 100 * len(v)))
    assert nearest_rank(values, p) == v[max(k, 1) - 1]


def test_slo_flag_false_when_violated():
    s = latency_stats([fake_trace(0.9)] * 8 + [fake_trace(2.5)] * 2, suite="simple")
    assert s.slo["simple"]["p90_ok"] is False
    assert s.slo["simple"]["pass"] is False
    ok = latency_stats([fake_trace(0.9)] * 10, suite="simple")
    assert ok.slo["simple"]["pass"] is True


def test_empty_traces():
    with pytest.raises(EmptyTraces):
        latency_stats([])


def test_timing_validation():
    with pytest.raises(ValueError):
        BackendTiming(talker_first_ms=-1)
