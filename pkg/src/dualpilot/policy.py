"""Offline learning for the routing head and the tool head.

Each query is a one-step decision: the logged reward is the regression
target for the logged action's Q-value (no bootstrapping). Both heads are
trained with a conservative Q-learning objective

    (Q(s, a) - r)^2 + lambda * (logsumexp_a' Q(s, a') - Q(s, a))

where the logits of the head are read as Q-values.
"""
from __future__ import annotations

import base64
import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DimMismatch, EmptyReplay, MissingGroundTruth
from .evalkit import rouge_l
from .router import (
    Adam,
    RouterWeights,
    ToolWeights,
    backward,
    hidden_and_logits,
    logits,
    logsumexp,
    softmax,
)
from .taxonomy import RoutingAction

log = logging.getLogger(__name__)


class ToolAction(Enum):
    NONE = 0
    KB_RETRIEVAL = 1
    CROSS_MEETING = 2
    WEB = 3
    COMBO = 4


class QueryKind(Enum):
    FACTUAL = "factual"
    TASK_EXECUTION = "task_execution"
    CROSS_MEETING = "cross_meeting"


@dataclass(frozen=True)
class EvidenceState:
    retrieval_confidence: float = 0.0
    cross_cache_hit_rate: float = 0.0

    def __post_init__(self):
        for name in ("retrieval_confidence", "cross_cache_hit_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def as_array(self):
        return np.array([self.retrieval_confidence, self.cross_cache_hit_rate])


@dataclass(frozen=True)
class RewardSpec:
    alpha: float = 1.0
    beta: float = 0.05  # per second
    gamma: float = 0.01  # per kilotoken

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.alpha, self.beta, self.gamma)):
            raise ValueError("reward coefficients must be finite")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


@dataclass
class ReplayTuple:
    features: np.ndarray
    route_action: RoutingAction
    tool_action: ToolAction
    task_success: int
    latency_s: float
    tokens_k: float
    evidence_state: EvidenceState = field(default_factory=EvidenceState)

    def __post_init__(self):
        if self.latency_s < 0 or self.tokens_k < 0:
            raise ValueError("latency and token cost must be non-negative")
        self.task_success = int(bool(self.task_success))

    def to_json(self):
        feats = np.ascontiguousarray(self.features, dtype="<f8")
        return {
            "features": base64.b64encode(feats.tobytes()).decode("ascii"),
            "dim": int(feats.size),
            "route_action": self.route_action.name,
            "tool_action": self.tool_action.name,
            "task_success": self.task_success,
            "latency_s": self.latency_s,
            "tokens_k": self.tokens_k,
            "evidence_state": {
                "retrieval_confidence": self.evidence_state.retrieval_confidence,
                "cross_cache_hit_rate": self.evidence_state.cross_cache_hit_rate,
            },
        }

    @classmethod
    def from_json(cls, obj):
        feats = np.frombuffer(base64.b64decode(obj["features"]), dtype="<f8").copy()
        if feats.size != int(obj["dim"]):
            raise DimMismatch(f"feature blob has {feats.size} values, dim says {obj['dim']}")
        return cls(
            features=feats,
            route_action=RoutingAction[obj["route_action"]],
            tool_action=ToolAction[obj["tool_action"]],
            task_success=int(obj["task_success"]),
            latency_s=float(obj["latency_s"]),
            tokens_k=float(obj["tokens_k"]),
            evidence_state=EvidenceState(**obj.get("evidence_state", {})),
        )


def dump_replay(replay, path):
    with open(path, "w", encoding="utf-8") as fh:
        for t in replay:
            fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")


def load_replay(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(ReplayTuple.from_json(json.loads(line)))
    return out


def compute_reward(t: ReplayTuple, spec: RewardSpec | None = None) -> float:
    spec = spec or RewardSpec()
    return spec.alpha * t.task_success - spec.beta * t.latency_s - spec.gamma * t.tokens_k


# ---------------------------------------------------------------- success proxies

ROUGE_THRESHOLD = 0.6
HIT_RATE_THRESHOLD = 0.5
_BULLET = re.compile(r"^\s*[-*•]\s+\S", re.MULTILINE)
_ASSIGNEE = re.compile(r"owner:\s*\S+|@\w+", re.IGNORECASE)


def has_structure(answer: str) -> bool:
    """At least one bullet line and one assignee marker."""
    return bool(_BULLET.search(answer or "")) and bool(_ASSIGNEE.search(answer or ""))


def task_success(query_class, answer, ground_truth=None, evidence_state=None, trace=None) -> bool:
    """Proxy success for one answered query.

    Factual answers need ROUGE-L F above 0.6 against the ground truth,
    task-execution answers need bullets plus an assignee, and cross-meeting
    answers need a cross-session hit rate strictly above 0.5.
    """
    kind = QueryKind(getattr(query_class, "value", query_class))
    if kind is QueryKind.FACTUAL:
        if not ground_truth:
            raise MissingGroundTruth("factual query without ground truth")
        return rouge_l(answer or "", ground_truth)[2] > ROUGE_THRESHOLD
    if kind is QueryKind.TASK_EXECUTION:
        return has_structure(answer)
    hit = evidence_state.cross_cache_hit_rate if evidence_state is not None else 0.0
    return hit > HIT_RATE_THRESHOLD


# ---------------------------------------------------------------- CQL

@dataclass
class CqlConfig:
    lambda_cql: float = 0.5
    epochs: int = 10
    step: float = 1e-3
    batch: int = 64
    seed: int = 0
    holdout: float = 0.1
    final_lr_frac: float = 0.0  # cosine decay floor, as a fraction of ``step``

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda_cql < 0:
            raise ValueError("lambda_cql must be >= 0")
        if self.step <= 0 or self.batch < 1:
            raise ValueError("step must be > 0 and batch >= 1")


def cql_from_logits(Q, actions, rewards, lambda_cql):
    """Mean CQL loss, mean penalty and dLoss/dQ for a batch."""
    Q = np.asarray(Q, dtype=float)
    n = len(actions)
    rows = np.arange(n)
    qa = Q[rows, actions]
    lse = logsumexp(Q, axis=1)
    penalty = lse - qa
    loss = (qa - rewards) ** 2 + lambda_cql * penalty
    dQ = lambda_cql * softmax(Q, axis=1)
    dQ[rows, actions] += 2.0 * (qa - rewards) - lambda_cql
    return float(loss.mean()), float(penalty.mean()), dQ / n


def cql_loss_and_grad(weights: RouterWeights, X, actions, rewards, lambda_cql=0.5):
    """CQL loss of a batch and the exact parameter gradient."""
    actions = np.asarray([getattr(a, "value", a) for a in np.atleast_1d(actions)], dtype=int)
    rewards = np.atleast_1d(np.asarray(rewards, dtype=float))
    X, pre, h, Q = hidden_and_logits(weights, X)
    loss, _, dQ = cql_from_logits(Q, actions, rewards, lambda_cql)
    return loss, backward(weights, X, pre, h, dQ)


def tool_input(features, evidence: EvidenceState):
    return np.concatenate([np.asarray(features, dtype=float), evidence.as_array()])


def _fit_head(w, X, a, r, cfg: CqlConfig, rng):
    """Adam with cosine learning-rate decay; returns per-epoch mean loss and penalty."""
    opt = Adam(w.arrays(), lr=cfg.step)
    n = len(a)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch))
    total = cfg.epochs * steps_per_epoch
    t = 0
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch):
            idx = order[i:i + cfg.batch]
            Xb, pre, h, Q = hidden_and_logits(w, X[idx])
            _, _, dQ = cql_from_logits(Q, a[idx], r[idx], cfg.lambda_cql)
            frac = cfg.final_lr_frac + (1 - cfg.final_lr_frac) * 0.5 * (1 + math.cos(math.pi * t / total))
            opt.step(backward(w, Xb, pre, h, dQ).arrays(), lr=cfg.step * frac)
            t += 1
        loss, pen, _ = cql_from_logits(logits(w, X), a, r, cfg.lambda_cql)
        history.append((loss, pen))
    return history


@dataclass
class CqlResult:
    route_weights: RouterWeights
    tool_weights: ToolWeights | None
    route_history: list
    tool_history: list
    pre_value: float
    post_value: float
    behavior_value: float
    holdout_index: np.ndarray

    def __iter__(self):
        yield self.route_weights
        yield self.tool_weights


def replay_arrays(replay, spec: RewardSpec):
    X = np.stack([np.asarray(t.features, dtype=float) for t in replay])
    ra = np.array([t.route_action.value for t in replay])
    ta = np.array([t.tool_action.value for t in replay])
    r = np.array([compute_reward(t, spec) for t in replay])
    E = np.stack([t.evidence_state.as_array() for t in replay])
    return X, ra, ta, r, E


def greedy_value(route_w, tool_w, replay, spec: RewardSpec | None = None) -> float:
    """Matched-action estimate of the greedy dual policy's value.

    Averages the logged reward over tuples whose logged (route, tool) pair
    agrees with the greedy choice; the tool is ignored when the greedy route
    is Fast. Returns NaN when nothing matches.
    """
    spec = spec or RewardSpec()
    if not replay:
        return float("nan")
    X, ra, ta, r, E = replay_arrays(replay, spec)
    g_route = np.argmax(logits(route_w, X), axis=1)
    match = g_route == ra
    if tool_w is not None:
        g_tool = np.argmax(logits(tool_w, np.hstack([X, E])), axis=1)
        match &= (g_route == RoutingAction.FAST.value) | (g_tool == ta)
    return float(r[match].mean()) if match.any() else float("nan")


def train_cql(replay, init: RouterWeights, tool_init: ToolWeights | None = None,
              cfg: CqlConfig | None = None, spec: RewardSpec | None = None) -> CqlResult:
    """Fit both heads on logged tuples.

    The routing head sees every tuple. The tool head sees
    ``features ++ evidence`` for tuples routed to the Planner, since the
    Talker never calls tools. A seeded ``cfg.holdout`` share is kept aside
    for the before/after greedy-value estimate.
    """
    if not replay:
        raise EmptyReplay("no replay tuples")
    cfg = cfg or CqlConfig()
    spec = spec or RewardSpec()
    X, ra, ta, r, E = replay_arrays(replay, spec)
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite reward in replay")
    if X.shape[1] != init.dim:
        raise DimMismatch(f"replay features have dim {X.shape[1]}, routing head expects {init.dim}")
    rng = np.random.default_rng(cfg.seed)
    n = len(replay)
    perm = rng.permutation(n)
    n_hold = int(round(cfg.holdout * n)) if n >= 10 else 0
    hold, train = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    held = [replay[i] for i in hold]

    pre = greedy_value(init, tool_init, held, spec)
    route_w = init.copy()
    route_hist = _fit_head(route_w, X[train], ra[train], r[train], cfg, rng)

    tool_w, tool_hist = None, []
    if tool_init is not None:
        XT = np.hstack([X, E])
        if XT.shape[1] != tool_init.dim:
            raise DimMismatch(f"tool head expects {tool_init.dim}, got {XT.shape[1]}")
        planner = train[ra[train] != RoutingAction.FAST.value]
        tool_w = tool_init.copy()
        if len(planner):
            tool_hist = _fit_head(tool_w, XT[planner], ta[planner], r[planner], cfg, rng)
    post = greedy_value(route_w, tool_w, held, spec)
    behavior = float(r[hold].mean()) if n_hold else float("nan")
    log.info("cql: held-out greedy value %.4f -> %.4f (behavior %.4f)", pre, post, behavior)
    return CqlResult(route_w, tool_w, route_hist, tool_hist, pre, post, behavior, hold)


def select_tool(tool_weights: ToolWeights, features, evidence: EvidenceState) -> ToolAction:
    """Greedy tool choice; ties go to the lowest index."""
    z = logits(tool_weights, tool_input(features, evidence))[0]
    return ToolAction(int(np.argmax(z)))


def tool_call_rate(tool_weights, replay) -> float:
    """Fraction of tuples on which the head would call any tool."""
    if not replay:
        raise EmptyReplay("no replay tuples")
    X = np.stack([tool_input(t.features, t.evidence_state) for t in replay])
    return float(np.mean(np.argmax(logits(tool_weights, X), axis=1) != ToolAction.NONE.value))


# ---------------------------------------------------------------- policies

class Policy:
    """Maps (features, evidence) to a routing action with confidence and a tool."""

    name = "policy"

    def route(self, features, scenario=None, rng=None):
        raise NotImplementedError

    def tool(self, features, evidence, route, scenario=None, rng=None):
        raise NotImplementedError


class ConstantPolicy(Policy):
    def __init__(self, route: RoutingAction, tool: ToolAction):
        self.route_action, self.tool_action = route, tool
        self.name = f"const-{route.name}-{tool.name}"

    def route(self, features, scenario=None, rng=None):
        return self.route_action, 1.0

    def tool(self, features, evidence, route, scenario=None, rng=None):
        return self.tool_action


class GreedyPolicy(Policy):
    """Argmax of the routing head and the tool head.

    Confidence is the softmax probability of the chosen action.
    """

    name = "greedy"

    def __init__(self, route_weights: RouterWeights, tool_weights: ToolWeights | None = None,
                 tool_rule=None):
        self.route_weights, self.tool_weights = route_weights, tool_weights
        self.tool_rule = tool_rule or heuristic_tool

    def route(self, features, scenario=None, rng=None):
        z = logits(self.route_weights, features)[0]
        i = int(np.argmax(z))
        return RoutingAction(i), float(softmax(z)[i])

    def tool(self, features, evidence, route, scenario=None, rng=None):
        if self.tool_weights is None:
            return self.tool_rule(route, evidence)
        return select_tool(self.tool_weights, features, evidence)


def heuristic_tool(route: RoutingAction, evidence: EvidenceState) -> ToolAction:
    """Rule used to seed tool traces: match the tool to the route."""
    if route is RoutingAction.SLOW_RAG:
        return ToolAction.KB_RETRIEVAL
    if route is RoutingAction.SLOW_CROSS:
        return ToolAction.CROSS_MEETING
    return ToolAction.NONE


class BehaviorPolicy(Policy):
    """Base policy with epsilon-uniform exploration over both action sets."""

    name = "behavior"

    def __init__(self, base: Policy, epsilon: float = 0.3, tool_rule=heuristic_tool,
                 tool_epsilon: float | None = None):
        tool_epsilon = epsilon if tool_epsilon is None else tool_epsilon
        if not (0.0 <= epsilon <= 1.0 and 0.0 <= tool_epsilon <= 1.0):
            raise ValueError("exploration rates must lie in [0, 1]")
        self.base, self.epsilon, self.tool_rule = base, epsilon, tool_rule
        self.tool_epsilon = tool_epsilon

    def route(self, features, scenario=None, rng=None):
        action, conf = self.base.route(features, scenario, rng)
        if rng.random() < self.epsilon:
            action = RoutingAction(int(rng.integers(len(RoutingAction))))
        return action, 1.0

    def tool(self, features, evidence, route, scenario=None, rng=None):
        if rng.random() < self.tool_epsilon:
            return ToolAction(int(rng.integers(len(ToolAction))))
        return self.tool_rule(route, evidence)


def constant_policies():
    return [ConstantPolicy(r, t) for r in RoutingAction for t in ToolAction]


def collect_replay(scenarios, behavior_policy: Policy, orchestrator, n: int, seed: int = 0) -> list:
    """Run ``n`` seeded queries (scenarios drawn with replacement) and log one tuple each.

    ``orchestrator`` must provide ``run(scenario, policy, seed, index)``
    returning an outcome with ``features``, ``route``, ``tool``,
    ``success``, ``latency_s``, ``tokens_k`` and ``evidence``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scenarios = list(scenarios)
    if not scenarios:
        raise EmptyReplay("no scenarios to replay")
    picks = np.random.default_rng(seed).integers(0, len(scenarios), size=n)
    out = []
    for i, k in enumerate(picks):
        o = orchestrator.run(scenarios[int(k)], behavior_policy, seed, i)
        out.append(ReplayTuple(o.features, o.route, o.tool, int(o.success), o.latency_s, o.tokens_k,
                               o.probe))
    return out


@dataclass
class PolicyEvaluation:
    name: str
    j: float
    success_rate: float
    mean_latency_s: float
    mean_tokens_k: float
    n: int

    def to_json(self):
        return dict(self.__dict__)


def evaluate_policy(policy: Policy, scenarios, orchestrator, spec: RewardSpec | None = None,
                    seed: int = 0, reps: int = 1) -> PolicyEvaluation:
    """Mean composite reward J of ``policy`` run online on the simulator.

    Query ``i`` of repetition ``k`` uses the random stream ``(seed, k, i)``
    for every policy, so policy comparisons share their noise.
    """
    spec = spec or RewardSpec()
    rewards, succ, lat, tok = [], [], [], []
    for k in range(reps):
        for i, sc in enumerate(scenarios):
            o = orchestrator.run(sc, policy, seed, (k, i))
            t = ReplayTuple(o.features, o.route, o.tool, int(o.success), o.latency_s, o.tokens_k, o.probe)
            rewards.append(compute_reward(t, spec))
            succ.append(o.success)
            lat.append(o.latency_s)
            tok.append(o.tokens_k)
    if not rewards:
        raise EmptyReplay("no scenarios to evaluate")
    return PolicyEvaluation(policy.name, float(np.mean(rewards)), float(np.mean(succ)),
                            float(np.mean(lat)), float(np.mean(tok)), len(rewards))
