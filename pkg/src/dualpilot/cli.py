"""Command-line entry point.

Every command writes its JSON report (and any artefacts) into ``--out`` and
prints a short summary. Outputs depend only on the configuration, the seed
and the inputs, so re-running a command reproduces its files byte for byte.

Exit codes: 0 success, 1 validation failure, 2 I/O, parse or usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    SplitAssignment,
    class_distribution,
    emit_jsonl,
    parse_jsonl_corpus,
    parse_textgrid,
    verify_splits,
)
from .errors import DimMismatch, DualPilotError, FixtureMissing, ParseError
from .evalkit import (
    DIMENSIONS,
    apply_map,
    correlations,
    js_divergence,
    load_scores,
    model_dimension_table,
    pareto_frontier,
    pava_fit,
    pearson,
    swept_weights,
    weight_sensitivity,
)
from .orchestrator import (
    Backends,
    BackendTiming,
    GateConfig,
    Mode,
    RemoteBackend,
    SentinelDelay,
    ToolTiming,
    latency_stats,
)
from .policy import (
    CqlConfig,
    GreedyPolicy,
    RewardSpec,
    compute_reward,
    constant_policies,
    dump_replay,
    load_replay,
    tool_call_rate,
)
from .router import RouterWeights, derive_labels, forward, train_supervised
from .simulation import (
    LabelPolicy,
    Simulator,
    World,
    build_suite,
    collect_world_replay,
    compare_policies,
    default_policy,
    run_ablation,
    train_dual_policy,
)
from .synth import inject_existing, synthesize_corpus
from .taxonomy import DEFAULT_BAND_WEIGHTS, ClassMapping
from .tools import RetrievalIndex, bm25_search, hybrid_search, load_jsonl_docs

log = logging.getLogger("dualpilot")

PATH_KEYS = ("corpus", "splits", "kb", "fixtures", "weights", "tool_weights", "replay", "scores",
             "mapping")


class ConfigError(DualPilotError):
    pass


class ValidationFailure(DualPilotError):
    """A check ran and failed; carries the report that was written."""


@dataclass
class RunConfig:
    seed: int | None = None  # None: fall back to DUALPILOT_SEED, then 0
    paths: dict = field(default_factory=dict)
    gate: GateConfig = field(default_factory=GateConfig)
    reward: RewardSpec = field(default_factory=RewardSpec)
    timing: BackendTiming = field(default_factory=BackendTiming)
    tool_timing: ToolTiming = field(default_factory=ToolTiming)
    cql: CqlConfig = field(default_factory=CqlConfig)

    @classmethod
    def from_json(cls, obj, base: Path = Path(".")):
        try:
            paths = {}
            for key, value in (obj.get("paths") or {}).items():
                if key not in PATH_KEYS:
                    raise ConfigError(f"unknown path key {key!r}")
                p = Path(value)
                paths[key] = p if p.is_absolute() else base / p
            timing_obj = dict(obj.get("timing") or {})
            if "sentinel" in timing_obj:
                timing_obj["sentinel"] = SentinelDelay(**timing_obj["sentinel"])
            cfg = cls(
                seed=None if obj.get("seed") is None else int(obj["seed"]),
                paths=paths,
                gate=GateConfig(**(obj.get("gate") or {})),
                reward=RewardSpec(**(obj.get("reward") or {})),
                timing=BackendTiming(**timing_obj),
                tool_timing=ToolTiming(**(obj.get("tool_timing") or {})),
                cql=CqlConfig(**(obj.get("cql") or {})),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad configuration: {exc}") from exc
        for key, p in cfg.paths.items():
            if not p.exists():
                raise ConfigError(f"config path {key}={p} does not exist")
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            obj = json.loads(path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_json(obj, path.parent)

    def to_json(self):
        out = {f.name: asdict(getattr(self, f.name)) for f in fields(self) if f.name not in ("seed", "paths")}
        return {"seed": self.seed, "paths": {k: str(v) for k, v in sorted(self.paths.items())}, **out}


# ---------------------------------------------------------------- helpers

def _jsonable(x):
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    if hasattr(x, "to_json"):
        return x.to_json()
    if hasattr(x, "value"):
        return x.value
    raise TypeError(f"not serialisable: {type(x).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable, allow_nan=True) + "\n"


class Job:
    """Per-invocation context: resolved config, seed and output directory."""

    def __init__(self, args, cfg: RunConfig):
        self.args, self.cfg = args, cfg
        self.seed = cfg.seed
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._world = None

    def path(self, key, flag=None):
        value = flag if flag is not None else self.cfg.paths.get(key)
        return Path(value) if value is not None else None

    def write(self, name, report) -> Path:
        if isinstance(report, dict):
            report = {"seed": self.seed, **report}
        p = self.out / name
        p.write_text(dumps(report), "utf-8")
        return p

    def write_lines(self, name, lines) -> Path:
        p = self.out / name
        with open(p, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
        return p

    def mapping(self):
        p = self.path("mapping")
        return ClassMapping.load(p) if p else None

    def world(self) -> World:
        if self._world is None:
            corpus = self.path("corpus", getattr(self.args, "corpus", None))
            if corpus is None:
                self._world = World.shipped(mapping=self.mapping())
            else:
                splits = self.path("splits", getattr(self.args, "splits", None))
                if splits is None:
                    raise ConfigError("a corpus path needs a splits path too")
                meetings = parse_jsonl_corpus(corpus.read_text("utf-8"))
                sa = SplitAssignment.from_json(json.loads(splits.read_text("utf-8")))
                kb = self.path("kb")
                web = self.path("fixtures")
                self._world = World(meetings, sa, load_jsonl_docs(kb) if kb else [],
                                    load_jsonl_docs(web) if web else [], mapping=self.mapping())
        return self._world

    def backends(self):
        url = getattr(self.args, "remote_backend", None)
        if url:
            return Backends(RemoteBackend(url), RemoteBackend(url))
        return Backends.simulated(self.cfg.timing)

    def simulator(self, mode=Mode.PARALLEL, direct=False):
        return Simulator(self.world(), mode, self.cfg.gate, self.cfg.timing, self.cfg.tool_timing,
                         self.backends(), direct=direct)

    def router_weights(self, flag=None):
        p = self.path("weights", flag)
        return RouterWeights.load(p) if p else self.world().supervised_router()

    def policy(self, name):
        if name == "label":
            return LabelPolicy()
        if name == "supervised":
            return GreedyPolicy(self.router_weights())
        if name == "trained":
            route = self.path("weights")
            tool = self.path("tool_weights")
            if route is None or tool is None:
                raise ConfigError("the trained policy needs weights and tool_weights paths")
            return GreedyPolicy(RouterWeights.load(route), RouterWeights.load(tool))
        raise ConfigError(f"unknown policy {name!r}")


# ---------------------------------------------------------------- corpus commands

def cmd_ingest(job: Job):
    meetings = {}
    for name in job.args.inputs:
        p = Path(name)
        data = p.read_text("utf-8")
        if p.suffix.lower() == ".textgrid":
            t = parse_textgrid(data, meeting_id=p.stem)
            meetings[t.meeting_id] = t
        else:
            meetings.update(parse_jsonl_corpus(data))
    for t in meetings.values():
        t.validate()
    job.write_lines("corpus.jsonl", [emit_jsonl([meetings[m]]).rstrip("\n") for m in sorted(meetings)])
    rows = [{"meeting_id": m, "turns": len(t.turns), "speakers": list(t.speakers),
             "duration_s": t.duration} for m, t in sorted(meetings.items())]
    job.write("ingest.json", {"meetings": rows, "n_turns": sum(r["turns"] for r in rows)})
    return f"ingested {len(rows)} meetings, {sum(r['turns'] for r in rows)} turns"


def cmd_inject(job: Job):
    a = job.args
    mapping = job.mapping()
    if a.input:
        meetings = parse_jsonl_corpus(Path(a.input).read_text("utf-8"))
        meetings, splits = inject_existing(meetings, job.seed, a.spacing, mapping=mapping)
        world = World(meetings, splits, mapping=mapping)
    else:
        corpus = synthesize_corpus(a.meetings, a.injected, job.seed, mapping=mapping,
                                   spacing_s=a.spacing)
        world = World.from_corpus(corpus, mapping=mapping)
    world.save(job.out)
    dist = class_distribution(world.meetings.values(), mapping)
    bands = sorted(DEFAULT_BAND_WEIGHTS)
    measured = [dist.weights.get(b, 0.0) for b in bands]
    n_inj = sum(len(t.injected_turns) for t in world.meetings.values())
    job.write("inject.json", {
        "meetings": len(world.meetings),
        "injected": n_inj,
        "band_distribution": dict(zip(bands, measured)),
        "js_divergence": js_divergence(measured, [DEFAULT_BAND_WEIGHTS[b] for b in bands]),
    })
    return f"injected {n_inj} questions into {len(world.meetings)} meetings"


def cmd_verify_splits(job: Job):
    w = job.world()
    report = verify_splits(w.meetings.values(), w.splits)
    job.write("leakage.json", report.to_json())
    if not report.ok:
        n = (len(report.speaker_leaks) + len(report.injection_leaks) + len(report.recording_leaks)
             + len(report.unassigned_meetings))
        raise ValidationFailure(f"split leakage: {n} findings (see leakage.json)")
    return f"splits clean over {len(w.meetings)} meetings"


# ---------------------------------------------------------------- router and policy

def cmd_train_router(job: Job):
    w = job.world()
    train = [w.meetings[m] for m in sorted(w.meetings) if w.splits[m].value == "train"]
    data = derive_labels(train, w.extractor)
    res = train_supervised(data, epochs=job.args.epochs, seed=job.seed)
    res.weights.save(job.out / "router.bin")
    counts = Counter(a.name for _, a in data)
    job.write("train-router.json", {
        "n": len(data), "label_counts": dict(sorted(counts.items())),
        "train_accuracy": res.train_accuracy, "holdout_accuracy": res.holdout_accuracy,
        "epoch_losses": res.epoch_losses, "n_params": res.weights.n_params,
    })
    return f"router: holdout accuracy {res.holdout_accuracy:.3f} on {len(data)} labelled queries"


def cmd_route(job: Job):
    w = job.world()
    weights = job.router_weights(job.args.weights)
    x = w.extractor(job.args.text, job.args.context)
    d = forward(weights, x)
    job.write("route.json", {"text": job.args.text, "context": job.args.context,
                             "action": d.action.name, "confidence": d.confidence,
                             "probs": dict(zip([a.name for a in type(d.action)], d.probs))})
    return f"{d.action.name} ({d.confidence:.3f})"


def cmd_collect_replay(job: Job):
    w = job.world()
    if job.path("weights"):
        w._router = RouterWeights.load(job.path("weights"))
    replay = collect_world_replay(w, job.args.n, job.seed)
    dump_replay(replay, job.out / "replay.jsonl")
    pairs = Counter(f"{t.route_action.name}/{t.tool_action.name}" for t in replay)
    rewards = [compute_reward(t, job.cfg.reward) for t in replay]
    job.write("collect-replay.json", {"n": len(replay), "action_counts": dict(sorted(pairs.items())),
                                      "mean_reward": float(np.mean(rewards)),
                                      "success_rate": float(np.mean([t.task_success for t in replay]))})
    return f"logged {len(replay)} tuples, mean reward {np.mean(rewards):.4f}"


def cmd_train_policy(job: Job):
    w = job.world()
    replay_path = job.path("replay", job.args.replay)
    replay = load_replay(replay_path) if replay_path else collect_world_replay(w, seed=job.seed)
    cfg = replace(job.cfg.cql, seed=job.seed)
    if job.args.epochs is not None:
        cfg = replace(cfg, epochs=job.args.epochs)
    init = job.router_weights()
    res = train_dual_policy(w, replay, cfg, job.cfg.reward, init)
    res.route_weights.save(job.out / "route.bin")
    res.tool_weights.save(job.out / "tool.bin")
    trained = GreedyPolicy(res.route_weights, res.tool_weights)
    trained.name = "trained"
    evals = compare_policies(w, [trained] + constant_policies(), job.cfg.reward, job.seed)
    best_const = max(evals[1:], key=lambda e: e.j)
    report = {
        "n_replay": len(replay),
        "cql": asdict(cfg),
        "route_history": res.route_history,
        "tool_history": res.tool_history,
        "holdout_value": {"before": res.pre_value, "after": res.post_value,
                          "behavior": res.behavior_value},
        "tool_call_rate": tool_call_rate(res.tool_weights, replay),
        "evaluation": [e.to_json() for e in evals],
        "best_constant": best_const.name,
        "dominates_constants": bool(evals[0].j > best_const.j),
    }
    job.write("train-policy.json", report)
    return (f"trained policy J={evals[0].j:.4f}; best constant {best_const.name} "
            f"J={best_const.j:.4f}")


# ---------------------------------------------------------------- retrieval

def _docs(job: Job, flag):
    p = job.path("kb", flag)
    if p is None:
        return job.world().kb
    return load_jsonl_docs(p)


def cmd_index(job: Job):
    docs = _docs(job, job.args.docs)
    index = RetrievalIndex(docs, job.world().extractor if not job.args.docs else None)
    job.write("index.json", {
        "n_docs": len(index.doc_ids), "avg_len": index.avg_len, "vocabulary": len(index.df),
        "df": dict(sorted(index.df.items())), "doc_ids": list(index.doc_ids),
    })
    return f"indexed {len(index.doc_ids)} documents, {len(index.df)} terms"


def cmd_search(job: Job):
    docs = _docs(job, job.args.docs)
    index = RetrievalIndex(docs)
    if job.args.method == "bm25":
        hits = bm25_search(index, job.args.query, job.args.k)
    else:
        hits = hybrid_search(index, job.args.query, job.args.k, job.args.mix)
    rows = [{"doc_id": h.source_id, "score": h.score, "text": h.text} for h in hits]
    job.write("search.json", {"query": job.args.query, "method": job.args.method, "results": rows})
    return "\n".join(f"{r['score']:.4f}\t{r['doc_id']}" for r in rows)


# ---------------------------------------------------------------- simulation

def _suite(job: Job, default="stratified"):
    name = job.args.suite or default
    suite = build_suite(job.world(), name, job.seed)
    if getattr(job.args, "limit", None):
        suite = suite[: job.args.limit]
    return name, suite


def cmd_simulate(job: Job):
    name, suite = _suite(job)
    mode = Mode(job.args.mode or Mode.PARALLEL.value)
    sim = job.simulator(mode)
    policy = job.policy(job.args.policy)
    outs = [sim.run(sc, policy, job.seed, i) for i, sc in enumerate(suite)]
    job.write_lines("traces.jsonl", [o.trace.to_jsonl().rstrip("\n") for o in outs])
    stats = latency_stats([o.trace for o in outs])
    job.write("simulate.json", {"suite": name, "mode": mode.value, "policy": job.args.policy,
                                "n": len(outs), "quality": float(np.mean([o.success for o in outs])),
                                "latency": stats.to_json()})
    return f"{len(outs)} queries, quality {np.mean([o.success for o in outs]):.3f}, " \
           f"P50 {stats.percentiles['p50']:.3f}s"


def cmd_bench(job: Job):
    name, suite = _suite(job, "simple")
    mode = Mode(job.args.mode or Mode.PARALLEL.value)
    sim = job.simulator(mode)
    policy = job.policy(job.args.policy)
    traces = [sim.run(sc, policy, job.seed, i).trace for i, sc in enumerate(suite)]
    budget = name if name in ("simple", "complex") else None
    stats = latency_stats(traces, (50, 90, 99), suite=budget)
    job.write("bench.json", {"suite": name, "mode": mode.value, "policy": job.args.policy,
                             **stats.to_json()})
    p = stats.percentiles
    return f"{name}: P50 {p['p50']:.3f}s P90 {p['p90']:.3f}s over {stats.n} queries"


def cmd_ablate(job: Job):
    _, suite = _suite(job)
    modes = [Mode(job.args.mode)] if job.args.mode else list(Mode)
    w = job.world()
    policy = job.policy(job.args.policy) if job.args.policy != "supervised" else default_policy(w)
    reports = [run_ablation(m, suite, job.seed, w, policy, gate=job.cfg.gate, timing=job.cfg.timing,
                            tool_timing=job.cfg.tool_timing, backends=job.backends())
               for m in modes]
    job.write("ablate.json", {"n": len(suite), "reports": [r.to_json() for r in reports]})
    return "\n".join(f"{r.mode}: quality {r.quality:.3f} P50 {r.p50_s:.2f}s P90 {r.p90_s:.2f}s"
                     for r in reports)


# ---------------------------------------------------------------- evaluation statistics

def _scores(job: Job):
    p = job.path("scores", job.args.scores)
    if p is None:
        from importlib import resources

        with resources.as_file(resources.files("dualpilot") / "data" / "scores.jsonl") as f:
            return load_scores(f)
    return load_scores(p)


def _auto_overall(rec):
    return float(np.mean([float(rec["dims"][d]) for d in DIMENSIONS]))


def _human_pairs(job: Job):
    recs = [r for r in _scores(job) if r.get("human_overall") is not None]
    if len(recs) < 6:
        raise ValidationFailure("need at least 6 human-rated records")
    auto = np.array([_auto_overall(r) for r in recs])
    human = np.array([float(r["human_overall"]) for r in recs])
    return auto, human


def cmd_calibrate(job: Job):
    auto, human = _human_pairs(job)
    perm = np.random.default_rng(job.seed).permutation(len(auto))
    n_fit = len(auto) // 2
    fit, held = np.sort(perm[:n_fit]), np.sort(perm[n_fit:])
    m = pava_fit(auto[fit], human[fit])
    (job.out / "calibration_map.json").write_text(dumps(m.to_json()), "utf-8")
    raw = pearson(auto[held], human[held])
    cal = pearson(apply_map(m, auto[held]), human[held])
    job.write("calibrate.json", {"n_fit": int(n_fit), "n_heldout": int(len(held)),
                                 "heldout_pearson_raw": raw, "heldout_pearson_calibrated": cal})
    return f"held-out Pearson {raw:.3f} -> {cal:.3f}"


def cmd_stats(job: Job):
    auto, human = _human_pairs(job)
    rep = correlations(auto, human, job.args.n_perm, job.args.n_boot, job.seed)
    models, table = model_dimension_table(_scores(job))
    job.write("stats.json", {
        "n": int(len(auto)), "correlation": rep.to_json(),
        "models": {m: dict(zip(DIMENSIONS, row.tolist())) | {"overall": float(row.mean())}
                   for m, row in zip(models, table)},
    })
    return f"Pearson {rep.pearson_r:.3f} (p={rep.p_two_sided:.4g}), Spearman {rep.spearman_rho:.3f}"


def cmd_sweep_weights(job: Job):
    models, table = model_dimension_table(_scores(job))
    tau = weight_sensitivity(table, job.args.max_upweight, job.args.steps)
    n = sum(1 for _ in swept_weights(table.shape[1], job.args.max_upweight, job.args.steps))
    job.write("sweep-weights.json", {"models": models, "n_weightings": n, "min_kendall_tau": tau,
                                     "max_upweight": job.args.max_upweight, "steps": job.args.steps})
    return f"min Kendall tau {tau:.3f} over {n} weightings"


def cmd_pareto(job: Job):
    if job.args.points:
        pts = []
        for line in Path(job.args.points).read_text("utf-8").splitlines():
            if line.strip():
                o = json.loads(line)
                pts.append((o.get("name", f"p{len(pts)}"), float(o["quality"]), float(o["latency_s"]),
                            float(o["cost_k"])))
    else:
        w = job.world()
        policies = [LabelPolicy(), default_policy(w)] + constant_policies()
        policies[1].name = "supervised"
        evals = compare_policies(w, policies, job.cfg.reward, job.seed)
        pts = [(e.name, e.success_rate, e.mean_latency_s, e.mean_tokens_k) for e in evals]
    front = pareto_frontier([p[1:] for p in pts])
    keep = {tuple(f) for f in front}
    rows = [{"name": n, "quality": q, "latency_s": l, "cost_k": c, "frontier": (q, l, c) in keep}
            for n, q, l, c in pts]
    job.write("pareto.json", {"points": rows, "frontier": [r["name"] for r in rows if r["frontier"]]})
    return "frontier: " + ", ".join(r["name"] for r in rows if r["frontier"])


# ---------------------------------------------------------------- parser

COMMANDS = {
    "ingest": cmd_ingest, "inject": cmd_inject, "verify-splits": cmd_verify_splits,
    "train-router": cmd_train_router, "route": cmd_route, "collect-replay": cmd_collect_replay,
    "train-policy": cmd_train_policy, "index": cmd_index, "search": cmd_search,
    "simulate": cmd_simulate, "bench": cmd_bench, "ablate": cmd_ablate, "calibrate": cmd_calibrate,
    "stats": cmd_stats, "sweep-weights": cmd_sweep_weights, "pareto": cmd_pareto,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed and DUALPILOT_SEED")
    common.add_argument("--out", default="dualpilot-out", help="output directory")
    common.add_argument("--remote-backend", metavar="URL",
                        help="stream Talker and Planner tokens from this HTTP endpoint")
    common.add_argument("-v", "--verbose", action="store_true")
    world = argparse.ArgumentParser(add_help=False)
    world.add_argument("--corpus", help="corpus JSONL (default: the shipped world)")
    world.add_argument("--splits", help="split assignment JSON")
    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--mode", choices=[m.value for m in Mode])
    sim.add_argument("--suite", choices=["simple", "complex", "te", "stratified", "all"])
    sim.add_argument("--policy", choices=["label", "supervised", "trained"], default="supervised")
    sim.add_argument("--limit", type=int)
    scores = argparse.ArgumentParser(add_help=False)
    scores.add_argument("--scores", help="judge score JSONL (default: shipped sample)")

    ap = argparse.ArgumentParser(prog="dualpilot", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("ingest", parents=[common], help="parse TextGrid or JSONL transcripts")
    p.add_argument("inputs", nargs="+")
    p = sub.add_parser("inject", parents=[common], help="inject labelled questions (synthetic corpus "
                                                        "when no input is given)")
    p.add_argument("input", nargs="?")
    p.add_argument("--meetings", type=int, default=231)
    p.add_argument("--injected", type=int, default=1180)
    p.add_argument("--spacing", type=float, default=300.0)
    sub.add_parser("verify-splits", parents=[common, world], help="check speaker, recording and "
                                                                  "injection leakage")
    p = sub.add_parser("train-router", parents=[common, world], help="supervised routing head")
    p.add_argument("--epochs", type=int, default=5)
    p = sub.add_parser("route", parents=[common, world], help="route one query")
    p.add_argument("text")
    p.add_argument("--context", default="")
    p.add_argument("--weights")
    p = sub.add_parser("collect-replay", parents=[common, world], help="log replay tuples")
    p.add_argument("--n", type=int, default=8500)
    p = sub.add_parser("train-policy", parents=[common, world], help="CQL refinement of both heads")
    p.add_argument("--replay")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("index", parents=[common, world], help="build a BM25 index and report it")
    p.add_argument("--docs")
    p = sub.add_parser("search", parents=[common, world], help="search KB documents")
    p.add_argument("query")
    p.add_argument("--docs")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--method", choices=["bm25", "hybrid"], default="hybrid")
    p.add_argument("--mix", type=float, default=0.5)
    sub.add_parser("simulate", parents=[common, world, sim], help="run a suite and write traces")
    sub.add_parser("bench", parents=[common, world, sim], help="latency percentiles and SLO flags")
    sub.add_parser("ablate", parents=[common, world, sim], help="compare execution modes")
    sub.add_parser("calibrate", parents=[common, scores], help="fit the isotonic calibration map")
    p = sub.add_parser("stats", parents=[common, scores], help="judge-human agreement statistics")
    p.add_argument("--n-perm", type=int, default=10_000)
    p.add_argument("--n-boot", type=int, default=2_000)
    p = sub.add_parser("sweep-weights", parents=[common, scores], help="ranking stability under "
                                                                       "reweighting")
    p.add_argument("--max-upweight", type=float, default=2.0)
    p.add_argument("--steps", type=int, default=4)
    p = sub.add_parser("pareto", parents=[common, world], help="quality-latency-cost frontier")
    p.add_argument("--points", help="JSONL of {name, quality, latency_s, cost_k}")
    return ap


def resolve_config(args) -> RunConfig:
    """Flags win over the config file, which wins over DUALPILOT_SEED."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    elif cfg.seed is None:
        env = os.environ.get("DUALPILOT_SEED")
        try:
            cfg.seed = int(env) if env is not None else 0
        except ValueError as exc:
            raise ConfigError(f"DUALPILOT_SEED={env!r} is not an integer") from exc
    return cfg


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        job = Job(args, resolve_config(args))
        summary = COMMANDS[args.command](job)
    except ValidationFailure as exc:
        print(f"dualpilot {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, ParseError, ConfigError, FixtureMissing,
            DimMismatch, UnicodeDecodeError) as exc:
        print(f"dualpilot {args.command}: {exc}", file=sys.stderr)
        return 2
    except (DualPilotError, ValueError) as exc:
        print(f"dualpilot {args.command}: {exc}", file=sys.stderr)
        return 1
    if summary:
        print(summary)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
