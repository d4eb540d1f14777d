"""Scoring and statistics downstream of an LLM judge.

Judge outputs arrive as data (five 1-10 dimension scores per answer). This
module aggregates them, calibrates against human ratings with isotonic
regression, and provides the agreement, correlation, divergence and
frontier utilities used by the benchmark reports.
"""
from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import stats

from .errors import (
    BadDistribution,
    BadWeights,
    DegenerateAgreement,
    DegenerateInput,
    EmptyReference,
    EmptyTE,
    LengthMismatch,
)

DIMENSIONS = ("factual", "user_need", "conciseness", "structure", "completeness")
EQUAL_WEIGHTS = (0.2, 0.2, 0.2, 0.2, 0.2)


@dataclass(frozen=True)
class DimensionScores:
    factual: float
    user_need: float
    conciseness: float
    structure: float
    completeness: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (1.0 <= v <= 10.0):
                raise ValueError(f"{f.name}={v} outside [1, 10]")

    def as_array(self):
        return np.array([getattr(self, d) for d in DIMENSIONS], dtype=float)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d[k]) for k in DIMENSIONS})


def check_weights(weights):
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(DIMENSIONS),):
        raise BadWeights(f"need {len(DIMENSIONS)} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise BadWeights("weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise BadWeights(f"weights sum to {w.sum()!r}")
    return w


def aggregate(scores, weights=EQUAL_WEIGHTS) -> float:
    """Weighted mean of the five dimensions."""
    w = check_weights(weights)
    x = scores.as_array() if isinstance(scores, DimensionScores) else np.asarray(scores, float)
    return float(w @ x)


# -- isotonic calibration ---------------------------------------------------


@dataclass
class IsotonicMap:
    breakpoints: list
    fitted: list

    def __post_init__(self):
        if len(self.breakpoints) != len(self.fitted):
            raise LengthMismatch("breakpoints and fitted differ in length")
        if any(b > a + 1e-12 for a, b in zip(self.fitted[1:], self.fitted[:-1])):
            raise ValueError("fitted values must be non-decreasing")

    def to_json(self):
        return {"breakpoints": list(map(float, self.breakpoints)),
                "fitted": list(map(float, self.fitted))}

    @classmethod
    def from_json(cls, obj):
        return cls(list(obj["breakpoints"]), list(obj["fitted"]))

    def __call__(self, x):
        return apply_map(self, x)


def pava(y, w=None):
    """Weighted pool-adjacent-violators; returns the fitted vector."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    # stack of blocks: (mean, weight, count)
    means, weights, counts = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, c2 = means.pop(), weights.pop(), counts.pop()
            m1, w1, c1 = means.pop(), weights.pop(), counts.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            weights.append(wt)
            counts.append(c1 + c2)
    return np.repeat(means, counts)


def pava_fit(auto_scores, human_scores) -> IsotonicMap:
    """Least-squares non-decreasing fit of human on auto scores.

    Observations sharing an x value are averaged first (weighted by count),
    so the fit is a function of x.
    """
    x = np.asarray(auto_scores, dtype=float)
    y = np.asarray(human_scores, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"lengths differ: {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise LengthMismatch("need at least two observations")
    ux, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=y)
    fitted = pava(sums / counts, counts)
    return IsotonicMap(ux.tolist(), fitted.tolist())


def apply_map(m: IsotonicMap, x):
    """Piecewise-linear interpolation through the fitted points, clamped at the ends."""
    out = np.interp(x, m.breakpoints, m.fitted)
    return float(out) if np.ndim(out) == 0 else out


# -- correlation and significance -----------------------------------------


@dataclass
class CorrelationReport:
    pearson_r: float
    spearman_rho: float
    kendall_tau: float
    p_two_sided: float
    spearman_p: float
    kendall_p: float
    ci95: tuple

    def to_json(self):
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return d


def _check_pair(xs, ys, min_n=3):
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"lengths differ: {x.shape} vs {y.shape}")
    if len(x) < min_n:
        raise DegenerateInput(f"need at least {min_n} pairs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DegenerateInput("non-finite values")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInput("a constant vector has no correlation")
    return x, y


def pearson(x, y) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0:
        return float("nan")
    return float(np.clip(xc @ yc / denom, -1.0, 1.0))


def spearman(x, y) -> float:
    return pearson(stats.rankdata(x), stats.rankdata(y))


def kendall(x, y) -> float:
    """Kendall tau-b."""
    return float(stats.kendalltau(x, y).statistic)


def fisher_p(r, n) -> float:
    if n <= 3:
        return 1.0
    if abs(r) >= 1.0:
        return 0.0
    z = math.atanh(r) * math.sqrt(n - 3)
    return float(2.0 * stats.norm.sf(abs(z)))


def permutation_p(x, y, statistic, n_perm=10_000, seed=0) -> float:
    """Two-sided permutation p for ``|statistic|``.

    Enumerates every permutation of ``y`` when n! <= n_perm; otherwise draws
    ``n_perm`` seeded permutations and uses the (count + 1) / (n_perm + 1)
    estimator.
    """
    obs = abs(statistic(x, y)) - 1e-12
    n = len(y)
    if math.factorial(n) <= n_perm:
        hits = total = 0
        for perm in itertools.permutations(range(n)):
            hits += abs(statistic(x, y[list(perm)])) >= obs
            total += 1
        return hits / total
    rng = np.random.default_rng(seed)
    hits = sum(abs(statistic(x, rng.permutation(y))) >= obs for _ in range(n_perm))
    return (hits + 1) / (n_perm + 1)


def bootstrap_replicates(x, y, statistic, n_boot=10_000, seed=0):
    """Paired bootstrap replicates; all n^n resamples when that is <= n_boot."""
    n = len(x)
    if n ** n <= n_boot:
        idx = np.array(list(itertools.product(range(n), repeat=n)))
    else:
        idx = np.random.default_rng(seed).integers(0, n, size=(n_boot, n))
    reps = np.array([statistic(x[i], y[i]) for i in idx])
    return reps[np.isfinite(reps)]


def jackknife(x, y, statistic):
    n = len(x)
    vals = np.array([statistic(np.delete(x, i), np.delete(y, i)) for i in range(n)])
    return vals[np.isfinite(vals)]


def bca_interval(point, reps, jack, level=0.95):
    """BCa interval from bootstrap replicates and jackknife values.

    Falls back to the plain percentile interval when every replicate lies on
    one side of the point estimate (bias correction unbounded).
    """
    alpha = (1.0 - level) / 2.0
    if len(reps) == 0:
        return (point, point)
    frac = float(np.mean(reps < point))
    if frac <= 0.0 or frac >= 1.0:
        lo, hi = np.quantile(reps, [alpha, 1 - alpha])
        return (float(lo), float(hi))
    z0 = stats.norm.ppf(frac)
    d = jack.mean() - jack if len(jack) else np.zeros(1)
    den = 6.0 * float((d ** 2).sum()) ** 1.5
    a = float((d ** 3).sum()) / den if den > 0 else 0.0
    qs = []
    for za in (stats.norm.ppf(alpha), stats.norm.ppf(1 - alpha)):
        qs.append(stats.norm.cdf(z0 + (z0 + za) / (1 - a * (z0 + za))))
    lo, hi = np.quantile(reps, qs)
    return (float(lo), float(hi))


def correlations(xs, ys, n_perm=10_000, n_boot=10_000, seed=0) -> CorrelationReport:
    x, y = _check_pair(xs, ys)
    r = pearson(x, y)
    reps = bootstrap_replicates(x, y, pearson, n_boot, seed)
    ci = bca_interval(r, reps, jackknife(x, y, pearson))
    return CorrelationReport(
        pearson_r=r,
        spearman_rho=spearman(x, y),
        kendall_tau=kendall(x, y),
        p_two_sided=fisher_p(r, len(x)),
        spearman_p=permutation_p(x, y, spearman, n_perm, seed),
        kendall_p=permutation_p(x, y, kendall, n_perm, seed + 1),
        ci95=ci,
    )


# -- agreement -------------------------------------------------------------


def cohens_kappa(ratings_a, ratings_b, weighting=None) -> float:
    """Cohen's kappa; ``weighting="linear"`` treats sorted categories as ordinal."""
    a, b = list(ratings_a), list(ratings_b)
    if len(a) != len(b):
        raise LengthMismatch("rating sequences differ in length")
    if not a:
        raise DegenerateAgreement("no ratings")
    cats = sorted(set(a) | set(b))
    k = len(cats)
    pos = {c: i for i, c in enumerate(cats)}
    obs = np.zeros((k, k))
    for x, y in zip(a, b):
        obs[pos[x], pos[y]] += 1
    obs /= len(a)
    exp = np.outer(obs.sum(1), obs.sum(0))
    if weighting is None:
        w = np.eye(k)
    elif str(weighting).lower() == "linear":
        i, j = np.indices((k, k))
        w = 1.0 - np.abs(i - j) / max(k - 1, 1)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    po, pe = float((w * obs).sum()), float((w * exp).sum())
    if pe >= 1.0 - 1e-12:
        raise DegenerateAgreement("chance agreement is 1; kappa undefined")
    return (po - pe) / (1.0 - pe)


def mean_pairwise_kappa(raters, weighting=None) -> float:
    """Average Cohen's kappa over all rater pairs (``raters`` is a list of sequences)."""
    ks = [cohens_kappa(a, b, weighting) for a, b in itertools.combinations(raters, 2)]
    if not ks:
        raise DegenerateAgreement("need at least two raters")
    return float(np.mean(ks))


def fleiss_kappa(raters) -> float:
    """Fleiss' kappa for a fixed number of raters per item."""
    cols = list(zip(*raters))  # per item
    cats = sorted({c for col in cols for c in col})
    m = len(raters)
    counts = np.array([[col.count(c) for c in cats] for col in cols], dtype=float)
    p_j = counts.sum(0) / counts.sum()
    p_i = ((counts ** 2).sum(1) - m) / (m * (m - 1))
    pe = float((p_j ** 2).sum())
    if pe >= 1.0 - 1e-12:
        raise DegenerateAgreement("chance agreement is 1; kappa undefined")
    return (float(p_i.mean()) - pe) / (1.0 - pe)


# -- ranking stability --------------------------------------------------------


def swept_weights(n_dims=5, max_upweight=2.0, grid_steps=4, max_subset=2):
    """Weight vectors boosting 1..max_subset dimensions by factors up to ``max_upweight``.

    The boosted dimensions get factor f, the rest 1, then everything is
    renormalised, which scales the others down proportionally.
    """
    factors = np.linspace(1.0, max_upweight, grid_steps + 1)[1:]
    for size in range(1, max_subset + 1):
        for subset in itertools.combinations(range(n_dims), size):
            for f in factors:
                w = np.ones(n_dims)
                w[list(subset)] = f
                yield w / w.sum()


def weight_sensitivity(model_dim_scores, max_upweight=2.0, grid_steps=4) -> float:
    """Minimum Kendall tau between swept and equal-weight model rankings."""
    s = np.asarray(model_dim_scores, dtype=float)
    if s.ndim != 2 or s.shape[0] < 2:
        raise DegenerateInput("need a (models x dimensions) matrix with >= 2 models")
    base = s.mean(axis=1)
    if np.ptp(base) == 0:
        raise DegenerateInput("all models tie under equal weights")
    worst = 1.0
    for w in swept_weights(s.shape[1], max_upweight, grid_steps):
        swept = s @ w
        tau = kendall(base, swept)
        if not np.isfinite(tau):
            raise DegenerateInput("a swept weighting ties every model")
        worst = min(worst, tau)
    return float(worst)


# -- text overlap ------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]")


def normalize_tokens(tokens):
    if isinstance(tokens, str):
        tokens = tokens.split()
    out = []
    for t in tokens:
        t = _PUNCT.sub("", str(t).lower())
        if t:
            out.append(t)
    return out


def lcs_length(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate_tokens, reference_tokens):
    """LCS precision, recall and F1 over lower-cased, punctuation-stripped tokens."""
    cand = normalize_tokens(candidate_tokens)
    ref = normalize_tokens(reference_tokens)
    if not ref:
        raise EmptyReference("reference is empty")
    if not cand:
        return 0.0, 0.0, 0.0
    lcs = lcs_length(cand, ref)
    p, r = lcs / len(cand), lcs / len(ref)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


# -- distributions -------------------------------------------------------------


def _as_dist(p, name):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or not len(p):
        raise BadDistribution(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise BadDistribution(f"{name} has negative or non-finite mass")
    if abs(p.sum() - 1.0) > 1e-6:
        raise BadDistribution(f"{name} sums to {p.sum()!r}")
    return p


def _kl(p, m):
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / m[mask])).sum())


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats, in [0, ln 2]."""
    p, q = _as_dist(p, "p"), _as_dist(q, "q")
    if p.shape != q.shape:
        raise BadDistribution("p and q differ in length")
    m = 0.5 * (p + q)
    js = 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    return float(min(max(js, 0.0), math.log(2.0)))


def chi_square_gof(observed, expected):
    """Pearson chi-square statistic and its survival p with k-1 degrees of freedom."""
    o = np.asarray(observed, dtype=float)
    e = np.asarray(expected, dtype=float)
    if o.shape != e.shape or o.ndim != 1 or len(o) < 2:
        raise BadDistribution("observed and expected must be equal-length vectors (k >= 2)")
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise BadDistribution("expected counts must be positive")
    stat = float(((o - e) ** 2 / e).sum())
    return stat, float(stats.chi2.sf(stat, len(o) - 1))


# -- frontiers and TE reporting ----------------------------------------------


def dominates(a, b) -> bool:
    """a dominates b: no worse on quality (higher), latency and cost (lower), better on one."""
    ge = a[0] >= b[0] and a[1] <= b[1] and a[2] <= b[2]
    return ge and (a[0] > b[0] or a[1] < b[1] or a[2] < b[2])


def pareto_frontier(points):
    """Non-dominated (quality, latency, cost) points, in input order."""
    pts = [tuple(map(float, p)) for p in points]
    if not pts:
        raise ValueError("no points")
    # any dominator sorts strictly before the point it dominates
    order = sorted(range(len(pts)), key=lambda i: (-pts[i][0], pts[i][1], pts[i][2]))
    front = []
    for i in order:
        if not any(dominates(pts[j], pts[i]) for j in front):
            front.append(i)
    return [points[i] for i in sorted(front)]


@dataclass
class TEMetrics:
    te_success_at_1: float
    mean_chain_len: float
    mean_exec_time_s: float
    n: int = 0

    def to_json(self):
        return asdict(self)


def te_metrics(traces, te_labels) -> TEMetrics:
    """Success rate, unique tool calls and latency over TE-labelled traces.

    ``te_labels`` maps query id to the first-response success flag; traces
    without a label are ignored. Traces need ``query_id``, ``tool_calls``
    and ``latency_s``.
    """
    rows = [(t, bool(te_labels[t.query_id])) for t in traces if t.query_id in te_labels]
    if not rows:
        raise EmptyTE("no TE-labelled traces")
    return TEMetrics(
        te_success_at_1=float(np.mean([ok for _, ok in rows])),
        mean_chain_len=float(np.mean([len(set(t.tool_calls)) for t, _ in rows])),
        mean_exec_time_s=float(np.mean([t.latency_s for t, _ in rows])),
        n=len(rows),
    )


# -- score files -----------------------------------------------------------------


def load_scores(path):
    """Read judge score JSONL ``{query_id, model, dims: {...}, human_overall?}``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def model_dimension_table(records):
    """Mean dimension scores per model, models in sorted order."""
    by_model = {}
    for r in records:
        by_model.setdefault(r["model"], []).append([float(r["dims"][d]) for d in DIMENSIONS])
    models = sorted(by_model)
    return models, np.array([np.mean(by_model[m], axis=0) for m in models])
