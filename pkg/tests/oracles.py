"""Independent reference computations used as test oracles."""
import itertools
import math

import numpy as np
from scipy import stats


def grid_monotone_min_sse(x, y, lo=None, hi=None, step=0.1):
    """Least squared error over non-decreasing step functions of x with values on a grid.

    Dynamic programme over distinct x values: best[g] is the minimum error of
    the prefix whose last level is grid value g or lower.
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    lo = np.floor(y.min() / step) * step if lo is None else lo
    hi = np.ceil(y.max() / step) * step if hi is None else hi
    grid = np.round(np.arange(lo, hi + step / 2, step), 10)
    best = np.zeros_like(grid)
    for ux in np.unique(x):
        ys = y[x == ux]
        cost = ((ys[None, :] - grid[:, None]) ** 2).sum(axis=1)
        best = np.minimum.accumulate(best + cost)
    return float(best[-1])


def lcs_table(a, b):
    """LCS length by the full (len(a)+1) x (len(b)+1) table."""
    T = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            T[i][j] = T[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(T[i - 1][j], T[i][j - 1])
    return T[-1][-1]


def rouge_oracle(cand, ref):
    lcs = lcs_table(cand, ref)
    if lcs == 0:
        return 0.0, 0.0, 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return p, r, 2 * p * r / (p + r)


def exhaustive_permutation_p(x, y, fn):
    obs = abs(fn(x, y))
    vals = [abs(fn(x, np.asarray(y)[list(p)])) for p in itertools.permutations(range(len(y)))]
    return float(np.mean([v >= obs - 1e-9 for v in vals]))


def corr(x, y):
    if np.std(x) == 0 or np.std(y) == 0:
        return np.nan
    return float(np.corrcoef(x, y)[0, 1])


def bca_enumerated(x, y, level=0.95):
    """BCa interval for Pearson r over every n^n paired resample (undefined resamples dropped)."""
    n = len(x)
    point = corr(x, y)
    reps = []
    for idx in itertools.product(range(n), repeat=n):
        i = list(idx)
        reps.append(corr(x[i], y[i]))
    reps = np.array([r for r in reps if np.isfinite(r)])
    jack = np.array([corr(np.delete(x, i), np.delete(y, i)) for i in range(n)])
    jack = jack[np.isfinite(jack)]
    z0 = stats.norm.ppf(np.mean(reps < point))
    d = jack.mean() - jack
    a = (d ** 3).sum() / (6 * ((d ** 2).sum()) ** 1.5)
    alpha = (1 - level) / 2
    q = [stats.norm.cdf(z0 + (z0 + z) / (1 - a * (z0 + z)))
         for z in (stats.norm.ppf(alpha), stats.norm.ppf(1 - alpha))]
    return tuple(np.quantile(reps, q))


def brute_pareto(points):
    keep = []
    for i, p in enumerate(points):
        dominated = False
        for j, q in enumerate(points):
            if i == j:
                continue
            if q[0] >= p[0] and q[1] <= p[1] and q[2] <= p[2] and (q[0] > p[0] or q[1] < p[1] or q[2] < p[2]):
                dominated = True
                break
        if not dominated:
            keep.append(p)
    return keep


def kappa_by_hand(a, b):
    cats = sorted(set(a) | set(b))
    n = len(a)
    po = sum(x == y for x, y in zip(a, b)) / n
    pe = sum((a.count(c) / n) * (b.count(c) / n) for c in cats)
    return (po - pe) / (1 - pe)


def js_by_hand(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        m = (pi + qi) / 2
        if pi > 0:
            total += 0.5 * pi * math.log(pi / m)
        if qi > 0:
            total += 0.5 * qi * math.log(qi / m)
    return total
