"""Calibrate judge scores against human ratings and check how stable the ranking is.

Run: python demos/04_calibrated_evaluation.py
"""
# %% Judge scores with human overall ratings on part of the queries
import numpy as np

from dualpilot.evalkit import (
    aggregate,
    apply_map,
    correlations,
    model_dimension_table,
    pareto_frontier,
    pava_fit,
    weight_sensitivity,
)
from dualpilot.synth import calibration_dataset, synthetic_judge_scores

records = synthetic_judge_scores(n_per_model=25, seed=0)
models, table = model_dimension_table(records)
overall = [aggregate(row) for row in table]
for m, o in sorted(zip(models, overall), key=lambda p: -p[1])[:5]:
    print(f"{m}: {o:.2f}")

# %% Isotonic calibration on a curved judge-to-human link
auto, human = calibration_dataset(400, seed=0)
fit, held = slice(0, 200), slice(200, None)
m = pava_fit(auto[fit], human[fit])
raw = correlations(auto[held], human[held], n_perm=2000, n_boot=2000)
cal = correlations(apply_map(m, auto[held]), human[held], n_perm=2000, n_boot=2000)
print(f"Pearson raw {raw.pearson_r:.3f} -> calibrated {cal.pearson_r:.3f} "
      f"(95% CI {cal.ci95[0]:.3f}..{cal.ci95[1]:.3f})")

# %% Ranking stability when individual dimensions are up-weighted
print(f"minimum Kendall tau under reweighting: {weight_sensitivity(table):.3f}")

# %% Quality / latency / cost frontier
rng = np.random.default_rng(0)
points = [(q, lat, cost) for q, lat, cost in zip(overall, rng.uniform(0.5, 20, len(overall)),
                                                 rng.uniform(0.1, 3, len(overall)))]
front = pareto_frontier(points)
print(f"{len(front)} of {len(points)} systems on the frontier")
