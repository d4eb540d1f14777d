"""Route queries with the supervised head and watch the sentinel gate resolve them.

Run: python demos/02_routing_and_gate.py
"""
# %% The shipped world: meetings, KB and web fixtures, labelled scenarios
from dualpilot.orchestrator import Mode
from dualpilot.simulation import LabelPolicy, Simulator, World, build_suite, default_policy, gate_trials

world = World.shipped()
policy = default_policy(world)
sim = Simulator(world, Mode.PARALLEL)

# %% One simple and one complex scenario, end to end on the virtual clock
simple = build_suite(world, "simple")[0]
complex_ = build_suite(world, "complex")[0]
for sc in (simple, complex_):
    out = sim.run(sc, policy, seed=0, index=0)
    print(f"\n{sc.text!r}")
    print(f"  route={out.route.name} conf={out.confidence:.2f} tool={out.tool.name} "
          f"gate={out.trace.gate_outcome.value} latency={out.latency_s:.2f}s success={out.success}")
    for ev in out.trace.events:
        print(f"    {ev.t_ms:9.1f} ms  {ev.event}")

# %% Gate statistics over many low-confidence simple queries
rep = gate_trials(world, n=2000, seed=0)
print(f"\nlate-trigger {rep.late_trigger_rate:.3f}, miss-trigger {rep.miss_trigger_rate:.3f}, "
      f"sentinel-fast {rep.sentinel_fast_rate:.3f}")

# %% Execution modes on a stratified suite
from dualpilot.simulation import run_ablation

suite = build_suite(world, "stratified", seed=1, n=120)
for mode in ("routing_only", "tools_only", "serial", "parallel"):
    r = run_ablation(mode, suite, seed=1, world=world, policy=policy)
    print(f"{mode:>12}: quality {r.quality:.3f}  P50 {r.p50_s:6.2f}s  P90 {r.p90_s:6.2f}s")

# %% The label oracle reproduces the per-band latency profile
for name in ("simple", "complex"):
    s = Simulator(world).run(build_suite(world, name)[1], LabelPolicy(), 0, 1)
    print(f"{name}: {s.latency_s:.2f}s via {s.trace.lane_used.value}")
