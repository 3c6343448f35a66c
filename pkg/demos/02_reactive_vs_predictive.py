"""
Reactive scaling versus a forecast
==================================

Three runs over the same bursty trace and seed. ``hold`` re-applies the
latest reactive recommendation while ``knn`` averages the nearest
recommendations on the time axis. ``oracle`` peeks at what the reactive rule
*will* say ten seconds from now; it is a non-causal bound built from the
hold run.

The replica lines show the price of the 10 s pod start-up: hold only reacts
after utilization has already climbed, while the oracle starts pods early.
"""

from dataclasses import replace
from pathlib import Path

from predscale.harness import load_config, run_experiment

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "bursty_30min.yaml")
cfg = replace(cfg, duration=900.0, output=replace(cfg.output, dir=None))

runs = {}
for model in ("hold", "knn"):
    runs[model] = run_experiment(replace(cfg, autoscaler=replace(cfg.autoscaler, model=model)))
runs["oracle"] = run_experiment(replace(cfg, autoscaler=replace(cfg.autoscaler, model="oracle")),
                                lookahead=runs["hold"].reactive)

# Ready replicas every 30 s, side by side with the request count of that batch.
print(f"{'t':>5} {'reqs':>5} " + " ".join(f"{m:>6}" for m in runs))
hold_rows = runs["hold"].rows
for i in range(0, len(hold_rows), 6):
    cells = " ".join(f"{runs[m].rows[i].ready_replicas:>6}" for m in runs)
    print(f"{hold_rows[i].time_s:>5.0f} {hold_rows[i].requests:>5} {cells}")

print()
for model, rpt in runs.items():
    pb = rpt.penalty
    print(f"{model:>6}: penalty {pb.total:8.3f}  (latency {pb.latency_term:.3f}, "
          f"failed {pb.total_failed}, avg replicas {pb.average_replicas:.3f})")
