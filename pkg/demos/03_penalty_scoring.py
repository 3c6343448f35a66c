"""
Scoring a run
=============

The score starts from the success-weighted mean of squared batch latencies.
Each failed request then adds a fixed charge. Finally the time-averaged
replica count is added, scaled by a scarcity factor. The charge and the
factor are knobs; raising either one can change which model wins.
"""

from predscale.loadgen import BatchResult
from predscale.scoring import PenaltyParams, ReplicaTimeline, penalty

# Two batches: 5 requests at 1 s mean, 5 at 3 s mean -> (5*1 + 5*9) / 10 = 5.
batches = [BatchResult(0, 0.0, 5, 0, 1.0, 1.0), BatchResult(1, 5.0, 5, 1, 3.0, 3.0)]
# One replica for 30 s, then ten for 10 s -> (30 + 100) / 40 = 3.25.
timeline = ReplicaTimeline(((0.0, 1), (30.0, 10)), 40.0)

pb = penalty(batches, timeline)
print(f"latency {pb.latency_term}  failures {pb.failure_term}  resources {pb.resource_term}  "
      f"-> total {pb.total}")
# The failure term swamps everything; the normalized variant divides it by
# the number of dispatched requests instead.
print(f"normalized total {pb.normalized_total:.3f}")

# The same run priced under a stricter SLA and scarcer hardware.
print("\nfailure charge x scarcity -> total")
for fail in (900.0, 3600.0):
    for scarcity in (1.0, 2.0, 4.0):
        t = penalty(batches, timeline, PenaltyParams(fail, scarcity)).total
        print(f"{fail:>7.0f} x {scarcity:>3.0f} -> {t:10.2f}")
