"""
Model comparison
================

Each model runs twice (seeds 0 and 1) on 30 simulated minutes of bursty
traffic, which mirrors a six-run hold/linear/knn study. Reports for every
run plus ``comparison.csv`` land in ``runs/compare``; the whole thing takes
a few seconds because the cluster is simulated in virtual time.
"""

from pathlib import Path

from predscale.harness import compare_models, load_config

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "bursty_30min.yaml")
out = Path("runs/compare")
table = compare_models(cfg, ["hold", "linear", "knn"], repetitions=2, out_dir=out)
print(table.format())

# Linear extrapolation carries the falling edge of a spike forward and drops
# replicas too early, which shows up as failed requests.
worst = max(table.rows, key=lambda r: r.penalty_total)
print(f"\nworst run: {worst.model} rep {worst.repetition} with {worst.failed} failed requests")
print(f"artifacts: {sorted(p.name for p in out.iterdir())}")
