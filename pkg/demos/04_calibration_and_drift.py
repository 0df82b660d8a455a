"""
Matching accuracy drops, then letting the chip age
==================================================

Noise magnitudes are compared at equal accuracy cost: a bisection finds
the magnitude of each isolated source that costs a given number of
percentage points. Drift then ages one deployment over a week.
"""

from _common import quick_bench

from analogrobust import evaluation as E

cfg, bench = quick_bench()
baseline = bench.baseline_accuracy()
print(f"noise-free analog baseline accuracy: {baseline:.4f}")

for name in ("output_recurrent", "weight_recurrent"):
    for drop in (2.5, 5.0):
        res = E.calibrate_source(bench, E.SOURCES[name], drop, baseline, repeats=8, tolerance=0.4)
        print(f"{name:<18} {drop:>4}% drop -> magnitude {res.magnitude:.4f} "
              f"(achieved {res.achieved_drop:.2f} pp after {len(res.probes)} probes)")

grid = cfg["attacks"]["PGD"]
report = E.drift_study(bench, attack=("PGD", (grid["iterations"][:3], grid["magnitudes"][:3])), n=4)
for key, point in report.summary.items():
    print(f"t = {point['time']:>8g} s  accuracy {point['accuracy_mean']:.4f} +- {point['accuracy_std']:.4f}  "
          f"PGD envelope area {point['envelope']['area_mean']:.3f}")
