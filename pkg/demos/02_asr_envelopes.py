"""
ASR envelopes across platforms
==============================

Trains a small CNN on 12x12 MNIST, then sweeps PGD along the diagonal of
the (iterations x magnitude) grid on the floating-point, digital and
analog platforms. The envelope area summarises how easy each platform is
to attack: lower means more robust.
"""

from _common import quick_bench

from analogrobust import evaluation as E

cfg, bench = quick_bench()
grid = cfg["attacks"]["PGD"]
report = E.platform_study(bench, {"PGD": (grid["iterations"], grid["magnitudes"])}, n=4)

for platform, entry in report.summary.items():
    env = entry["PGD"]
    points = " ".join(f"{m:.2f}" for m in env["mean"])
    print(f"{platform:<20} clean acc {entry['clean_accuracy']:.3f}  envelope [{points}]  "
          f"area {env['area_mean']:.3f} +- {env['area_std']:.3f}")

# The same numbers as CSV rows (one per cell and repetition) and a JSON summary.
csv_path, json_path = report.write("demo_out")
print("wrote", csv_path, json_path)
