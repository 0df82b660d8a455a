"""
One analog tile, step by step
=============================

A weight block is mapped column-wise onto signed conductances, programmed
once (programming error, drift exponents) and then read through 8-bit
converters with read noise and additive column noise on every MVM.
"""

import numpy as np

from analogrobust import tile as TL

rng = np.random.default_rng(0)
w = rng.standard_normal((64, 8)).astype(np.float32)
x = rng.standard_normal((256, 64)).astype(np.float32)

# Ideal converters and no noise: the tile reproduces x @ w to float precision.
ideal = TL.TileConfig(converter_bits=None)
tile = TL.calibrate_ranges(TL.program(TL.make_tile(w, ideal, TL.NoiseModel().quiet(), TL.DriftModel(enabled=False))), x)
print("ideal tile, max |error|:", np.abs(TL.analog_mvm(tile, x) - x @ w).max())

# 8-bit DAC and ADC: the error is bounded by the converter steps.
tile = TL.calibrate_ranges(TL.program(TL.make_tile(w, TL.TileConfig(), TL.NoiseModel().quiet(),
                                                   TL.DriftModel(enabled=False))), x)
err = TL.analog_mvm(tile, x) - x @ w
print("8-bit converters, RMS error relative to output RMS:", float(np.sqrt((err**2).mean() / ((x @ w) ** 2).mean())))

# The full default noise model. Recurrent draws are keyed by the mini-batch id:
# the same id reproduces a read, a new id gives a fresh one.
noisy = TL.calibrate_ranges(TL.program(TL.make_tile(w, seed=3)), x)
a, b, c = TL.analog_mvm(noisy, x, 1), TL.analog_mvm(noisy, x, 1), TL.analog_mvm(noisy, x, 2)
print("same id identical:", np.array_equal(a, b), "| new id differs:", not np.array_equal(a, c))
print("noisy RMS error relative:", float(np.sqrt(((a - x @ w) ** 2).mean() / ((x @ w) ** 2).mean())))

# Each source can be isolated at a chosen magnitude.
for source in [(TL.WEIGHT, TL.RECURRENT), (TL.WEIGHT, TL.NON_RECURRENT), (TL.OUTPUT, TL.RECURRENT)]:
    model = TL.isolate_source(TL.NoiseModel(), source, 0.05)
    t = TL.calibrate_ranges(TL.program(TL.make_tile(w, noise=model, drift=TL.DriftModel(enabled=False))), x)
    e = TL.analog_mvm(t, x, 0) - x @ w
    print(f"{source[0]:>6} {source[1]:<14} at 0.05: relative RMS error {np.sqrt((e**2).mean() / ((x @ w)**2).mean()):.3f}")

# Drift: conductances decay as (t / t0)^-nu, and the global compensation
# rescales each tile so that the mean output level is restored.
for days in (0, 1, 7):
    noisy.time = noisy.drift.t0 + days * 86400
    e = TL.analog_mvm(noisy, x, 0) - x @ w
    print(f"after {days} day(s): relative RMS error {np.sqrt((e**2).mean() / ((x @ w)**2).mean()):.3f}, "
          f"compensation factor {TL.drift_compensation(noisy):.3f}")
