"""
Attacking a chip you cannot differentiate
=========================================

The attacker only sees the chip through single-tile probes and normal
inference with cached layer activations. Least squares on the probes
recovers each tile's weights; a proxy graph pinned to the chip's own
activations then supplies gradients for PGD.
"""

import numpy as np
from _common import quick_bench

from analogrobust import hil
from analogrobust.attacks import AttackSpec, run_attack
from analogrobust.evaluation import asr

cfg, bench = quick_bench(attack_samples=300)
chip = bench.platform("AIMC_CHIP_INSTANCE")

# More probes average away more read and output noise.
tile = chip.analog["fc1"].blocks[0][2]
for B in (500, 1000, 2000):
    est = hil.infer_weights(hil.probe_tile(chip, "fc1", B=B, seed=1))
    rms = np.sqrt(np.mean((est.G - tile.g_programmed / tile.config.g_max) ** 2))
    print(f"B={B:<5} RMS error of the inferred normalised conductances: {rms:.4f}")

# Proxy gradients point the same way as the true, noise-free gradients.
x, y = bench.attack.images, bench.attack.labels
weights = hil.infer_network(chip, B=1000)
chip.logits(x, cache=True)
_, g_proxy, _ = hil.build_proxy(chip, chip.last_cache, weights).loss_grad(x, y)
_, g_true, _ = bench.platform("HWA_FP32").loss_grad(x, y)
print("Pearson(proxy, true gradient):", round(float(np.corrcoef(g_proxy.ravel(), g_true.ravel())[0, 1]), 3))

# In-loop PGD against inputs transferred from a differently seeded model.
spec = AttackSpec("PGD", 5, 0.05)
log = hil.HilLog()
adv_hil = hil.hil_attack(chip, x, y, spec, B=1000, history=log).adversarial
model = bench.platform("AIMC_MODEL", seed=12345)
adv_model = run_attack(model, x, y, spec).adversarial
# each chip evaluation redraws recurrent noise, so average a few
hil_asr = np.mean([asr(chip, x, y, adv_hil) for _ in range(5)])
model_asr = np.mean([asr(chip, x, y, adv_model) for _ in range(5)])
print(f"ASR on the chip over 5 evaluations: in-loop {hil_asr:.3f} vs transferred {model_asr:.3f}")
print(f"chip queries {log.queries}, simulated time elapsed {chip.elapsed:.1f} s")
