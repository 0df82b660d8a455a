"""Acceptance criteria 1 to 12 at their stated tolerances.

Each test prints one ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line (also repeated in the terminal summary). Study reports are written to
``$ACCEPTANCE_OUT`` when set, otherwise to a temporary directory.
"""

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import gradcheck
from analogrobust import data as D
from analogrobust import evaluation as E
from analogrobust import hil
from analogrobust import tile as TL
from analogrobust.attacks import pgd
from analogrobust.errors import UndefinedMetricError
from analogrobust.rng import derive_seed

from oracles import asr_brute, fgsm

RESULTS: list[str] = []


def verdict(capsys, n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


@pytest.fixture(scope="module")
def out_dir(tmp_path_factory):
    path = Path(os.environ["ACCEPTANCE_OUT"]) if os.environ.get("ACCEPTANCE_OUT") else tmp_path_factory.mktemp("acc")
    path.mkdir(parents=True, exist_ok=True)
    return path


def axes(desk, kind):
    grid = desk.cfg["attacks"][kind]
    return grid["iterations"], grid["magnitudes"]


# ----------------------------------------------------------------------


def test_criterion_01_metric(capsys):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    cases = agree = 0
    for _ in range(200):
        n, k = rng.integers(1, 9), rng.integers(2, 5)
        clean = rng.integers(0, 3, (n, k)).astype(np.float32)  # small integers force argmax ties
        adv = rng.integers(0, 3, (n, k)).astype(np.float32)
        y = rng.integers(0, k, n)
        ref = asr_brute(clean, adv, y)
        try:
            got = E.asr_from_predictions(clean.argmax(axis=1), adv.argmax(axis=1), y)
        except UndefinedMetricError:
            got = None
        cases += 1
        agree += got == ref
    elapsed = time.perf_counter() - start
    verdict(capsys, 1, agree == cases and elapsed < 1.0,
            f"{agree}/{cases} randomized cases equal the brute-force trace, {elapsed:.3f} s")


def test_criterion_02_gradients(capsys):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst, failed, count = 0.0, [], 0
    while count < 100:
        for name, op, arrays in gradcheck.instances(rng):
            if count >= 100:
                break
            ok, err = gradcheck.check(op, arrays, rng)
            worst = max(worst, err)
            count += 1
            if not ok:
                failed.append(name)
    elapsed = time.perf_counter() - start
    verdict(capsys, 2, not failed and elapsed < 60,
            f"{count} instances, worst relative error {worst:.2e}, failures {sorted(set(failed))}, {elapsed:.1f} s")


def test_criterion_03_fgsm(capsys, desk):
    start = time.perf_counter()
    bench = desk.bench()
    x, y = desk.test.images[:200], desk.test.labels[:200]
    mismatches = 0
    for kind in ("FP32", "HWA_FP32", "DIGITAL"):
        net = bench.platform(kind)
        for eps in (0.01, 0.03, 0.05):
            adv = pgd(net, x, y, eps, 1, step_size=eps, random_start=False)
            ref = fgsm(lambda a, b: net.loss_grad(a, b)[1], x, y, eps)
            mismatches += adv.tobytes() != ref.tobytes()
    elapsed = time.perf_counter() - start
    verdict(capsys, 3, mismatches == 0 and elapsed < 60,
            f"{9 - mismatches}/9 platform x eps cases bit-identical to FGSM, {elapsed:.1f} s")


def test_criterion_04_weight_inference(capsys, desk):
    start = time.perf_counter()
    # noiseless, ideal converters, B = rows orthogonal probes
    ideal = replace(desk.bench(), tile_config=replace(desk.tile, converter_bits=None))
    quiet = ideal.platform("AIMC_CHIP_INSTANCE", noise=desk.noise.quiet(), drift=TL.DriftModel(enabled=False))
    rng = np.random.default_rng(4)
    worst = 0.0
    for name, layer in quiet.analog.items():
        for bi, (_, _, tile) in enumerate(layer.blocks):
            q, _ = np.linalg.qr(rng.standard_normal((tile.shape[0],) * 2))
            est = hil.infer_weights(hil.probe_tile(quiet, name, bi, B=tile.shape[0], inputs=q / np.abs(q).max()))
            truth = tile.g_programmed / tile.config.g_max
            worst = max(worst, float(np.linalg.norm(est.G - truth) / np.linalg.norm(truth)))
    # read noise (and the rest of the chip's noise), drift off, largest tile
    chip = desk.bench().platform("AIMC_CHIP_INSTANCE", drift=TL.DriftModel(enabled=False))
    tile = chip.analog["fc1"].blocks[0][2]
    truth = tile.g_programmed / tile.config.g_max
    curves = []
    for seed in range(10):
        curves.append([float(np.sqrt(np.mean((hil.infer_weights(hil.probe_tile(chip, "fc1", 0, B=B, seed=seed)).G
                                              - truth) ** 2))) for B in (500, 1000, 2000)])
    monotone = sum(a > b > c for a, b, c in curves)
    elapsed = time.perf_counter() - start
    mean = np.mean(curves, axis=0)
    verdict(capsys, 4, worst <= 1e-6 and monotone == 10 and elapsed < 300,
            f"noiseless relative error {worst:.1e}; RMS decreasing in B for {monotone}/10 seeds "
            f"(mean {mean[0]:.4f} > {mean[1]:.4f} > {mean[2]:.4f}), {elapsed:.1f} s")


def test_criterion_05_quantization_bound(capsys):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    quiet, still = TL.NoiseModel().quiet(), TL.DriftModel(enabled=False)
    violations = total = 0
    for rows, cols in [(64, 16), (256, 32), (100, 20), (9, 8)]:
        w = rng.standard_normal((rows, cols))
        x = rng.standard_normal((250, rows))
        tile = TL.calibrate_ranges(TL.program(TL.make_tile(w, TL.TileConfig(), quiet, still)), x)
        y = TL.analog_mvm(tile, x, 0).astype(np.float64)
        lv = tile.config.levels
        exact = np.round(np.clip(x / tile.in_scale, -1, 1) * lv) / lv * tile.in_scale @ w  # after the DAC
        bound = 0.5 * tile.adc_step * tile.rescale
        violations += int(np.count_nonzero(np.abs(y - exact) > bound * (1 + 1e-6)))
        total += len(x)
    elapsed = time.perf_counter() - start
    verdict(capsys, 5, violations == 0 and total >= 1000 and elapsed < 60,
            f"{total} MVMs, {violations} column outputs beyond half an ADC step, {elapsed:.2f} s")


# ----------------------------------------------------------------------
# studies


@pytest.fixture(scope="module")
def platform_report(desk, out_dir):
    attacks = {k: axes(desk, k) for k in ("PGD", "ONEPIXEL")}
    report = E.platform_study(desk.bench(), attacks, n=10)
    report.write(out_dir)
    return report


def test_criterion_06_ordering(capsys, platform_report):
    s = platform_report.summary
    order = ["FP32", "HWA_FP32", "DIGITAL", "AIMC_MODEL"]
    ok, parts = True, []
    for attack in ("PGD", "ONEPIXEL"):
        env = {k: s[k][attack] for k in s}
        for a, b in zip(order, order[1:]):
            good = E.not_below(env[a]["area_mean"], env[b]["area_mean"], env[a]["area_std"], env[b]["area_std"], 10)
            ok &= good
            parts.append(f"{attack} {a} {env[a]['area_mean']:.3f} >= {b} {env[b]['area_mean']:.3f}: {good}")
        m, c = env["AIMC_MODEL"], env["AIMC_CHIP_INSTANCE"]
        good = E.within_bands(m["area_mean"], c["area_mean"], m["area_std"], c["area_std"])
        ok &= good
        parts.append(f"{attack} model {m['area_mean']:.3f}+-{m['area_std']:.3f} ~ chip "
                     f"{c['area_mean']:.3f}+-{c['area_std']:.3f}: {good}")
    verdict(capsys, 6, ok, "; ".join(parts))


@pytest.fixture(scope="module")
def ablation_report(desk, out_dir):
    report = E.ablation_study(desk.bench(), drops=(5.0,), attack=("PGD", axes(desk, "PGD")), n_acc=100, n_env=10,
                              repeats=20)
    report.write(out_dir)
    return report


def test_criterion_07_ablation(capsys, ablation_report):
    s = ablation_report.summary
    env = {name: s[f"{name}@5.0"]["envelope"] for name in E.SOURCES}
    var = {name: s[f"{name}@5.0"]["accuracy_var"] for name in E.SOURCES}
    ok, parts = True, []
    for rec in ("recurrent", "non_recurrent"):
        o, w = env[f"output_{rec}"], env[f"weight_{rec}"]
        good = E.clearly_above(w["area_mean"], o["area_mean"], w["area_std"], o["area_std"], 10)
        ok &= good
        parts.append(f"{rec}: output {o['area_mean']:.3f} < weight {w['area_mean']:.3f}: {good}")
    for loc in ("output", "weight"):
        r, nr = env[f"{loc}_recurrent"], env[f"{loc}_non_recurrent"]
        good = E.within_bands(r["area_mean"], nr["area_mean"], r["area_std"], nr["area_std"])
        ok &= good
        parts.append(f"{loc} recurrent {r['area_mean']:.3f}+-{r['area_std']:.3f} overlaps non-recurrent "
                     f"{nr['area_mean']:.3f}+-{nr['area_std']:.3f}: {good}")
        good = var[f"{loc}_non_recurrent"] > var[f"{loc}_recurrent"]
        ok &= good
        parts.append(f"{loc} accuracy var non-recurrent {var[f'{loc}_non_recurrent']:.2e} > recurrent "
                     f"{var[f'{loc}_recurrent']:.2e}: {good}")
    verdict(capsys, 7, ok, "; ".join(parts))


def test_criterion_08_calibration(capsys, desk, out_dir):
    bench = desk.bench()
    baseline = bench.baseline_accuracy()
    source = tuple(desk.cfg["calibration"]["source"])
    acc = E.source_accuracy_fn(bench, source)
    report = E.StudyReport("calibration_acceptance", summary={"baseline_accuracy": baseline, "results": []})
    ok, mags, parts = True, [], []
    for drop in (1.0, 2.5, 5.0, 10.0):
        res = E.calibrate_source(bench, source, drop, baseline, repeats=20)
        # fresh check over 20 repetitions the bisection never saw
        check, _ = E.drop_stats([acc(res.magnitude, 20 + r) for r in range(20)], baseline)
        good = abs(check - drop) <= 0.5
        ok &= good
        mags.append(res.magnitude)
        parts.append(f"{drop}%: magnitude {res.magnitude:.4f}, drop {check:.2f} pp: {good}")
        report.summary["results"].append({**res.to_dict(), "check_drop": check})
        report.rows += [{"target_drop": drop, "probe": i, "magnitude": m, "drop": d} for i, (m, d) in
                        enumerate(res.probes)]
    report.write(out_dir)
    increasing = all(b > a for a, b in zip(mags, mags[1:]))
    verdict(capsys, 8, ok and increasing, "; ".join(parts) + f"; magnitudes increasing: {increasing}")


@pytest.fixture(scope="module")
def drift_report(desk, out_dir):
    report = E.drift_study(desk.bench(), attack=("PGD", axes(desk, "PGD")), n=10)
    report.write(out_dir)
    return report


def test_criterion_09_drift(capsys, drift_report):
    pts = [drift_report.summary[k] for k in ("0", "86400", "604800")]
    ok, parts = True, []
    for a, b in zip(pts, pts[1:]):
        acc = E.clearly_above(a["accuracy_mean"], b["accuracy_mean"], a["accuracy_std"], b["accuracy_std"], 10)
        area = E.not_below(a["envelope"]["area_mean"], b["envelope"]["area_mean"], a["envelope"]["area_std"],
                           b["envelope"]["area_std"], 10)
        ok &= acc and area
        parts.append(f"t={a['time']:g}->{b['time']:g}: accuracy {a['accuracy_mean']:.4f}->{b['accuracy_mean']:.4f} "
                     f"({acc}), area {a['envelope']['area_mean']:.3f}->{b['envelope']['area_mean']:.3f} ({area})")
    verdict(capsys, 9, ok, "; ".join(parts))


@pytest.fixture(scope="module")
def hil_report(desk, out_dir):
    per_class = desk.cfg["dataset"]["balanced_per_class"]
    subset, _ = D.balanced_subset(desk.test, per_class, derive_seed(desk.cfg["seed"], "balanced"),
                                  out_dir / "balanced.json")
    h = desk.cfg["hil"]
    report = E.hil_study(desk.bench(), subset, ("PGD", axes(desk, "PGD")), n=10, B=h["B"],
                         reinfer_every=h["reinfer_every"], latency=h["latency"])
    report.summary["subset_size"] = len(subset)
    report.write(out_dir)
    return report


def test_criterion_10_hil(capsys, hil_report):
    s = hil_report.summary
    h, m2c = s["hil_chip"], s["model_to_chip"]
    ok = s["subset_size"] == 1000
    good = E.clearly_above(h["area_mean"], m2c["area_mean"], h["area_std"], m2c["area_std"], 10)
    ok &= good
    parts = [f"{s['subset_size']} balanced samples",
             f"hil_chip {h['area_mean']:.3f}+-{h['area_std']:.3f} > model_to_chip "
             f"{m2c['area_mean']:.3f}+-{m2c['area_std']:.3f}: {good}"]
    d = s["digital"]
    for name in ("model_to_chip", "hil_chip", "model"):
        good = E.clearly_above(d["area_mean"], s[name]["area_mean"], d["area_std"], s[name]["area_std"], 10)
        ok &= good
        parts.append(f"{name} {s[name]['area_mean']:.3f} < digital {d['area_mean']:.3f}: {good}")
    verdict(capsys, 10, ok, "; ".join(parts))


@pytest.fixture(scope="module")
def combination_report(desk, out_dir):
    c = desk.cfg["combination"]
    report = E.combination_study(desk.bench(), c["target_drop"], tuple(c["band"]), c["proportions"],
                                 c["output_points"], ("PGD", axes(desk, "PGD")), n=10, repeats=c["repeats"])
    report.write(out_dir)
    return report


def test_criterion_11_combination(capsys, combination_report):
    s = combination_report.summary
    lo, hi = 4.9, 5.1
    in_band = all(lo <= r["drop"] <= hi for r in s["retained"])
    enough = len(s["areas"]) >= 6
    rho = s["spearman"]
    areas = ", ".join(f"{a['proportion']:.2f}:{a['area_mean']:.3f}" for a in s["areas"])
    verdict(capsys, 11, in_band and enough and rho > 0.8,
            f"{len(s['retained'])} retained combinations in band: {in_band}; {len(s['areas'])} proportions; "
            f"Spearman {rho:.3f}; areas {areas}")


def test_criterion_12_reproducibility(capsys, desk, drift_report, platform_report, tmp_path):
    first = tmp_path / "first"
    second = tmp_path / "second"
    drift_report.write(first)
    E.drift_study(desk.bench(), attack=("PGD", axes(desk, "PGD")), n=10).write(second)
    sub = E.StudyReport("platforms", [r for r in platform_report.rows
                                      if r["scenario"] in ("DIGITAL", "AIMC_CHIP_INSTANCE") and r["attack"] == "PGD"])
    sub.write(first)
    again = E.platform_study(desk.bench(), {"PGD": axes(desk, "PGD")}, n=10,
                             platforms=("DIGITAL", "AIMC_CHIP_INSTANCE"))
    again.write(second)
    same = {name: (first / name).read_bytes() == (second / name).read_bytes()
            for name in ("drift.csv", "platforms.csv")}
    verdict(capsys, 12, all(same.values()), f"re-run CSVs bit-identical: {same}")
