import csv
import json

import numpy as np
import pytest

from analogrobust import evaluation as E
from analogrobust.errors import ArgumentError, CalibrationError, StudyError, UndefinedMetricError
from analogrobust.tile import DriftModel, OUTPUT, RECURRENT, WEIGHT

from oracles import asr_brute, trapezoid_area


class Fixed:
    """Scripted predictions keyed by the input values."""

    stochastic = False

    def __init__(self, table):
        self.table = table

    def predict(self, x, batch_size=128):
        out = np.zeros((len(x), 3))
        for i, v in enumerate(x[:, 0, 0, 0]):
            out[i, self.table[float(v)]] = 1
        return out


def test_asr_hand_trace():
    y = np.array([0, 1, 2, 0])
    clean_pred = np.array([0, 1, 2, 1])  # correct on {0, 1, 2}
    adv_pred = np.array([1, 1, 0, 1])  # wrong on {0, 2, 3}
    assert E.asr_from_predictions(clean_pred, adv_pred, y) == pytest.approx(2 / 3)
    onehot = np.eye(3)
    assert E.asr_from_predictions(clean_pred, adv_pred, y) == asr_brute(onehot[clean_pred], onehot[adv_pred], y)
    with pytest.raises(UndefinedMetricError):
        E.asr_from_predictions(np.array([1, 2]), np.array([1, 2]), np.array([0, 0]))
    with pytest.raises(ArgumentError):
        E.asr_from_predictions(np.array([1]), np.array([1, 2]), np.array([0, 0]))


def test_asr_through_interleaved_presentation():
    x = np.arange(4, dtype=np.float32).reshape(4, 1, 1, 1)
    adv = x + 10
    net = Fixed({0.0: 0, 1.0: 1, 2.0: 2, 3.0: 1, 10.0: 1, 11.0: 1, 12.0: 0, 13.0: 1})
    assert E.asr(net, x, np.array([0, 1, 2, 0]), adv) == pytest.approx(2 / 3)


def test_asr_zero_for_unchanged_inputs(desk):
    net = desk.bench().platform("DIGITAL")
    x, y = desk.test.images[:100], desk.test.labels[:100]
    assert E.asr(net, x, y, x) == 0.0
    assert E.asr(net, x, y, x.copy()) == E.asr(net, x, y, x)


def test_deterministic_grid_has_zero_std(desk):
    net = desk.bench().platform("FP32")
    x, y = desk.test.images[:100], desk.test.labels[:100]
    grid = E.asr_grid(net, net, "PGD", [1, 2], [0.0, 0.02], x, y, n=3)
    assert np.all(grid.std == 0)
    assert grid.mean[0, 0] == 0.0
    sq = E.asr_grid(net, net, "SQUARE", [5], [0.0], x, y, n=1)
    assert sq.mean[0, 0] == 0.0


def test_fp32_asr_grows_with_magnitude(desk):
    net = desk.bench().platform("FP32")
    x, y = desk.test.images[:200], desk.test.labels[:200]
    grid = E.asr_grid(net, net, "PGD", [3], [0.01, 0.02, 0.03, 0.04, 0.05], x, y, n=1)
    m, s = grid.mean[0], grid.std[0]
    assert all(b >= a - 2 * max(sa, sb) for a, b, sa, sb in zip(m, m[1:], s, s[1:]))


def test_grid_argument_checks(desk):
    bench = desk.bench()
    fp, model = bench.platform("FP32"), bench.platform("AIMC_MODEL")
    x, y = desk.test.images[:4], desk.test.labels[:4]
    with pytest.raises(ArgumentError):
        E.asr_grid(fp, fp, "PGD", [], [0.1], x, y, n=1)
    with pytest.raises(ArgumentError):
        E.asr_grid(fp, fp, "PGD", [2, 1], [0.1, 0.2], x, y, n=1)
    with pytest.raises(ArgumentError):
        E.asr_grid(fp, model, "PGD", [1], [0.1], x, y, n=1)
    with pytest.raises(ArgumentError):
        E.asr_grid(fp, fp, "PGD", [1, 2], [0.1], x, y, n=1, diagonal_only=True)
    with pytest.raises(ArgumentError):
        E.asr_grid(fp, [model], "PGD", [1], [0.1], x, y, n=2)


def _grid(values):
    v = np.asarray(values, dtype=np.float64)
    k = v.shape[0]
    return E.AsrGrid(list(range(1, k + 1)), [0.01 * (j + 1) for j in range(v.shape[1])], v, np.zeros_like(v),
                     v[..., None])


def test_envelope_examples():
    one = E.envelope(_grid([[0.3]]))
    assert len(one) == 1 and one.mean[0] == 0.3
    i, j = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
    np.testing.assert_array_equal(E.envelope(_grid((i + j) / 4)).mean, [0, 0.5, 1.0])
    np.testing.assert_array_equal(E.envelope(_grid(np.full((4, 4), 0.7))).mean, [0.7] * 4)
    env = E.envelope(_grid(np.zeros((3, 3))))
    assert env.iterations == sorted(env.iterations) and env.magnitudes == sorted(env.magnitudes)
    with pytest.raises(ArgumentError):
        E.envelope(_grid(np.zeros((2, 3))))


def test_area_examples(rng):
    assert E.envelope_area([1.0, 1.0, 1.0]) == 1.0
    assert E.envelope_area([0.0, 0.0]) == 0.0
    assert E.envelope_area(np.linspace(0, 1, 5)) == pytest.approx(0.5)
    with pytest.raises(ArgumentError):
        E.envelope_area([0.4])
    for _ in range(20):
        v = rng.random(rng.integers(2, 8))
        assert E.envelope_area(v) == pytest.approx(trapezoid_area(v))


def test_area_stats_per_repetition():
    samples = np.array([[0.0, 0.2], [1.0, 0.2]])
    env = E.Envelope([1, 2], [0.1, 0.2], samples.mean(axis=1), samples.std(axis=1), samples)
    np.testing.assert_allclose(E.area_samples(env), [0.5, 0.2])
    assert E.area_stats(env) == pytest.approx((0.35, 0.15))


def test_comparisons():
    assert E.not_below(0.5, 0.51, 0.1, 0.1, 10)
    assert not E.not_below(0.3, 0.5, 0.01, 0.01, 10)
    assert E.clearly_above(0.6, 0.5, 0.01, 0.01, 10)
    assert not E.clearly_above(0.51, 0.5, 0.1, 0.1, 10)
    assert E.within_bands(0.5, 0.55, 0.03, 0.01)
    assert not E.within_bands(0.5, 0.6, 0.03, 0.01)


def _linear_accuracy(slope, noise=0.0):
    """Accuracy falls linearly in the magnitude; repetitions add a fixed offset pattern."""
    def acc(m, r):
        return 0.9 - slope * m + noise * ((r % 3) - 1)
    return acc


def test_calibration_bisection():
    res = E.calibrate_magnitude(_linear_accuracy(0.4), 0.9, 5.0, tolerance=0.05)
    assert abs(res.achieved_drop - 5.0) <= 0.05
    assert res.magnitude == pytest.approx(0.125, abs=0.002)
    assert len(res.probes) <= 40
    ten = E.calibrate_magnitude(_linear_accuracy(0.4), 0.9, 10.0, tolerance=0.05)
    assert ten.magnitude > res.magnitude
    noisy = E.calibrate_magnitude(_linear_accuracy(0.4, 0.01), 0.9, 5.0, repeats=6, tolerance=0.1)
    assert abs(noisy.achieved_drop - 5.0) <= 0.1 and noisy.ci > 0


def test_calibration_errors():
    with pytest.raises(CalibrationError):
        E.calibrate_magnitude(_linear_accuracy(0.4), 0.9, 200.0)
    with pytest.raises(ArgumentError):
        E.calibrate_magnitude(_linear_accuracy(0.4), 0.9, 0.0)
    with pytest.raises(CalibrationError):
        E.calibrate_magnitude(_linear_accuracy(0.4), 0.9, 5.0, lo=0.5, hi=1.0)


def test_zero_magnitude_has_zero_drop(desk):
    bench = desk.bench()
    acc = E.source_accuracy_fn(bench, (OUTPUT, RECURRENT))
    assert E.drop_stats([acc(0.0, r) for r in range(3)], bench.baseline_accuracy())[0] == 0.0


def test_drift_disabled_points_identical(desk):
    bench = desk.bench(attack_samples=40)
    small = E.Workbench(bench.spec, bench.fp_params, bench.hwa_params, desk.test.subset(np.arange(300)),
                        bench.attack, bench.calibration, bench.seed, bench.tile_config, bench.noise, bench.drift)
    rep = E.drift_study(small, attack=("PGD", ([1, 2], [0.01, 0.02])), n=2, drift=DriftModel(enabled=False))
    points = [rep.summary[k] for k in ("0", "86400", "604800")]
    for p in points[1:]:
        assert p["accuracies"] == points[0]["accuracies"]
        np.testing.assert_array_equal(p["envelope"]["mean"], points[0]["envelope"]["mean"])


def test_jobs_do_not_change_results(desk):
    bench = desk.bench()
    gen, evals = E.model_scenario(lambda s: bench.platform("AIMC_MODEL", seed=s), 2, 0)
    x, y = desk.test.images[:60], desk.test.labels[:60]
    a = E.asr_grid(gen, evals, "PGD", [1, 2], [0.02, 0.04], x, y, n=2, jobs=1)
    b = E.asr_grid(gen, evals, "PGD", [1, 2], [0.02, 0.04], x, y, n=2, jobs=4)
    assert a.samples.tobytes() == b.samples.tobytes()
    chip = bench.platform("AIMC_CHIP_INSTANCE")
    c = E.asr_grid(gen, chip, "PGD", [1, 2], [0.02, 0.04], x, y, n=2, jobs=1)
    d = E.asr_grid(gen, chip, "PGD", [1, 2], [0.02, 0.04], x, y, n=2, jobs=3)
    assert c.samples.tobytes() == d.samples.tobytes()


def test_report_files(tmp_path):
    rep = E.StudyReport("demo", [{"attack": "PGD", "asr": 0.25, "repetition": 0}, {"attack": "PGD", "asr": 0.5}],
                        {"area": np.float64(0.3), "mean": np.array([0.1, 0.2])})
    csv_path, json_path = rep.write(tmp_path)
    rows = list(csv.DictReader(open(csv_path)))
    assert rows[0] == {"attack": "PGD", "asr": "0.25", "repetition": "0"}
    assert rows[1]["repetition"] == ""
    assert json.loads(json_path.read_text()) == {"area": 0.3, "mean": [0.1, 0.2]}


def test_combination_band_filter(desk):
    bench = desk.bench(attack_samples=30)
    small = E.Workbench(bench.spec, bench.fp_params, bench.hwa_params, desk.test.subset(np.arange(300)),
                        bench.attack, bench.calibration, bench.seed, bench.tile_config, bench.noise, bench.drift)
    w = E.calibrate_source(small, (WEIGHT, RECURRENT), 5.0, repeats=3, tolerance=1.0)
    o = E.calibrate_source(small, (OUTPUT, RECURRENT), 5.0, repeats=3, tolerance=1.0)
    rep = E.combination_study(small, 5.0, (3.0, 7.0), proportions=3, output_points=6,
                              attack=("PGD", ([1, 2], [0.02, 0.04])), n=2, repeats=3, weight_only=w, output_only=o)
    assert rep.summary["retained"]
    assert all(3.0 <= r["drop"] <= 7.0 for r in rep.summary["retained"])
    pure_output = [r for r in rep.summary["retained"] if r["proportion"] == 0.0]
    if pure_output:
        assert pure_output[0]["output"] == pytest.approx(o.magnitude, rel=0.35)
    with pytest.raises(StudyError):
        E.combination_study(small, 5.0, (50.0, 50.1), proportions=2, output_points=3,
                            attack=("PGD", ([1, 2], [0.02, 0.04])), n=2, repeats=2, weight_only=w, output_only=o,
                            refine=0)
