import numpy as np
import pytest

from analogrobust import hil
from analogrobust import nn
from analogrobust.attacks import AttackSpec, run_attack
from analogrobust.errors import ArgumentError, StateError
from analogrobust.platforms import ActivationCache, deploy
from analogrobust.tile import DriftModel, NoiseModel, TileConfig

from oracles import least_squares_grid

IDEAL = TileConfig(converter_bits=None)


@pytest.fixture(scope="module")
def quiet_chip(rng_module):
    spec = nn.small_cnn((1, 8, 8), 3, (4, 8), 16)
    params = nn.init_params(spec, 2)
    cal = rng_module.random((32, 1, 8, 8), dtype=np.float32)
    return deploy(spec, params, "AIMC_CHIP_INSTANCE", seed=1, calibration=cal, tile_config=IDEAL,
                  noise=NoiseModel().quiet(), drift=DriftModel(enabled=False))


@pytest.fixture(scope="module")
def rng_module():
    return np.random.default_rng(99)


def _truth(chip, layer, block=0):
    tile = chip.analog[layer].blocks[block][2]
    return tile.g_programmed / tile.config.g_max


def test_probes_clipped_and_seeded(desk):
    chip = desk.bench().platform("AIMC_CHIP_INSTANCE")
    a = hil.probe_tile(chip, "conv1", B=64, seed=3)
    b = hil.probe_tile(chip, "conv1", B=64, seed=3)
    assert np.abs(a.X).max() <= 1.0
    np.testing.assert_array_equal(a.X, b.X)
    with pytest.raises(ArgumentError):
        hil.probe_tile(chip, "conv1", B=0)


def test_noiseless_orthogonal_recovery(quiet_chip, rng_module):
    for layer in quiet_chip.analog:
        rows = quiet_chip.analog[layer].blocks[0][2].shape[0]
        q, _ = np.linalg.qr(rng_module.standard_normal((rows, rows)))
        probes = hil.probe_tile(quiet_chip, layer, B=rows, inputs=q / np.abs(q).max())
        est = hil.infer_weights(probes).G
        truth = _truth(quiet_chip, layer)
        assert np.linalg.norm(est - truth) <= 1e-6 * np.linalg.norm(truth)


def test_two_by_two_matches_grid_search():
    G = np.array([[1.0, 2.0], [3.0, 4.0]])
    X = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [-0.3, 0.8]])
    p = hil.ProbeSet(X, X @ G, "l", 0, 0.0)
    est = hil.infer_weights(p, ridge=0.0).G
    ref = least_squares_grid(X, X @ G, lo=-5, hi=5)
    np.testing.assert_allclose(est, G, atol=1e-9)
    np.testing.assert_allclose(est, ref, atol=1e-3)


def test_underdetermined_probe_set_rejected():
    p = hil.ProbeSet(np.ones((1, 2)), np.ones((1, 2)), "l", 0, 0.0)
    with pytest.raises(ArgumentError):
        hil.infer_weights(p)


def test_rms_error_shrinks_with_probes(desk):
    chip = desk.bench().platform("AIMC_CHIP_INSTANCE", drift=DriftModel(enabled=False))
    truth = _truth(chip, "conv2")
    for seed in range(3):
        rms = [np.sqrt(np.mean((hil.infer_weights(hil.probe_tile(chip, "conv2", B=B, seed=seed)).G - truth) ** 2))
               for B in (500, 1000, 2000)]
        assert rms[0] > rms[1] > rms[2]


def _effective(chip):
    return {name: layer.effective_weights() for name, layer in chip.analog.items()}


def test_proxy_reproduces_pinned_logits(desk):
    chip = desk.bench().platform("AIMC_CHIP_INSTANCE")
    x = desk.test.images[:8]
    chip.logits(x, cache=True)
    proxy = hil.build_proxy(chip, chip.last_cache, _effective(chip))
    _, logits = proxy.forward(x)
    assert logits.data.tobytes() == chip.last_cache.logits.tobytes()


def test_proxy_gradient_equals_direct_on_digital(desk):
    net = desk.bench().platform("DIGITAL")
    x, y = desk.test.images[:16], desk.test.labels[:16]
    _, direct, _ = net.loss_grad(x, y)
    net.logits(x, cache=True)
    weights = {layer.name: net.params[f"{layer.name}.weight"] for layer in net.spec.linear_layers}
    _, proxied, _ = hil.build_proxy(net, net.last_cache, weights).loss_grad(x, y)
    np.testing.assert_array_equal(proxied, direct)


def test_incomplete_cache_rejected(desk):
    chip = desk.bench().platform("AIMC_CHIP_INSTANCE")
    with pytest.raises(StateError):
        hil.build_proxy(chip, ActivationCache(), _effective(chip))
    with pytest.raises(StateError):
        hil.build_proxy(chip, None, _effective(chip))


def test_proxy_gradient_correlates_with_true_gradient(desk):
    bench = desk.bench()
    chip = bench.platform("AIMC_CHIP_INSTANCE")
    x, y = desk.test.images[:100], desk.test.labels[:100]
    weights = hil.infer_network(chip, B=2000)
    chip.logits(x, cache=True)
    _, g, _ = hil.build_proxy(chip, chip.last_cache, weights).loss_grad(x, y)
    _, ref, _ = bench.platform("HWA_FP32").loss_grad(x, y)
    assert np.corrcoef(g.ravel(), ref.ravel())[0, 1] > 0.5


def test_degenerate_hil_pgd_equals_pgd(quiet_chip, rng_module):
    x = rng_module.random((6, 1, 8, 8), dtype=np.float32)
    y = quiet_chip.classify(x)
    spec = AttackSpec("PGD", 4, 0.05, random_start=True, seed=2)
    ref = run_attack(quiet_chip, x, y, spec).adversarial
    got = hil.hil_attack(quiet_chip, x, y, spec, latency=0.0, weights=_effective(quiet_chip)).adversarial
    assert got.tobytes() == ref.tobytes()
    # inferred weights are exact to rounding here, so the attack agrees almost everywhere
    inferred = hil.hil_attack(quiet_chip, x, y, spec, latency=0.0, reinfer_every=2, B=256).adversarial
    assert np.mean(inferred == ref) > 0.99


def test_reinference_schedule_and_time(desk):
    chip = desk.bench().platform("AIMC_CHIP_INSTANCE")
    x, y = desk.test.images[:4], desk.test.labels[:4]
    log = hil.HilLog()
    hil.hil_attack(chip, x, y, AttackSpec("PGD", 5, 0.05), reinfer_every=2, B=200, latency=1.0, history=log)
    assert [it for _, it in log.inferences] == [0, 2, 4]
    assert log.queries == 5 * len(x)
    assert chip.elapsed == pytest.approx(5 * len(x))
    times = [t for t, _ in log.inferences]
    assert times == sorted(times) and times[0] < times[-1]
    with pytest.raises(ArgumentError):
        hil.hil_attack(chip, x, y, AttackSpec("PGD", 1, 0.05), reinfer_every=0)
    with pytest.raises(ArgumentError):
        hil.hil_attack(chip, x, y, AttackSpec("SQUARE", 1, 0.05))


def test_onepixel_hil_uses_timed_queries(desk):
    chip = desk.bench().platform("AIMC_CHIP_INSTANCE")
    x, y = desk.test.images[:3], desk.test.labels[:3]
    log = hil.HilLog()
    batch = hil.hil_attack(chip, x, y, AttackSpec("ONEPIXEL", 2, 1, seed=1), latency=0.5, history=log)
    assert batch.platform == "AIMC_CHIP_INSTANCE+HIL" and batch.budget["ok"]
    assert log.queries > 0 and chip.elapsed == pytest.approx(0.5 * log.queries)


def test_reinference_freshness(desk):
    chip = desk.bench().platform("AIMC_CHIP_INSTANCE")
    stale = hil.infer_weights(hil.probe_tile(chip, "fc2", B=500, seed=1))
    chip.advance(7 * 86400.0)
    fresh_probes = hil.probe_tile(chip, "fc2", B=500, seed=2)
    fresh = hil.infer_weights(fresh_probes)
    assert fresh.time > stale.time
    assert hil.residual(fresh, fresh_probes) <= hil.residual(stale, fresh_probes)
