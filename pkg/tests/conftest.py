import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Desk:
    """The CI profile: 12x12 MNIST sample, small CNN, FP32 and HWA weights trained once."""

    def __init__(self):
        from analogrobust import cli
        from analogrobust.config import load_config
        from analogrobust.platforms import TrainConfig, hwa_retrain, train_fp32
        from analogrobust.rng import derive_seed

        self.cfg = load_config(environ={})
        self.train, self.val, self.test, _ = cli.load_data(self.cfg)
        self.spec = cli.network_for(self.cfg, self.train)
        t, h, seed = self.cfg["training"], self.cfg["hwa"], self.cfg["seed"]
        self.fp = train_fp32(self.spec, self.train, self.val, TrainConfig(t["epochs"], t["lr"], t["momentum"],
                                                                          t["batch_size"], derive_seed(seed, "train")))
        self.hwa = hwa_retrain(self.spec, self.fp.params, self.train, self.val,
                               TrainConfig(h["epochs"], h["lr"], t["momentum"], t["batch_size"],
                                           derive_seed(seed, "hwa")), h["noise_std"])
        self.tile, self.noise, self.drift = cli.hardware_for(self.cfg)
        self.calibration = self.train.images[: self.cfg["dataset"]["calibration_samples"]]

    def bench(self, attack_samples=200, seed=None):
        from analogrobust.evaluation import Workbench

        n = min(attack_samples, len(self.test))
        return Workbench(self.spec, self.fp.params, self.hwa.params, self.test, self.test.subset(np.arange(n)),
                         self.calibration, self.cfg["seed"] if seed is None else seed, self.tile, self.noise,
                         self.drift)


@pytest.fixture(scope="session")
def desk():
    return Desk()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
