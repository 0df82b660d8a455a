"""Shared setup for the demos: the 12x12 MNIST sample and a quickly trained small CNN."""

import numpy as np

from analogrobust import cli
from analogrobust.config import load_config
from analogrobust.evaluation import Workbench
from analogrobust.platforms import TrainConfig, hwa_retrain, train_fp32


def quick_bench(epochs=8, hwa_epochs=3, attack_samples=100, seed=0):
    cfg = load_config(overrides={"seed": seed}, environ={})
    train, val, test, _ = cli.load_data(cfg)
    spec = cli.network_for(cfg, train)
    fp = train_fp32(spec, train, val, TrainConfig(epochs=epochs, lr=0.1, seed=seed))
    hwa = hwa_retrain(spec, fp.params, train, val, TrainConfig(epochs=hwa_epochs, lr=0.05, seed=seed + 1), 0.08)
    tile, noise, drift = cli.hardware_for(cfg)
    bench = Workbench(spec, fp.params, hwa.params, test, test.subset(np.arange(attack_samples)),
                      train.images[:512], seed, tile, noise, drift)
    return cfg, bench
