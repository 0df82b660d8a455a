import copy

import pytest

from analogrobust import config as C
from analogrobust.errors import ConfigError


def test_defaults_are_valid_and_complete():
    cfg = C.load_config(environ={})
    assert cfg == C.validate(copy.deepcopy(C.DEFAULTS))
    assert cfg["repetitions"]["envelope"] == 10 and cfg["hwa"]["noise_std"] == 0.08
    assert cfg["hil"]["reinfer_every"] == 50


def test_file_overrides_and_unknown_keys(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 7\ntraining:\n  epochs: 2\nattacks:\n  PGD:\n    iterations: [1, 2]\n"
                    "    magnitudes: [0.01, 0.02]\n")
    cfg = C.load_config(path, environ={})
    assert cfg["seed"] == 7 and cfg["training"]["epochs"] == 2 and cfg["training"]["lr"] == 0.1
    assert cfg["attacks"]["PGD"]["iterations"] == [1, 2]
    assert cfg["attacks"]["SQUARE"] == C.DEFAULTS["attacks"]["SQUARE"]
    path.write_text("training:\n  epoch: 2\n")
    with pytest.raises(ConfigError) as exc:
        C.load_config(path, environ={})
    assert exc.value.key == "training.epoch" and "training.epoch" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        C.load_config(overrides={"attacks": {"FGSM": {}}}, environ={})
    assert exc.value.key == "attacks.FGSM"


@pytest.mark.parametrize("override,key", [
    ({"seed": "zero"}, "seed"),
    ({"training": {"lr": "fast"}}, "training.lr"),
    ({"training": {"epochs": 1.5}}, "training.epochs"),
    ({"sweep": {"diagonal_only": 1}}, "sweep.diagonal_only"),
    ({"training": 3}, "training"),
    ({"platforms": ["TPU"]}, "platforms"),
    ({"dataset": {"name": "svhn"}}, "dataset.name"),
])
def test_type_errors_name_the_key(override, key):
    with pytest.raises(ConfigError) as exc:
        C.load_config(overrides=override, environ={})
    assert exc.value.key == key


def test_integers_promote_to_floats():
    assert C.load_config(overrides={"training": {"lr": 1}}, environ={})["training"]["lr"] == 1.0


def test_grid_checks():
    with pytest.raises(ConfigError) as exc:
        C.load_config(overrides={"attacks": {"PGD": {"magnitudes": [0.01, 0.02]}}}, environ={})
    assert exc.value.key == "attacks.PGD"
    with pytest.raises(ConfigError):
        C.load_config(overrides={"attacks": {"PGD": {"iterations": [2, 1, 3, 4, 5]}}}, environ={})
    with pytest.raises(ConfigError) as exc:
        C.load_config(overrides={"attacks": {"PGD": {"magnitudes": [0.01, 0.02, 0.03, 0.04, 0.5]}}}, environ={})
    assert exc.value.key == "attacks.PGD.magnitudes"
    with pytest.raises(ConfigError):
        C.load_config(overrides={"attacks": {"ONEPIXEL": {"magnitudes": [1, 2, 3, 4, 9]}}}, environ={})
    rect = C.load_config(overrides={"sweep": {"diagonal_only": False},
                                    "attacks": {"PGD": {"magnitudes": [0.01, 0.02]}}}, environ={})
    assert rect["attacks"]["PGD"]["magnitudes"] == [0.01, 0.02]
    with pytest.raises(ConfigError):
        C.load_config(overrides={"combination": {"target_drop": 6.0}}, environ={})


def test_environment_overrides(tmp_path):
    env = {"ANALOGROBUST__SEED": "11", "ANALOGROBUST__TRAINING__LR": "0.5",
           "ANALOGROBUST__ATTACKS__PGD__ITERATIONS": "[2, 4, 6, 8, 10]", "OTHER": "x"}
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\n")
    cfg = C.load_config(path, environ=env)
    assert cfg["seed"] == 11 and cfg["training"]["lr"] == 0.5
    assert cfg["attacks"]["PGD"]["iterations"] == [2, 4, 6, 8, 10]
    with pytest.raises(ConfigError) as exc:
        C.load_config(environ={"ANALOGROBUST__TRAINING__NOPE": "1"})
    assert exc.value.key == "training.nope"


def test_round_trip_and_hash(tmp_path):
    cfg = C.load_config(overrides={"seed": 5, "hardware": {"output_std": 0.1}}, environ={})
    path = tmp_path / "dump.yaml"
    path.write_text(C.dump_config(cfg))
    again = C.load_config(path, environ={})
    assert again == cfg
    assert C.config_hash(again) == C.config_hash(cfg)
    assert C.config_hash(C.load_config(overrides={"seed": 6}, environ={})) != C.config_hash(cfg)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        C.load_config(tmp_path / "none.yaml", environ={})
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        C.load_config(bad, environ={})
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        C.load_config(bad, environ={})
