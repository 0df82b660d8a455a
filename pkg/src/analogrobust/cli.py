"""``analogrobust`` command line: one subcommand per pipeline stage.

Artifacts live under ``--out`` (default from the config) and every stage
records what it wrote in ``manifest.json``. Exit codes: 0 success, 2 config
error, 3 missing upstream artifact, 4 numerical or calibration failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import nn
from .attacks import AttackKind, AttackSpec, run_attack
from .config import config_hash, dump_config, load_config
from .errors import CalibrationError, ConfigError, DependencyError, NumericalError, StudyError
from .evaluation import (SOURCES, StudyReport, Workbench, ablation_study, calibrate_source, combination_study,
                         drift_study, hil_study, platform_study, write_csv)
from .platforms import PlatformKind, QuantizedParams, TrainConfig, deploy, hwa_retrain, ptq, train_fp32
from .plots import emit_plots
from .rng import derive_seed
from .serialization import load_arrays, save_arrays, sibling
from .tile import DriftModel, NoiseModel, TileConfig, load_models

log = logging.getLogger("analogrobust")

STAGES = ["train", "hwa-retrain", "ptq", "deploy", "attack", "sweep", "ablate", "calibrate", "drift", "combine",
          "hil", "report"]


# ----------------------------------------------------------------------
# run directory


class Run:
    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.path = self.out / "manifest.json"
        if self.path.exists():
            self.manifest = json.loads(self.path.read_text())
        else:
            self.manifest = {"stages": {}}
        self.manifest.update({"config_hash": config_hash(cfg), "config": cfg,
                              "versions": {"analogrobust": __version__, "numpy": np.__version__}})

    def record(self, stage: str, files) -> None:
        stamp = os.environ.get("SOURCE_DATE_EPOCH")
        entry = {"seed": derive_seed(self.cfg["seed"], stage),
                 "files": sorted(str(Path(f).relative_to(self.out)) for f in files),
                 "timestamp": int(stamp) if stamp else int(time.time())}
        self.manifest["stages"][stage] = entry
        (self.out / "config.yaml").write_text(dump_config(self.cfg))
        self.path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    def need(self, rel: str, producer: str) -> Path:
        p = self.out / rel
        if not p.exists():
            raise DependencyError(f"missing {rel}", producer=producer)
        return p


# ----------------------------------------------------------------------
# building blocks


def load_data(cfg: dict):
    """(train, val, test, split record) per the dataset section."""
    dcfg, seed = cfg["dataset"], cfg["seed"]
    test_idx = None
    if dcfg["name"] == "cifar10":
        train_all, test = D.load_cifar10(dcfg["path"])
    elif dcfg["name"] == "idx":
        root = Path(dcfg["path"])
        train_all = D.load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
        test = D.load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")
    else:
        full = D.load_mnist5k()
        # stratified hold-out, so the balanced HIL subset always exists
        test_idx = D.balanced_indices(full.labels, dcfg["test_size"] // full.num_classes, derive_seed(seed, "test"),
                                      full.num_classes)
        train_all, test = full.subset(np.setdiff1d(np.arange(len(full)), test_idx)), full.subset(test_idx)
    n_val = int(round(len(train_all) * dcfg["val_fraction"]))
    train, val, (train_idx, val_idx) = D.split_train_val(train_all, derive_seed(seed, "val"), n_val)
    splits = {"train": train_idx.tolist(), "val": val_idx.tolist()}
    if test_idx is not None:
        splits["test"] = test_idx.tolist()
    return train, val, test, splits


def network_for(cfg: dict, train: D.Dataset) -> nn.NetworkSpec:
    norm = D.Normalizer.fit(train)
    spec = nn.small_cnn(train.input_shape, train.num_classes, tuple(cfg["network"]["channels"]),
                        cfg["network"]["hidden"])
    spec.mean, spec.std = norm.mean, norm.std
    return spec


def hardware_for(cfg: dict) -> tuple[TileConfig, NoiseModel, DriftModel]:
    h = cfg["hardware"]
    tile = TileConfig(h["tile_rows"], h["tile_cols"], h["g_max"], h["adc_unit"], h["converter_bits"])
    if h["noise_model"]:
        noise, drift = load_models(h["noise_model"])
        return tile, noise, drift or DriftModel()
    g_adc = np.linspace(0.0, tile.g_max / tile.adc_unit, 33)
    std = h["read_std_scale"] * np.sqrt(g_adc / g_adc[-1]) * g_adc[-1]
    noise = NoiseModel(prog_std_poly=tuple(h["prog_std_poly"]), read_lut_g=tuple(g_adc.tolist()),
                       read_lut_std=tuple(std.tolist()), output_std=h["output_std"])
    drift = DriftModel(nu_mean_lut=(h["nu_mean"],) * 2, nu_std_lut=(h["nu_std"],) * 2, t0=h["t0"])
    return tile, noise, drift


def load_weights(run: Run, name: str, producer: str):
    run.need(f"weights/{name}.json", producer)
    return nn.load_params(run.out / "weights" / name)


def workbench(run: Run) -> Workbench:
    cfg = run.cfg
    train, val, test, _ = load_data(cfg)
    spec, fp, _ = load_weights(run, "fp32", "train")
    _, hwa, _ = load_weights(run, "hwa", "hwa-retrain")
    tile, noise, drift = hardware_for(cfg)
    n_attack = min(cfg["dataset"]["attack_samples"], len(test))
    cal = train.images[: cfg["dataset"]["calibration_samples"]]
    bench = Workbench(spec, fp, hwa, test, test.subset(np.arange(n_attack)), cal, cfg["seed"], tile, noise, drift)
    digital = run.out / "weights" / "digital.json"
    if digital.exists():
        arrays, meta = load_arrays(run.out / "weights" / "digital")
        bench.quant = QuantizedParams(arrays, {k: np.asarray(v, np.float32) for k, v in meta["weight_scales"].items()},
                                      meta["act_steps"], meta["act_unsigned"])
    return bench


def _attack_axes(cfg, name):
    grid = cfg["attacks"][name]
    return AttackKind(name), (grid["iterations"], grid["magnitudes"])


# ----------------------------------------------------------------------
# subcommands


def cmd_train(run: Run, args) -> list:
    cfg = run.cfg
    train, val, test, splits = load_data(cfg)
    spec = network_for(cfg, train)
    t = cfg["training"]
    res = train_fp32(spec, train, val, TrainConfig(t["epochs"], t["lr"], t["momentum"], t["batch_size"],
                                                   derive_seed(cfg["seed"], "train")))
    files = list(nn.save_params(run.out / "weights" / "fp32", spec, res.params,
                                {"history": res.history, "best_epoch": res.best_epoch}))
    split_path = run.out / "data" / "splits.json"
    split_path.parent.mkdir(parents=True, exist_ok=True)
    split_path.write_text(json.dumps(splits))
    files.append(split_path)
    log.info("fp32 best epoch %d", res.best_epoch)
    return files


def cmd_hwa(run: Run, args) -> list:
    cfg = run.cfg
    train, val, _, _ = load_data(cfg)
    spec, fp, _ = load_weights(run, "fp32", "train")
    h, t = cfg["hwa"], cfg["training"]
    res = hwa_retrain(spec, fp, train, val, TrainConfig(h["epochs"], h["lr"], t["momentum"], t["batch_size"],
                                                        derive_seed(cfg["seed"], "hwa")), h["noise_std"])
    scales = {k: v.tolist() for k, v in res.channel_scales.items()}
    return list(nn.save_params(run.out / "weights" / "hwa", spec, res.params,
                               {"history": res.history, "best_epoch": res.best_epoch, "channel_scales": scales}))


def cmd_ptq(run: Run, args) -> list:
    cfg = run.cfg
    train, _, _, _ = load_data(cfg)
    spec, hwa, _ = load_weights(run, "hwa", "hwa-retrain")
    q = ptq(spec, hwa, train.images[: cfg["dataset"]["calibration_samples"]])
    meta = {"network": spec.to_dict(), "act_steps": q.act_steps, "act_unsigned": q.act_unsigned,
            "weight_scales": {k: v.tolist() for k, v in q.weight_scales.items()}}
    return list(save_arrays(run.out / "weights" / "digital", q.params, meta))


def cmd_deploy(run: Run, args) -> list:
    bench = workbench(run)
    files = []
    out = run.out / "deployments"
    out.mkdir(parents=True, exist_ok=True)
    for kind in run.cfg["platforms"]:
        net = bench.platform(kind)
        path = out / f"{kind.lower()}.json"
        path.write_text(json.dumps(net.manifest(), indent=2, sort_keys=True))
        files.append(path)
    return files


def cmd_attack(run: Run, args) -> list:
    bench = workbench(run)
    kind = AttackKind(args.kind)
    grid = run.cfg["attacks"][kind.value]
    iterations = args.iterations if args.iterations is not None else grid["iterations"][-1]
    magnitude = args.magnitude if args.magnitude is not None else grid["magnitudes"][-1]
    net = bench.platform(args.platform)
    spec = AttackSpec(kind, iterations, magnitude, seed=derive_seed(run.cfg["seed"], "attack"))
    batch = run_attack(net, bench.attack.images, bench.attack.labels, spec)
    stem = run.out / "attacks" / f"{kind.value.lower()}_{args.platform.lower()}_{iterations}_{magnitude:g}"
    batch.save(stem)
    return [sibling(stem, ".bin"), sibling(stem, ".json")]


def _write(run: Run, report: StudyReport) -> list:
    return list(report.write(run.out / "reports"))


def cmd_sweep(run: Run, args) -> list:
    cfg = run.cfg
    bench = workbench(run)
    attacks = {name: _attack_axes(cfg, name)[1] for name in cfg["sweep"]["attacks"]}
    return _write(run, platform_study(bench, attacks, cfg["repetitions"]["envelope"], args.jobs, cfg["platforms"]))


def cmd_ablate(run: Run, args) -> list:
    cfg = run.cfg
    bench = workbench(run)
    rep = cfg["repetitions"]
    report = ablation_study(bench, tuple(cfg["ablation"]["drops"]), _attack_axes(cfg, cfg["ablation"]["attack"]),
                            rep["accuracy"], rep["envelope"], rep["calibration"], args.jobs)
    return _write(run, report)


def cmd_calibrate(run: Run, args) -> list:
    cfg = run.cfg
    bench = workbench(run)
    drops = args.drop or cfg["calibration"]["drops"]
    source = tuple(cfg["calibration"]["source"])
    if source not in SOURCES.values():
        raise ConfigError(f"unknown source {list(source)}", key="calibration.source")
    baseline = bench.baseline_accuracy()
    report = StudyReport("calibration", summary={"baseline_accuracy": baseline, "results": []})
    for drop in drops:
        res = calibrate_source(bench, source, float(drop), baseline, repeats=cfg["repetitions"]["calibration"],
                               tolerance=cfg["calibration"]["tolerance"])
        report.summary["results"].append(res.to_dict())
        report.rows += [{"target_drop": float(drop), "probe": i, "magnitude": m, "drop": d}
                        for i, (m, d) in enumerate(res.probes)]
    return _write(run, report)


def cmd_drift(run: Run, args) -> list:
    cfg = run.cfg
    bench = workbench(run)
    report = drift_study(bench, tuple(cfg["drift"]["times"]), _attack_axes(cfg, cfg["drift"]["attack"]),
                         cfg["repetitions"]["envelope"], jobs=args.jobs)
    return _write(run, report)


def cmd_combine(run: Run, args) -> list:
    cfg = run.cfg
    bench = workbench(run)
    c = cfg["combination"]
    report = combination_study(bench, c["target_drop"], tuple(c["band"]), c["proportions"], c["output_points"],
                               _attack_axes(cfg, c["attack"]), cfg["repetitions"]["envelope"], c["repeats"],
                               args.jobs)
    return _write(run, report)


def cmd_hil(run: Run, args) -> list:
    cfg = run.cfg
    bench = workbench(run)
    per_class = cfg["dataset"]["balanced_per_class"]
    idx_path = run.out / "data" / "balanced.json"
    if idx_path.exists():
        subset = bench.test.subset(D.load_indices(idx_path))
    else:
        subset, _ = D.balanced_subset(bench.test, per_class, derive_seed(cfg["seed"], "balanced"), idx_path)
    h = cfg["hil"]
    report = hil_study(bench, subset, _attack_axes(cfg, h["attack"]), cfg["repetitions"]["envelope"], h["B"],
                       h["reinfer_every"], h["latency"])
    return _write(run, report) + [idx_path]


def cmd_report(run: Run, args) -> list:
    reports = sorted((run.out / "reports").glob("*.csv")) if (run.out / "reports").exists() else []
    if not reports:
        log.warning("no reports under %s", run.out / "reports")
    return emit_plots(reports, run.out / "plots")


COMMANDS = {"train": cmd_train, "hwa-retrain": cmd_hwa, "ptq": cmd_ptq, "deploy": cmd_deploy, "attack": cmd_attack,
            "sweep": cmd_sweep, "ablate": cmd_ablate, "calibrate": cmd_calibrate, "drift": cmd_drift,
            "combine": cmd_combine, "hil": cmd_hil, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for independent work items")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="analogrobust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common])
        if name == "attack":
            p.add_argument("--platform", default="FP32", choices=[k.value for k in PlatformKind])
            p.add_argument("--kind", default="PGD", choices=[k.value for k in AttackKind])
            p.add_argument("--iterations", type=int)
            p.add_argument("--magnitude", type=float)
        if name == "calibrate":
            p.add_argument("--drop", type=float, action="append", help="target drop in percentage points")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = load_config(args.config, overrides)
        run = Run(cfg, Path(cfg["out"]))
        files = COMMANDS[args.command](run, args)
        run.record(args.command, files)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except (CalibrationError, NumericalError, StudyError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
