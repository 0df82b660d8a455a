"""ASR metric, attack-grid sweeps, envelopes, calibration and study drivers.

Work items (grid cells, repetitions) draw recurrent noise from private
streams keyed by their index, so results do not depend on the order or the
number of workers that execute them.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import nn
from .attacks import AttackKind, AttackSpec, run_attack
from .data import Dataset, interleave
from .errors import ArgumentError, CalibrationError, StudyError, UndefinedMetricError
from .platforms import DeployedNetwork, PlatformKind, QuantizedParams, deploy, ptq
from .rng import derive_seed
from .tile import NON_RECURRENT, OUTPUT, RECURRENT, WEIGHT, DriftModel, NoiseModel, TileConfig, combine_sources, \
    isolate_source

log = logging.getLogger(__name__)

DAY, WEEK = 86_400.0, 604_800.0


# ----------------------------------------------------------------------
# metric


def asr_from_predictions(clean_pred, adv_pred, y) -> float:
    """Among clean-correct samples, the fraction whose adversarial prediction is wrong."""
    clean_pred, adv_pred, y = (np.asarray(a) for a in (clean_pred, adv_pred, y))
    if not (clean_pred.shape == adv_pred.shape == y.shape):
        raise ArgumentError("predictions and targets must be aligned")
    mask = clean_pred == y
    if not mask.any():
        raise UndefinedMetricError("no sample is classified correctly on clean input")
    return float(np.count_nonzero(adv_pred[mask] != y[mask]) / np.count_nonzero(mask))


def paired_predictions(model, x, x_adv, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Present clean_i, adv_i interleaved; every pair lands in one mini-batch."""
    seq = interleave(np.asarray(x, dtype=np.float32), np.asarray(x_adv, dtype=np.float32))
    pred = model.predict(seq, batch_size=batch_size + batch_size % 2).argmax(axis=1)
    return pred[0::2], pred[1::2]


def asr(model, x, y, x_adv) -> float:
    clean, adv = paired_predictions(model, x, x_adv)
    return asr_from_predictions(clean, adv, y)


def accuracy(model, x, y) -> float:
    return float(np.mean(model.predict(np.asarray(x, dtype=np.float32)).argmax(axis=1) == np.asarray(y)))


# ----------------------------------------------------------------------
# grids and envelopes


@dataclass
class AsrGrid:
    iterations: list
    magnitudes: list
    mean: np.ndarray
    std: np.ndarray
    samples: np.ndarray  # I x J x n, NaN where a cell was skipped
    kind: str = ""
    label: str = ""

    @property
    def n(self) -> int:
        return self.samples.shape[2]

    def rows(self, **extra) -> list[dict]:
        out = []
        for i, it in enumerate(self.iterations):
            for j, mag in enumerate(self.magnitudes):
                for r in range(self.n):
                    if not np.isnan(self.samples[i, j, r]):
                        out.append({**extra, "attack": self.kind, "scenario": self.label, "iterations": it,
                                    "magnitude": mag, "repetition": r, "asr": float(self.samples[i, j, r])})
        return out


def _check_axis(values, name):
    values = list(values)
    if not values:
        raise ArgumentError(f"{name} axis is empty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ArgumentError(f"{name} axis must be strictly increasing")
    return values


def asr_grid(gen, evaluator, kind, iterations, magnitudes, x, y, n: int = 10, seed: int = 0,
             diagonal_only: bool = False, jobs: int = 1, label: str = "", **attack_options) -> AsrGrid:
    """Generate each cell once on ``gen`` and evaluate it ``n`` times on ``evaluator``.

    ``evaluator`` is a deployed network (repetitions redraw its recurrent noise)
    or a list of ``n`` networks, one per repetition. ``gen`` may be a callable
    ``(x, y, spec) -> adversarial array`` for custom generators such as the
    hardware-in-the-loop driver.
    """
    kind = AttackKind(kind)
    iterations = _check_axis(iterations, "iteration")
    magnitudes = _check_axis(magnitudes, "magnitude")
    if diagonal_only and len(iterations) != len(magnitudes):
        raise ArgumentError("diagonal sweeps need a square grid")
    evals = list(evaluator) if isinstance(evaluator, (list, tuple)) else None
    if evals is not None and len(evals) != n:
        raise ArgumentError(f"{len(evals)} evaluation networks for n={n}")
    stochastic = any(e.stochastic for e in evals) if evals else evaluator.stochastic
    if stochastic and n < 2:
        raise ArgumentError("stochastic evaluation platforms need n >= 2")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    cells = [(i, j) for i in range(len(iterations)) for j in range(len(magnitudes)) if not diagonal_only or i == j]
    samples = np.full((len(iterations), len(magnitudes), n), np.nan)

    def work(cell):
        i, j = cell
        spec = AttackSpec(kind, int(iterations[i]), float(magnitudes[j]), seed=derive_seed(seed, "attack", i, j),
                          **attack_options)
        if callable(gen) and not isinstance(gen, DeployedNetwork):
            adv = gen(x, y, spec)
        else:
            adv = run_attack(gen.fork("gen", i, j), x, y, spec).adversarial
        out = []
        for r in range(n):
            net = evals[r] if evals else evaluator
            out.append(asr(net.fork("eval", i, j, r), x, y, adv))
        return cell, out

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(c) for c in cells]
    for (i, j), vals in results:
        samples[i, j] = vals
    mean, std = _shifted_stats(samples)
    return AsrGrid(iterations, magnitudes, mean, std, samples, kind.value, label)


def _shifted_stats(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """NaN-aware mean and std over the last axis, shifted by the first sample.

    Identical repetitions give exactly their value and a std of exactly 0.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # skipped cells stay NaN
        d = samples - samples[..., :1]
        dm = np.nanmean(d, axis=2)
        var = np.maximum(np.nanmean(d * d, axis=2) - dm * dm, 0.0)
        return samples[..., 0] + dm, np.sqrt(var)


@dataclass
class Envelope:
    iterations: list
    magnitudes: list
    mean: np.ndarray
    std: np.ndarray
    samples: np.ndarray | None = None  # K x n

    def __len__(self) -> int:
        return len(self.mean)


def envelope(grid: AsrGrid) -> Envelope:
    """Diagonal of a square grid, bottom-left to top-right."""
    k = len(grid.iterations)
    if len(grid.magnitudes) != k:
        raise ArgumentError("envelope needs a square grid")
    idx = np.arange(k)
    return Envelope(list(grid.iterations), list(grid.magnitudes), grid.mean[idx, idx].copy(),
                    grid.std[idx, idx].copy(), grid.samples[idx, idx].copy())


def envelope_area(values) -> float:
    """Trapezoidal area over the point index, relative to span x 100% ASR."""
    v = np.asarray(values.mean if isinstance(values, Envelope) else values, dtype=np.float64)
    if v.size < 2:
        raise ArgumentError("envelope area needs at least two points")
    return float(np.sum((v[1:] + v[:-1]) / 2) / (v.size - 1))


def area_samples(env: Envelope) -> np.ndarray:
    """Per-repetition areas."""
    return np.array([envelope_area(env.samples[:, r]) for r in range(env.samples.shape[1])])


def area_stats(env: Envelope) -> tuple[float, float]:
    a = area_samples(env)
    return float(a.mean()), float(a.std())


# ----------------------------------------------------------------------
# comparisons used by the studies


def se_diff(sa: float, sb: float, n: int) -> float:
    return math.sqrt((sa**2 + sb**2) / max(n, 1))


def not_below(a: float, b: float, sa: float, sb: float, n: int) -> bool:
    """One-sided: the gap a - b is not significantly negative at 2 sigma."""
    return a - b >= -2 * se_diff(sa, sb, n)


def clearly_above(a: float, b: float, sa: float, sb: float, n: int) -> bool:
    """a exceeds b by more than 2 sigma of the difference."""
    return a - b > 2 * se_diff(sa, sb, n)


def within_bands(a: float, b: float, sa: float, sb: float) -> bool:
    """Each mean lies inside the other's 2-sigma band."""
    return abs(a - b) <= 2 * max(sa, sb)


# ----------------------------------------------------------------------
# workbench


@dataclass
class Workbench:
    """Everything the studies share: network, weights, data and hardware models."""

    spec: nn.NetworkSpec
    fp_params: dict
    hwa_params: dict
    test: Dataset
    attack: Dataset
    calibration: np.ndarray
    seed: int = 0
    tile_config: TileConfig = field(default_factory=TileConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    drift: DriftModel = field(default_factory=DriftModel)
    quant: QuantizedParams | None = None

    def platform(self, kind, seed=None, noise: NoiseModel | None = None, drift: DriftModel | None = None,
                 params=None) -> DeployedNetwork:
        kind = PlatformKind(kind)
        if kind == PlatformKind.FP32:
            return deploy(self.spec, params or self.fp_params, kind)
        if kind == PlatformKind.HWA_FP32:
            return deploy(self.spec, params or self.hwa_params, kind)
        if kind == PlatformKind.DIGITAL:
            if params is not None:
                return deploy(self.spec, params, kind, quant=ptq(self.spec, params, self.calibration))
            if self.quant is None:
                self.quant = ptq(self.spec, self.hwa_params, self.calibration)
            return deploy(self.spec, self.hwa_params, kind, quant=self.quant)
        if seed is None:
            seed = derive_seed(self.seed, "chip" if kind == PlatformKind.AIMC_CHIP_INSTANCE else "model")
        return deploy(self.spec, params or self.hwa_params, kind, seed=seed, calibration=self.calibration,
                      tile_config=self.tile_config, noise=noise or self.noise, drift=drift or self.drift)

    def isolated(self, source, magnitude: float, seed=None, drift: bool = False) -> DeployedNetwork:
        noise = isolate_source(self.noise, tuple(source), magnitude, self.tile_config)
        return self.platform(PlatformKind.AIMC_MODEL, seed, noise, self.drift if drift else DriftModel(enabled=False))

    def combined(self, output_mag: float, weight_mag: float, seed=None) -> DeployedNetwork:
        noise = combine_sources(self.noise, output_mag, weight_mag, self.tile_config)
        return self.platform(PlatformKind.AIMC_MODEL, seed, noise, DriftModel(enabled=False))

    def baseline_accuracy(self) -> float:
        """Same analog platform with every stochastic source off."""
        net = self.platform(PlatformKind.AIMC_MODEL, noise=self.noise.quiet(), drift=DriftModel(enabled=False))
        return accuracy(net, self.test.images, self.test.labels)


def model_scenario(factory, n: int, seed: int, label: str = "model"):
    """(generator, evaluators) for a stochastic hardware model.

    Inputs are generated on one instance; each of the ``n`` evaluation
    repetitions is a fresh instance, so non-recurrent draws are resampled
    between repetitions just like recurrent ones.
    """
    gen = factory(derive_seed(seed, label, "gen"))
    return gen, [factory(derive_seed(seed, label, "rep", r)) for r in range(n)]


# ----------------------------------------------------------------------
# calibration


@dataclass
class CalibrationResult:
    source: tuple
    target_drop: float
    magnitude: float
    achieved_drop: float
    ci: float
    repeats: int
    probes: list = field(default_factory=list)  # (magnitude, drop)

    def to_dict(self) -> dict:
        return {"source": list(self.source), "target_drop": self.target_drop, "magnitude": self.magnitude,
                "achieved_drop": self.achieved_drop, "ci": self.ci, "repeats": self.repeats,
                "probes": [list(p) for p in self.probes]}


def drop_stats(accuracies, baseline: float) -> tuple[float, float]:
    """Mean drop in percentage points and its 95% half-width."""
    acc = np.asarray(accuracies, dtype=np.float64)
    drops = (baseline - acc) * 100
    half = 1.96 * drops.std(ddof=1) / math.sqrt(len(drops)) if len(drops) > 1 else 0.0
    return float(drops.mean()), float(half)


def calibrate_magnitude(accuracy_at, baseline: float, target_drop: float, lo: float = 0.0, hi: float = 1.0,
                        repeats: int = 20, tolerance: float = 0.25, max_probes: int = 40,
                        source=("", "")) -> CalibrationResult:
    """Stochastic bisection on the magnitude.

    ``accuracy_at(magnitude, r)`` returns the accuracy of repetition ``r``;
    the same repetition indices are used at every probe (common random
    numbers), which keeps the estimated drop curve monotone in practice.
    ``target_drop`` and ``tolerance`` are percentage points.
    """
    if target_drop <= 0:
        raise ArgumentError("target drop must be positive")
    probes = []

    def measure(m):
        d, ci = drop_stats([accuracy_at(m, r) for r in range(repeats)], baseline)
        probes.append((float(m), d))
        return d, ci

    d_hi, ci_hi = measure(hi)
    if d_hi < target_drop - tolerance:
        raise CalibrationError(f"magnitude {hi} only drops {d_hi:.2f} pp, target {target_drop} pp is not bracketed")
    if abs(d_hi - target_drop) <= tolerance:
        return CalibrationResult(tuple(source), target_drop, hi, d_hi, ci_hi, repeats, probes)
    d_lo = 0.0 if lo == 0 else measure(lo)[0]
    if d_lo > target_drop + tolerance:
        raise CalibrationError(f"magnitude {lo} already drops {d_lo:.2f} pp, above the target")
    best = (abs(d_hi - target_drop), hi, d_hi, ci_hi)
    a, b = lo, hi
    while len(probes) < max_probes:
        m = 0.5 * (a + b)
        d, ci = measure(m)
        if abs(d - target_drop) < best[0]:
            best = (abs(d - target_drop), m, d, ci)
        if abs(d - target_drop) <= tolerance:
            break
        if d < target_drop:
            a = m
        else:
            b = m
    _, m, d, ci = best
    mags, drops = zip(*sorted(probes))
    if any(db < da - 3 * tolerance for da, db in zip(drops, drops[1:])):
        log.warning("drop curve is not monotone over the probed bracket: %s", probes)
    return CalibrationResult(tuple(source), target_drop, m, d, ci, repeats, probes)


def source_accuracy_fn(bench: Workbench, source, x=None, y=None):
    """``(magnitude, r) -> accuracy`` for one isolated source.

    Non-recurrent sources vary the deployment seed with ``r``; recurrent
    sources keep one deployment and vary the noise stream.
    """
    x = bench.test.images if x is None else x
    y = bench.test.labels if y is None else y
    recurrent = tuple(source)[1] == RECURRENT

    def acc(magnitude, r):
        seed = derive_seed(bench.seed, "calibration") if recurrent else derive_seed(bench.seed, "calibration", r)
        net = bench.isolated(source, magnitude, seed=seed)
        return accuracy(net.fork("acc", r), x, y)

    return acc


def calibrate_source(bench: Workbench, source, target_drop: float, baseline: float | None = None,
                     hi: float | None = None, repeats: int = 20, tolerance: float = 0.25) -> CalibrationResult:
    baseline = bench.baseline_accuracy() if baseline is None else baseline
    hi = hi if hi is not None else (1.0 if tuple(source)[0] == OUTPUT else 0.6)
    return calibrate_magnitude(source_accuracy_fn(bench, source), baseline, target_drop, 0.0, hi, repeats,
                               tolerance, source=tuple(source))


# ----------------------------------------------------------------------
# studies


@dataclass
class StudyReport:
    name: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{self.name}.csv", out / f"{self.name}.json"
        write_csv(csv_path, self.rows)
        json_path.write_text(json.dumps(_plain(self.summary), indent=2, sort_keys=True))
        return csv_path, json_path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def write_csv(path, rows: list[dict]) -> None:
    header = []
    for row in rows:
        header += [k for k in row if k not in header]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _env_summary(env: Envelope) -> dict:
    mean, std = area_stats(env)
    return {"area": envelope_area(env), "area_mean": mean, "area_std": std, "mean": env.mean, "std": env.std,
            "iterations": env.iterations, "magnitudes": env.magnitudes}


def platform_study(bench: Workbench, attacks: dict, n: int = 10, jobs: int = 1,
                   platforms=tuple(PlatformKind)) -> StudyReport:
    """One diagonal sweep per platform and attack in the strongest available scenario.

    Deterministic platforms generate and evaluate on themselves. The model
    generates on one instance and is evaluated on ``n`` fresh instances. The
    chip instance cannot be differentiated directly, so its inputs come from
    the model and are evaluated ``n`` times on the single chip.
    """
    report = StudyReport("platforms")
    x, y = bench.attack.images, bench.attack.labels
    for kind in map(PlatformKind, platforms):
        if kind == PlatformKind.AIMC_MODEL:
            gen, evals = model_scenario(lambda s: bench.platform(kind, seed=s), n, bench.seed)
            acc_net = evals
        elif kind == PlatformKind.AIMC_CHIP_INSTANCE:
            gen = bench.platform(PlatformKind.AIMC_MODEL, seed=derive_seed(bench.seed, "model", "gen"))
            evals = bench.platform(kind)
            acc_net = [evals.fork("acc", r) for r in range(n)]
        else:
            gen = evals = bench.platform(kind)
            acc_net = [evals]
        reps = n if kind.stochastic else 1
        entry = report.summary.setdefault(kind.value, {})
        for attack, (iters, mags) in attacks.items():
            grid = asr_grid(gen, evals, attack, iters, mags, x, y, reps, bench.seed, diagonal_only=True, jobs=jobs,
                            label=kind.value)
            report.rows += grid.rows()
            entry[AttackKind(attack).value] = _env_summary(envelope(grid))
        accs = [accuracy(a, bench.test.images, bench.test.labels) for a in acc_net]
        entry["clean_accuracy"] = float(np.mean(accs))
        entry["clean_accuracy_std"] = float(np.std(accs))
    return report


SOURCES = {
    "output_recurrent": (OUTPUT, RECURRENT),
    "output_non_recurrent": (OUTPUT, NON_RECURRENT),
    "weight_recurrent": (WEIGHT, RECURRENT),
    "weight_non_recurrent": (WEIGHT, NON_RECURRENT),
}


def accuracy_distribution(bench: Workbench, source, magnitude: float, n: int) -> np.ndarray:
    """n repetitions: fresh deployments (non-recurrent) or fresh noise streams (recurrent)."""
    recurrent = tuple(source)[1] == RECURRENT
    out = []
    for r in range(n):
        seed = derive_seed(bench.seed, "distribution") if recurrent else derive_seed(bench.seed, "distribution", r)
        net = bench.isolated(source, magnitude, seed=seed)
        out.append(accuracy(net.fork("dist", r), bench.test.images, bench.test.labels))
    return np.array(out)


def ablation_study(bench: Workbench, drops=(5.0,), attack=(AttackKind.PGD, None), n_acc: int = 100,
                   n_env: int = 10, repeats: int = 20, jobs: int = 1, calibrations: dict | None = None,
                   ) -> StudyReport:
    """Per isolated source and drop: accuracy distribution and an ASR envelope.

    ``attack`` is ``(kind, (iterations, magnitudes))``. Envelopes are generated
    and evaluated on the same isolated platform.
    """
    report = StudyReport("ablation")
    baseline = bench.baseline_accuracy()
    report.summary["baseline_accuracy"] = baseline
    kind, (iters, mags) = attack
    x, y = bench.attack.images, bench.attack.labels
    calibrations = dict(calibrations or {})
    for drop in drops:
        for name, source in SOURCES.items():
            key = f"{name}@{drop}"
            cal = calibrations.get(key) or calibrate_source(bench, source, drop, baseline, repeats=repeats)
            calibrations[key] = cal
            accs = accuracy_distribution(bench, source, cal.magnitude, n_acc)
            gen, evals = model_scenario(lambda sd: bench.isolated(source, cal.magnitude, seed=sd), n_env,
                                        bench.seed, "ablation")
            grid = asr_grid(gen, evals, kind, iters, mags, x, y, n_env, bench.seed, diagonal_only=True, jobs=jobs,
                            label=key)
            env = envelope(grid)
            report.rows += grid.rows(drop=drop)
            report.summary[key] = {"calibration": cal.to_dict(), "accuracy_mean": float(accs.mean()),
                                   "accuracy_std": float(accs.std()), "accuracy_var": float(accs.var()),
                                   "envelope": _env_summary(env)}
    return report


def drift_study(bench: Workbench, times=(0.0, DAY, WEEK), attack=(AttackKind.PGD, None), n: int = 10,
                n_env: int | None = None, jobs: int = 1, drift: DriftModel | None = None) -> StudyReport:
    """Accuracy and envelopes of the full AIMC model at each elapsed time.

    Repetition ``r`` is deployment ``r``; the same deployments (and the
    generating instance) are aged through every time point.
    """
    report = StudyReport("drift")
    kind, (iters, mags) = attack
    drift = drift or bench.drift
    gen, nets = model_scenario(lambda sd: bench.platform(PlatformKind.AIMC_MODEL, seed=sd, drift=drift), n,
                               bench.seed, "drift")
    x, y = bench.attack.images, bench.attack.labels
    n_env = n_env or n
    for t in times:
        accs = []
        for r, net in enumerate([gen] + nets):
            net.set_elapsed(t)
            if r:
                accs.append(accuracy(net.fork("drift-acc", r), bench.test.images, bench.test.labels))
        grid = asr_grid(gen, nets[:n_env], kind, iters, mags, x, y, n_env, bench.seed, diagonal_only=True,
                        jobs=jobs, label=f"t={t:g}")
        env = envelope(grid)
        report.rows += grid.rows(time=t)
        report.summary[f"{t:g}"] = {"time": t, "accuracy_mean": float(np.mean(accs)),
                                    "accuracy_std": float(np.std(accs)), "accuracies": accs,
                                    "envelope": _env_summary(env)}
    return report


def combination_study(bench: Workbench, target_drop: float = 5.0, band=(4.9, 5.1), proportions: int = 6,
                      output_points: int = 12, attack=(AttackKind.PGD, None), n: int = 10, repeats: int = 10,
                      jobs: int = 1, weight_only: CalibrationResult | None = None,
                      output_only: CalibrationResult | None = None, refine: int = 4) -> StudyReport:
    """Recurrent output x weight noise combinations at a fixed accuracy drop.

    Weight magnitudes are linearly spaced from 0 to the weight-only magnitude;
    for each, an output-magnitude grid is scanned, combinations inside the
    drop band are retained and the crossing of the target is refined by linear
    interpolation between bracketing points. Each retained weight level
    contributes the retained combination closest to the target, and its
    envelope area is recorded against the weight-noise proportion.
    """
    report = StudyReport("combination")
    baseline = bench.baseline_accuracy()
    w_cal = weight_only or calibrate_source(bench, (WEIGHT, RECURRENT), target_drop, baseline, repeats=repeats)
    o_cal = output_only or calibrate_source(bench, (OUTPUT, RECURRENT), target_drop, baseline, repeats=repeats)
    seed = derive_seed(bench.seed, "combination")

    def drop_at(o, w):
        net = bench.combined(o, w, seed=seed)
        accs = [accuracy(net.fork("comb", r), bench.test.images, bench.test.labels) for r in range(repeats)]
        return drop_stats(accs, baseline)[0]

    lo_band, hi_band = band
    retained, scanned = [], []
    for k, w in enumerate(np.linspace(0.0, w_cal.magnitude, proportions)):
        outs = np.linspace(0.0, o_cal.magnitude * 1.2, output_points)
        drops = [drop_at(o, w) for o in outs]
        pts = list(zip(outs.tolist(), drops))
        for a, b in zip(pts, pts[1:]):
            if (a[1] - target_drop) * (b[1] - target_drop) <= 0 and a[1] != b[1]:
                # secant refinement of the crossing
                left, right = a, b
                for _ in range(refine):
                    o = left[0] + (target_drop - left[1]) * (right[0] - left[0]) / (right[1] - left[1])
                    d = drop_at(o, w)
                    pts.append((o, d))
                    if lo_band <= d <= hi_band:
                        break
                    if d < target_drop:
                        left = (o, d)
                    else:
                        right = (o, d)
                break
        scanned += [{"weight": float(w), "output": o, "drop": d, "proportion": k / (proportions - 1)} for o, d in pts]
        inside = [(o, d) for o, d in pts if lo_band <= d <= hi_band]
        if inside:
            o, d = min(inside, key=lambda p: abs(p[1] - target_drop))
            retained.append({"proportion": k / (proportions - 1), "weight": float(w), "output": o, "drop": d})
    if not retained:
        raise StudyError("no combination falls inside the drop band; use a denser output grid")
    # linearly spaced weight proportions, output magnitude interpolated along the retained curve
    props = np.array([r["proportion"] for r in retained])
    outs = np.array([r["output"] for r in retained])
    kind, (iters, mags) = attack
    x, y = bench.attack.images, bench.attack.labels
    areas = []
    for p in np.linspace(props.min(), props.max(), proportions):
        o = float(np.interp(p, props, outs))
        w = float(p * w_cal.magnitude)
        gen, evals = model_scenario(lambda sd: bench.combined(o, w, seed=sd), n, bench.seed, "combination")
        grid = asr_grid(gen, evals, kind, iters, mags, x, y, n, bench.seed, diagonal_only=True, jobs=jobs,
                        label=f"p={p:.3f}")
        env = envelope(grid)
        report.rows += grid.rows(proportion=float(p), weight=w, output=o)
        areas.append({"proportion": float(p), "weight": w, "output": o, "drop": drop_at(o, w),
                      **_env_summary(env)})
    rho = stats.spearmanr([a["proportion"] for a in areas], [a["area"] for a in areas]).statistic
    report.summary = {"baseline_accuracy": baseline, "weight_only": w_cal.to_dict(), "output_only": o_cal.to_dict(),
                      "scanned": scanned, "retained": retained, "areas": areas, "spearman": float(rho)}
    return report


def asr_independence_study(bench: Workbench, train: Dataset, val: Dataset, spec_attack: AttackSpec,
                           epochs: int = 10, lr: float = 0.1, min_accuracy: float = 0.5) -> StudyReport:
    """ASR of a fixed attack on FP32 checkpoints taken after every epoch."""
    from .platforms import TrainConfig, train_fp32

    report = StudyReport("asr_independence")
    x, y = bench.attack.images, bench.attack.labels
    points = []

    def on_epoch(epoch, params, record):
        net = deploy(bench.spec, {k: v.copy() for k, v in params.items()}, PlatformKind.FP32)
        acc = accuracy(net, bench.test.images, bench.test.labels)
        if acc <= min_accuracy:
            return
        adv = run_attack(net, x, y, spec_attack).adversarial
        points.append({"epoch": epoch, "accuracy": acc, "asr": asr(net, x, y, adv)})

    train_fp32(bench.spec, train, val, TrainConfig(epochs=epochs, lr=lr, seed=bench.seed), callback=on_epoch)
    report.rows = points
    if points:
        a = [p["asr"] for p in points]
        c = [p["accuracy"] for p in points]
        report.summary = {"asr_range": max(a) - min(a), "accuracy_range": max(c) - min(c)}
    return report


def hil_study(bench: Workbench, subset: Dataset, attack=(AttackKind.PGD, None), n: int = 10, B: int = 2000,
              reinfer_every: int = 50, latency: float = 0.01) -> StudyReport:
    """Hardware-in-the-loop scenarios against one chip instance.

    ``model_to_chip``: generated on a differently seeded model, evaluated on
    the chip. ``hil_chip``: generated in the loop on the chip, evaluated on it.
    ``model``: generated and evaluated on the model. ``digital``: generated and
    evaluated on the digital accelerator. Chip time keeps running across
    scenarios; evaluation on the chip follows generation immediately.
    """
    from .hil import hil_attack

    report = StudyReport("hil")
    kind, (iters, mags) = attack
    x, y = subset.images, subset.labels
    chip = bench.platform(PlatformKind.AIMC_CHIP_INSTANCE)
    model = bench.platform(PlatformKind.AIMC_MODEL, seed=derive_seed(bench.seed, "hil-model"))
    calls = [0]

    def in_loop(xx, yy, spec):
        calls[0] += 1
        return hil_attack(chip, xx, yy, spec, reinfer_every=reinfer_every, B=B, latency=latency,
                          probe_seed=derive_seed(bench.seed, "hil-probe", calls[0])).adversarial

    gen_m, evals_m = model_scenario(lambda sd: bench.platform(PlatformKind.AIMC_MODEL, seed=sd), n, bench.seed,
                                    "hil-model-scenario")
    digital = bench.platform(PlatformKind.DIGITAL)
    scenarios = [("model_to_chip", model, chip, n), ("hil_chip", in_loop, chip, n), ("model", gen_m, evals_m, n),
                 ("digital", digital, digital, 1)]
    for name, gen, evaluator, reps in scenarios:
        grid = asr_grid(gen, evaluator, kind, iters, mags, x, y, reps, bench.seed, diagonal_only=True, label=name)
        env = envelope(grid)
        report.rows += grid.rows()
        report.summary[name] = {**_env_summary(env), "asr_mean": float(np.nanmean(env.samples)),
                                "asr_rep_means": np.nanmean(env.samples, axis=0)}
    report.summary["chip_elapsed"] = chip.elapsed
    return report
