"""Stochastic crossbar tile model.

Weights live on a tile as one signed effective conductance per cell, in
``[-g_max, g_max]`` microsiemens. The MVM pipeline is

    DAC (8-bit) -> drifted conductances (+ read noise) -> product-sum
    -> column output noise -> ADC (8-bit) -> column/input rescale
    -> global drift compensation (optional, per tile)

and every stochastic draw comes from a counter-keyed generator
``(seed, tile_id, source, minibatch_id)``, so results do not depend on the
order in which MVMs are executed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, StateError
from .rng import rng_for

WEIGHT, OUTPUT = "weight", "output"
RECURRENT, NON_RECURRENT = "recurrent", "non-recurrent"
SOURCES = [(OUTPUT, RECURRENT), (WEIGHT, RECURRENT), (WEIGHT, NON_RECURRENT), (OUTPUT, NON_RECURRENT)]


@dataclass(frozen=True)
class TileConfig:
    rows: int = 256
    cols: int = 256
    g_max: float = 160.0  # uS
    adc_unit: float = 0.115  # uS per ADC count
    converter_bits: int | None = 8  # None: ideal converters

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ArgumentError("tile extents must be positive")
        if self.g_max <= 0 or self.adc_unit <= 0:
            raise ArgumentError("g_max and adc_unit must be positive")

    @property
    def levels(self) -> int | None:
        """Largest signed converter code (127 for 8 bits)."""
        return None if self.converter_bits is None else 2 ** (self.converter_bits - 1) - 1


def _default_read_lut(g_max=160.0, adc_unit=0.115, points=33):
    # std = 0.03 * sqrt(G / g_max) * g_max, tabulated in ADC units
    g_adc = np.linspace(0.0, g_max / adc_unit, points)
    std_adc = 0.03 * np.sqrt(g_adc / g_adc[-1]) * g_adc[-1]
    return tuple(g_adc.tolist()), tuple(std_adc.tolist())


_READ_G, _READ_STD = _default_read_lut()


def polyval(coeffs, g_hat):
    """c0 + c1*g + c2*g^2 + c3*g^3 (coefficients in increasing order)."""
    return np.polynomial.polynomial.polyval(g_hat, np.asarray(coeffs, dtype=np.float64))


@dataclass(frozen=True)
class NoiseModel:
    """Stochastic sources of one tile.

    Weight noise: non-recurrent programming error (polynomial in |g|/g_max)
    and recurrent read noise (lookup table in ADC units). Output noise: an
    additive per-column Gaussian in normalised output units, recurrent
    (redrawn per mini-batch) or non-recurrent (drawn once at deployment).
    """

    prog_enabled: bool = True
    prog_mean_poly: tuple = (0.0, 0.0, 0.0, 0.0)
    prog_std_poly: tuple = (0.0, 0.08, 0.0, 0.0)
    read_enabled: bool = True
    read_lut_g: tuple = _READ_G
    read_lut_std: tuple = _READ_STD
    output_enabled: bool = True
    output_std: float = 0.04
    output_recurrent: bool = True

    def __post_init__(self):
        g = np.asarray(self.read_lut_g)
        if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
            raise ArgumentError("read_lut_g must be strictly increasing with >= 2 breakpoints")
        if len(self.read_lut_std) != g.size or min(self.read_lut_std) < 0:
            raise ArgumentError("read_lut_std must be non-negative and match read_lut_g")
        if self.output_std < 0:
            raise ArgumentError("output_std must be non-negative")
        for name in ("prog_mean_poly", "prog_std_poly"):
            if len(getattr(self, name)) != 4:
                raise ArgumentError(f"{name} needs 4 coefficients")

    def prog_std(self, g_hat):
        return np.maximum(polyval(self.prog_std_poly, g_hat), 0.0)

    def read_std_adc(self, g_adc):
        return np.interp(g_adc, self.read_lut_g, self.read_lut_std)

    def active_sources(self) -> dict[tuple[str, str], bool]:
        return {
            (WEIGHT, NON_RECURRENT): self.prog_enabled and any(c != 0 for c in self.prog_std_poly),
            (WEIGHT, RECURRENT): self.read_enabled and max(self.read_lut_std) > 0,
            (OUTPUT, RECURRENT): self.output_enabled and self.output_recurrent and self.output_std > 0,
            (OUTPUT, NON_RECURRENT): self.output_enabled and not self.output_recurrent and self.output_std > 0,
        }

    def covers_domain(self, g_max: float, adc_unit: float) -> bool:
        return self.read_lut_g[0] <= 0 and self.read_lut_g[-1] >= g_max / adc_unit * (1 - 1e-9)

    def quiet(self) -> "NoiseModel":
        """All stochastic sources off."""
        return replace(self, prog_enabled=False, read_enabled=False, output_enabled=False)


def isolate_source(model: NoiseModel, source: tuple[str, str], magnitude: float,
                   tile: TileConfig = TileConfig()) -> NoiseModel:
    """Keep exactly one stochastic source, at ``magnitude``.

    Weight magnitudes are Gaussian standard deviations as a fraction of
    ``g_max`` (input-dependent effect); output magnitudes are the column-noise
    standard deviation in normalised output units (input-independent).
    """
    if magnitude < 0:
        raise ArgumentError("magnitude must be non-negative")
    location, recurrence = source
    base = model.quiet()
    if (location, recurrence) == (WEIGHT, NON_RECURRENT):
        return replace(base, prog_enabled=True, prog_mean_poly=(0.0,) * 4, prog_std_poly=(magnitude, 0.0, 0.0, 0.0))
    if (location, recurrence) == (WEIGHT, RECURRENT):
        std_adc = magnitude * tile.g_max / tile.adc_unit
        return replace(base, read_enabled=True, read_lut_std=(std_adc,) * len(base.read_lut_g))
    if location == OUTPUT and recurrence in (RECURRENT, NON_RECURRENT):
        return replace(base, output_enabled=True, output_std=float(magnitude),
                       output_recurrent=recurrence == RECURRENT)
    raise ArgumentError(f"unknown noise source {source!r}")


def combine_sources(model: NoiseModel, output_magnitude: float, weight_magnitude: float,
                    tile: TileConfig = TileConfig()) -> NoiseModel:
    """Recurrent output noise plus recurrent weight noise at the given magnitudes."""
    out = isolate_source(model, (OUTPUT, RECURRENT), output_magnitude, tile)
    weight = isolate_source(model, (WEIGHT, RECURRENT), weight_magnitude, tile)
    return replace(out, read_enabled=True, read_lut_std=weight.read_lut_std)


@dataclass(frozen=True)
class DriftModel:
    """Power-law drift G(t) = G(t0) (t / t0)^-nu with per-device nu."""

    enabled: bool = True
    nu_lut_g: tuple = (0.0, 1.0)  # normalised conductance breakpoints
    nu_mean_lut: tuple = (0.06, 0.06)
    nu_std_lut: tuple = (0.02, 0.02)
    t0: float = 25.0
    compensate: bool = True  # global digital rescale of each tile's output after the ADC

    def __post_init__(self):
        if self.t0 <= 0:
            raise ArgumentError("t0 must be positive")

    def nu_stats(self, g_hat):
        return np.interp(g_hat, self.nu_lut_g, self.nu_mean_lut), np.interp(g_hat, self.nu_lut_g, self.nu_std_lut)


# ----------------------------------------------------------------------
# JSON interchange for calibrated models


def models_to_json(noise: NoiseModel, drift: DriftModel | None = None) -> str:
    doc = {"noise": asdict(noise)}
    if drift is not None:
        doc["drift"] = asdict(drift)
    return json.dumps(doc, indent=2, sort_keys=True)


def models_from_json(text: str) -> tuple[NoiseModel, DriftModel | None]:
    doc = json.loads(text)
    noise = NoiseModel(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc["noise"].items()})
    drift = None
    if "drift" in doc:
        drift = DriftModel(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc["drift"].items()})
    return noise, drift


def save_models(path, noise: NoiseModel, drift: DriftModel | None = None) -> None:
    Path(path).write_text(models_to_json(noise, drift))


def load_models(path):
    return models_from_json(Path(path).read_text())


# ----------------------------------------------------------------------
# tile state


@dataclass
class TileState:
    config: TileConfig
    noise: NoiseModel
    drift: DriftModel
    g_target: np.ndarray
    column_scales: np.ndarray
    seed: int = 0
    tile_id: tuple = (0,)
    g_programmed: np.ndarray | None = None
    nu: np.ndarray | None = None
    output_offset: np.ndarray | None = None
    time: float | None = None  # seconds since programming; None means t0
    in_scale: float = 1.0
    out_bound: float | None = None  # ADC full scale in normalised output units
    draw_counts: dict = field(default_factory=lambda: {"program": 0, "drift": 0, "read": 0, "output": 0})

    @property
    def programmed(self) -> bool:
        return self.g_programmed is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.g_target.shape

    @property
    def adc_step(self) -> float | None:
        """ADC step in normalised output units."""
        levels = self.config.levels
        if levels is None:
            return None
        return self._bound() / levels

    def _bound(self) -> float:
        return float(self.out_bound) if self.out_bound is not None else float(self.shape[0])

    @property
    def rescale(self) -> np.ndarray:
        """Factor turning normalised column outputs back into weight units."""
        return self.in_scale * self.column_scales

    def effective_weights(self, t: float | None = None) -> np.ndarray:
        """Drifted programmed weights in weight units (no read noise)."""
        t = self.time_or_t0() if t is None else t
        g, _ = drifted_conductance(self, t)
        return (g / self.config.g_max * self.column_scales * drift_compensation(self, t)).astype(np.float32)

    def time_or_t0(self) -> float:
        return self.drift.t0 if self.time is None else max(float(self.time), self.drift.t0)


def map_weights(w: np.ndarray, g_max: float = 160.0) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise scaling onto the signed conductance range."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ArgumentError("weights must be finite")
    scales = np.abs(w).max(axis=0) if w.size else np.ones(w.shape[1])
    scales = np.where(scales > 0, scales, 1.0)
    return w / scales * g_max, scales


def unmap_weights(g: np.ndarray, scales: np.ndarray, g_max: float = 160.0) -> np.ndarray:
    return np.asarray(g, dtype=np.float64) / g_max * scales


def make_tile(w, config: TileConfig | None = None, noise: NoiseModel | None = None,
              drift: DriftModel | None = None, seed: int = 0, tile_id=(0,)) -> TileState:
    w = np.asarray(w)
    config = config or TileConfig()
    if w.shape[0] > config.rows or w.shape[1] > config.cols:
        raise ArgumentError(f"block {w.shape} exceeds tile {config.rows}x{config.cols}")
    g_target, scales = map_weights(w, config.g_max)
    return TileState(config, noise or NoiseModel(), drift or DriftModel(), g_target, scales,
                     seed=seed, tile_id=tuple(tile_id) if isinstance(tile_id, (tuple, list)) else (tile_id,))


def program(tile: TileState) -> TileState:
    """Sample programming error and drift exponents once; returns a new state."""
    cfg, noise = tile.config, tile.noise
    g_hat = np.abs(tile.g_target) / cfg.g_max
    sign = np.sign(tile.g_target)
    counts = dict(tile.draw_counts)
    g = tile.g_target.copy()
    if noise.prog_enabled:
        rng = rng_for(tile.seed, *tile.tile_id, "program")
        mean = polyval(noise.prog_mean_poly, g_hat) * cfg.g_max
        std = noise.prog_std(g_hat) * cfg.g_max
        # error is defined on |g|; the sign of the cell follows the target
        g = g + np.where(sign < 0, -1.0, 1.0) * (mean + rng.standard_normal(g.shape) * std)
        counts["program"] += g.size
    g = np.clip(g, -cfg.g_max, cfg.g_max)
    if tile.drift.enabled:
        rng = rng_for(tile.seed, *tile.tile_id, "drift")
        nu_mean, nu_std = tile.drift.nu_stats(np.abs(g) / cfg.g_max)
        nu = np.maximum(nu_mean + rng.standard_normal(g.shape) * nu_std, 0.0)
        counts["drift"] += g.size
    else:
        nu = np.zeros_like(g)
    offset = np.zeros(tile.shape[1])
    if noise.output_enabled and not noise.output_recurrent:
        rng = rng_for(tile.seed, *tile.tile_id, "output-offset")
        offset = rng.standard_normal(tile.shape[1]) * noise.output_std
        counts["output"] += tile.shape[1]
    return replace(tile, g_programmed=g, nu=nu, output_offset=offset, draw_counts=counts)


def drifted_conductance(tile: TileState, t: float) -> tuple[np.ndarray, np.ndarray]:
    """(G(t), G(t) / G_programmed) for every device; ``t`` in seconds since programming."""
    if not tile.programmed:
        raise StateError("tile has not been programmed")
    t0 = tile.drift.t0
    if t < t0:
        raise ArgumentError(f"t={t} precedes the reference time t0={t0}")
    ratio = (t / t0) ** (-tile.nu)
    return tile.g_programmed * ratio, ratio


def drift_compensation(tile: TileState, t: float | None = None) -> float:
    """Global factor sum|G(t0)| / sum|G(t)| of a noise-free reference read; 1 when disabled."""
    if not tile.drift.compensate or not tile.drift.enabled:
        return 1.0
    g, _ = drifted_conductance(tile, tile.time_or_t0() if t is None else t)
    now = float(np.abs(g).sum())
    return float(np.abs(tile.g_programmed).sum()) / now if now > 0 else 1.0


def _quantize_codes(v: np.ndarray, step: float, levels: int) -> np.ndarray:
    return np.clip(np.round(v / step), -levels, levels) * step


def normalized_mvm(tile: TileState, x_n: np.ndarray, minibatch_id, per_row: bool = False) -> np.ndarray:
    """Core pipeline on DAC-normalised inputs; returns normalised ADC outputs.

    ``minibatch_id`` keys the recurrent draws. With ``per_row=True`` it must be
    a sequence with one id per input row, i.e. each row is a separate MVM.
    """
    if not tile.programmed:
        raise StateError("tile has not been programmed")
    cfg, noise = tile.config, tile.noise
    x_n = np.clip(np.asarray(x_n, dtype=np.float64), -1.0, 1.0)
    levels = cfg.levels
    if levels is not None:
        x_n = np.round(x_n * levels) / levels
    g, ratio = drifted_conductance(tile, tile.time_or_t0())
    if per_row:
        ids = list(minibatch_id)
        if len(ids) != x_n.shape[0]:
            raise ArgumentError("per_row needs one minibatch id per input row")
        y = np.stack([_product(tile, g, ratio, x_n[i : i + 1], ids[i])[0] for i in range(len(ids))])
    else:
        y = _product(tile, g, ratio, x_n, minibatch_id)
    if levels is not None:
        step = tile._bound() / levels
        y = _quantize_codes(y, step, levels)
    return y


def _product(tile: TileState, g, ratio, x_n, minibatch_id) -> np.ndarray:
    cfg, noise = tile.config, tile.noise
    if noise.read_enabled:
        rng = rng_for(tile.seed, *tile.tile_id, "read", minibatch_id)
        g_adc = np.abs(tile.g_programmed) / cfg.adc_unit
        std = noise.read_std_adc(g_adc) * cfg.adc_unit * ratio
        if np.any(std > 0):
            g = g + rng.standard_normal(g.shape) * std
            tile.draw_counts["read"] += g.size
    y = x_n @ (g / cfg.g_max)
    if noise.output_enabled and noise.output_std > 0:
        if noise.output_recurrent:
            rng = rng_for(tile.seed, *tile.tile_id, "output", minibatch_id)
            y = y + rng.standard_normal(y.shape[1]) * noise.output_std
            tile.draw_counts["output"] += y.shape[1]
        else:
            y = y + tile.output_offset
    return y


def analog_mvm(tile: TileState, x: np.ndarray, minibatch_id=0) -> np.ndarray:
    """``x @ W`` through the tile for inputs in weight units; returns float32."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != tile.shape[0]:
        raise ArgumentError(f"input {x.shape} does not match tile rows {tile.shape[0]}")
    y = normalized_mvm(tile, x / tile.in_scale, minibatch_id)
    return (y * tile.in_scale * tile.column_scales * drift_compensation(tile)).astype(np.float32)


def calibrate_ranges(tile: TileState, x_cal: np.ndarray) -> TileState:
    """Input scale from max |x|; ADC full scale from the noise-free output range."""
    x_cal = np.asarray(x_cal, dtype=np.float64)
    in_scale = float(np.abs(x_cal).max()) if x_cal.size else 1.0
    in_scale = in_scale if in_scale > 0 else 1.0
    x_n = np.clip(x_cal / in_scale, -1, 1)
    if tile.config.levels is not None:
        x_n = np.round(x_n * tile.config.levels) / tile.config.levels  # range seen after the DAC
    y = x_n @ (tile.g_target / tile.config.g_max)
    bound = float(np.abs(y).max()) if y.size else 1.0
    return replace(tile, in_scale=in_scale, out_bound=bound if bound > 0 else 1.0)
