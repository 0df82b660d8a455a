"""Hardware-in-the-loop attacks against a stochastic chip instance.

The attacker reaches the chip through two channels only: ``probe_tile``
(one MVM per probe vector on a single tile) and ``chip.logits(..., cache=True)``
(a normal inference that also exposes each layer's inputs and outputs).
Weights are inferred by ridge-regularised least squares on the probe data,
gradients come from a proxy graph whose forward values are pinned to what
the chip actually produced.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .attacks import AdversarialBatch, AttackKind, AttackSpec, onepixel, project
from .errors import ArgumentError, NumericalError, StateError
from .platforms import ActivationCache, DeployedNetwork
from .rng import rng_for
from .tile import normalized_mvm

log = logging.getLogger(__name__)

RIDGE = 1e-8
MAX_CONDITION = 1e12


@dataclass
class ProbeSet:
    """Applied (DAC-quantised) inputs and observed ADC outputs of one tile."""

    X: np.ndarray
    Y: np.ndarray
    layer: str
    block: int
    time: float
    amplitude: np.ndarray | float = 1.0  # per probe


@dataclass
class InferredWeights:
    G: np.ndarray  # normalised conductance estimate, rows x cols
    residual: float
    time: float
    layer: str = ""
    block: int = 0
    column_scales: np.ndarray | None = None

    def weights(self) -> np.ndarray:
        """Estimate in weight units (requires the scales the attacker learned)."""
        if self.column_scales is None:
            return self.G.astype(np.float32)
        return (self.G * self.column_scales).astype(np.float32)


def _dac(x: np.ndarray, levels: int | None) -> np.ndarray:
    x = np.clip(x, -1.0, 1.0)
    return x if levels is None else np.round(x * levels) / levels


def probe_tile(chip: DeployedNetwork, layer: str, block: int = 0, B: int = 2000, seed: int = 0,
               inputs: np.ndarray | None = None, latency: float = 0.0, max_backoff: int = 6) -> ProbeSet:
    """``B`` separate MVMs with clipped N(0, 1) inputs (or the given ``inputs``).

    A probe whose outputs land on the ADC rails is repeated at half the
    amplitude, so every recorded output stays in the linear range.
    """
    if B < 1:
        raise ArgumentError("B must be >= 1")
    tile = chip.analog[layer].blocks[block][2]
    if inputs is None:
        base = np.clip(rng_for(seed, "probe", layer, block).standard_normal((B, tile.shape[0])), -1.0, 1.0)
    else:
        base = np.asarray(inputs, dtype=np.float64)
        if base.shape[1] != tile.shape[0]:
            raise ArgumentError(f"probe inputs {base.shape} do not match tile rows {tile.shape[0]}")
    levels = tile.config.levels
    amplitude = np.ones(len(base))
    X = _dac(base, levels)
    Y = normalized_mvm(tile, X, [chip.next_minibatch_id() for _ in range(len(X))], per_row=True)
    mvms = len(X)
    for _ in range(max_backoff):
        if levels is None:
            break
        hit = np.flatnonzero(np.any(np.abs(Y) >= tile._bound() * (1 - 1e-12), axis=1))
        if not hit.size:
            break
        amplitude[hit] /= 2
        X[hit] = _dac(base[hit] * amplitude[hit, None], levels)
        Y[hit] = normalized_mvm(tile, X[hit], [chip.next_minibatch_id() for _ in hit], per_row=True)
        mvms += hit.size
    if latency:
        chip.advance(latency * mvms)
    return ProbeSet(X, Y, layer, block, chip.elapsed, amplitude)


def infer_weights(p: ProbeSet, ridge: float = RIDGE, column_scales: np.ndarray | None = None) -> InferredWeights:
    """argmin_G sum_b ||x_b G - y_b||^2 + ridge ||G||^2 via the normal equations."""
    X = np.asarray(p.X, dtype=np.float64)
    Y = np.asarray(p.Y, dtype=np.float64)
    if X.shape[0] < X.shape[1]:
        raise ArgumentError(f"B={X.shape[0]} probes cannot determine {X.shape[1]} rows")
    gram = X.T @ X + ridge * np.eye(X.shape[1])
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError("probe matrix is rank deficient", condition=cond)
    G = np.linalg.solve(gram, X.T @ Y)
    residual = float(np.linalg.norm(X @ G - Y))
    return InferredWeights(G, residual, p.time, p.layer, p.block, column_scales)


def residual(inferred: InferredWeights, p: ProbeSet) -> float:
    return float(np.linalg.norm(p.X @ inferred.G - p.Y))


def infer_network(chip: DeployedNetwork, B: int = 2000, seed: int = 0, latency: float = 0.0,
                  know_scales: bool = True) -> dict[str, np.ndarray]:
    """Probe every tile and assemble per-layer weight estimates in weight units.

    ``know_scales`` is the attacker capability of un-mapping through the
    column scales; without it the raw normalised estimates are used.
    """
    weights = {}
    for name, layer in chip.analog.items():
        w = np.zeros(layer.shape, dtype=np.float32)
        for bi, (rs, cs, tile) in enumerate(layer.blocks):
            probes = probe_tile(chip, name, bi, B=max(B, tile.shape[0]), seed=seed, latency=latency)
            est = infer_weights(probes, column_scales=tile.column_scales if know_scales else None)
            w[rs, cs] = est.weights()
        weights[name] = w
    return weights


# ----------------------------------------------------------------------
# proxy graph


class ProxyGraph:
    """Differentiable stand-in for the chip at one candidate input.

    Layer inputs, layer outputs and the logits are pinned to the cached chip
    values; the backward pass runs through the estimated weights with STE at
    every pin.
    """

    def __init__(self, spec: nn.NetworkSpec, params: dict[str, np.ndarray], weights: dict[str, np.ndarray],
                 cache: ActivationCache):
        if cache is None or not cache.complete(spec):
            raise StateError("activation cache is incomplete; run a cached forward pass first")
        self.spec, self.cache = spec, cache
        self.tensors = nn.as_tensors({**params, **{f"{k}.weight": v for k, v in weights.items()}})

    def _linear(self, name, x, w):
        xin = T.pin(x, self.cache.inputs[name])
        return T.pin(T.matmul(xin, w), self.cache.outputs[name])

    def forward(self, x: np.ndarray):
        xt = T.Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
        logits = T.pin(nn.forward(self.spec, self.tensors, xt, self._linear), self.cache.logits)
        return xt, logits

    def loss_grad(self, x, y):
        xt, logits = self.forward(x)
        loss = T.softmax_cross_entropy(logits, y, reduction="sum")
        loss.backward()
        return float(loss.data), xt.grad, logits.data


def build_proxy(chip: DeployedNetwork, cache: ActivationCache, weights: dict[str, np.ndarray]) -> ProxyGraph:
    return ProxyGraph(chip.spec, chip.params, weights, cache)


# ----------------------------------------------------------------------
# attack driver


@dataclass
class HilLog:
    inferences: list = field(default_factory=list)  # (elapsed seconds, iteration)
    queries: int = 0


class _TimedChip:
    """Score access that advances simulated time by ``latency`` per sample queried."""

    def __init__(self, chip: DeployedNetwork, latency: float, log_: HilLog):
        self.chip, self.latency, self.log = chip, latency, log_
        self.platform = chip.platform

    def predict(self, x):
        out = self.chip.predict(x)
        self.log.queries += len(x)
        if self.latency:
            self.chip.advance(self.latency * len(x))
        return out


def hil_attack(chip: DeployedNetwork, x, y, spec: AttackSpec, reinfer_every: int = 50, B: int = 2000,
               latency: float = 0.01, probe_seed: int = 0, weights: dict[str, np.ndarray] | None = None,
               history: HilLog | None = None) -> AdversarialBatch:
    """PGD through a proxy graph, or OnePixel on raw chip logits."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    history = history if history is not None else HilLog()
    if spec.kind == AttackKind.ONEPIXEL:
        adv = onepixel(_TimedChip(chip, latency, history), x, y, int(spec.magnitude), spec.iterations,
                       spec.population_per_pixel * int(spec.magnitude), spec.seed)
        return AdversarialBatch(x, adv, y, chip.platform.value + "+HIL", spec)
    if spec.kind != AttackKind.PGD:
        raise ArgumentError("hardware-in-the-loop attacks support PGD and ONEPIXEL")
    if reinfer_every < 1:
        raise ArgumentError("reinfer_every must be >= 1")
    eps = np.float32(spec.magnitude)
    step = np.float32(2.5 * spec.magnitude / max(spec.iterations, 1) if spec.step_size is None else spec.step_size)
    adv = x.copy()
    if spec.random_start:
        noise = rng_for(spec.seed, "pgd-start").uniform(-spec.magnitude, spec.magnitude, x.shape)
        adv = project(x + noise.astype(np.float32), x, eps)
    fixed = weights is not None
    for it in range(spec.iterations):
        if not fixed and it % reinfer_every == 0:
            weights = infer_network(chip, B=B, seed=derive_probe_seed(probe_seed, it))
            history.inferences.append((chip.elapsed, it))
        chip.logits(adv, cache=True)
        history.queries += len(adv)
        if latency:
            chip.advance(latency * len(adv))
        proxy = build_proxy(chip, chip.last_cache, weights)
        _, grad, _ = proxy.loss_grad(adv, y)
        adv = project(adv + step * np.sign(grad).astype(np.float32), x, eps)
    return AdversarialBatch(x, adv, y, chip.platform.value + "+HIL", spec)


def derive_probe_seed(seed: int, iteration: int) -> int:
    return int(seed) * 1_000_003 + int(iteration)
