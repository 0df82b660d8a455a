"""Training, quantisation and deployment onto the five target platforms.

Every deployed network exposes the same surface: ``predict`` for logits,
``loss_grad`` for input gradients (straight-through at quantisers, ideal
backward through analog tiles) and an optional activation cache that the
hardware-in-the-loop attacker reads.
"""

from __future__ import annotations

import copy
import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .data import Dataset
from .errors import ArgumentError, DeploymentError, DimensionError, TrainingError
from .rng import derive_seed, rng_for
from .serialization import content_hash
from .tile import (DriftModel, NoiseModel, TileConfig, TileState, analog_mvm, calibrate_ranges, make_tile,
                   models_to_json, program)

log = logging.getLogger(__name__)


class PlatformKind(str, enum.Enum):
    FP32 = "FP32"
    HWA_FP32 = "HWA_FP32"
    DIGITAL = "DIGITAL"
    AIMC_MODEL = "AIMC_MODEL"
    AIMC_CHIP_INSTANCE = "AIMC_CHIP_INSTANCE"

    @property
    def stochastic(self) -> bool:
        return self in (PlatformKind.AIMC_MODEL, PlatformKind.AIMC_CHIP_INSTANCE)

    @property
    def analog(self) -> bool:
        return self.stochastic


# ----------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.7
    batch_size: int = 128
    seed: int = 0


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    channel_scales: dict[str, np.ndarray] = field(default_factory=dict)


def evaluate_fp(spec: nn.NetworkSpec, params: dict[str, np.ndarray], ds: Dataset,
                batch_size: int = 500) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) of exact float inference."""
    tensors = nn.as_tensors(params)
    correct, loss = 0, 0.0
    for start in range(0, len(ds), batch_size):
        labels = ds.labels[start : start + batch_size]
        logits = nn.forward(spec, tensors, T.Tensor(ds.images[start : start + batch_size]))
        correct += int((logits.data.argmax(axis=1) == labels).sum())
        loss += float(T.softmax_cross_entropy(logits, labels, reduction="sum").data)
    n = max(len(ds), 1)
    return correct / n, loss / n


def accuracy_fp(spec: nn.NetworkSpec, params: dict[str, np.ndarray], ds: Dataset, batch_size: int = 500) -> float:
    return evaluate_fp(spec, params, ds, batch_size)[0]


def _sgd(spec, params, train: Dataset, val: Dataset, hyper: TrainConfig, weight_noise_std: float,
         callback=None) -> TrainResult:
    params = {k: v.astype(np.float32).copy() for k, v in params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    weight_keys = [k for k in params if k.endswith(".weight")]
    n = len(train)
    best = (-1.0, -1, None)
    history = []
    scales = {}
    step = 0
    for epoch in range(hyper.epochs):
        lr = 0.5 * hyper.lr * (1 + math.cos(math.pi * epoch / hyper.epochs))
        order = rng_for(hyper.seed, "epoch", epoch).permutation(n)
        losses = []
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            leaves = nn.as_tensors(params, requires_grad=True)
            used = dict(leaves)
            if weight_noise_std > 0:
                rng = rng_for(hyper.seed, "hwa-noise", step)
                for k in weight_keys:
                    factor = 1.0 + rng.standard_normal(params[k].shape).astype(np.float32) * weight_noise_std
                    used[k] = T.ste(leaves[k], lambda a, f=factor: a * f, name="weight_noise")
            loss = T.softmax_cross_entropy(nn.forward(spec, used, T.Tensor(train.images[idx])), train.labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"loss diverged at epoch {epoch}, step {step}")
            loss.backward()
            for k, leaf in leaves.items():
                velocity[k] = hyper.momentum * velocity[k] + leaf.grad
                params[k] = (params[k] - lr * velocity[k]).astype(np.float32)
            # column-wise conductance range after every mini-batch
            scales = {k: np.abs(params[k]).max(axis=0) for k in weight_keys}
            losses.append(float(loss.data))
            step += 1
        val_acc, val_loss = evaluate_fp(spec, params, val) if len(val) else (float("nan"), float("nan"))
        record = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "lr": lr, "val_accuracy": val_acc,
                  "val_loss": val_loss}
        history.append(record)
        log.info("epoch %d loss %.4f val %.4f", epoch + 1, record["loss"], val_acc)
        if callback is not None:
            callback(epoch + 1, params, record)
        if len(val) == 0 or val_acc > best[0]:
            best = (val_acc, epoch + 1, {k: v.copy() for k, v in params.items()})
    return TrainResult(best[2], history, best[1], scales)


def train_fp32(spec: nn.NetworkSpec, train: Dataset, val: Dataset, hyper: TrainConfig = TrainConfig(),
               init: dict[str, np.ndarray] | None = None, callback=None) -> TrainResult:
    """SGD with momentum and cosine annealing; returns the best-validation weights."""
    params = init if init is not None else nn.init_params(spec, derive_seed(hyper.seed, "init"))
    return _sgd(spec, params, train, val, hyper, 0.0, callback)


def hwa_retrain(spec: nn.NetworkSpec, params: dict[str, np.ndarray], train: Dataset, val: Dataset,
                hyper: TrainConfig = TrainConfig(epochs=10, lr=0.05), noise_std: float = 0.08,
                callback=None) -> TrainResult:
    """Fine-tune under multiplicative weight noise w * (1 + N(0, noise_std)).

    The noise is redrawn for every mini-batch and the weight gradient is passed
    straight through the perturbation.
    """
    if noise_std < 0:
        raise ArgumentError("noise_std must be non-negative")
    return _sgd(spec, params, train, val, hyper, noise_std, callback)


# ----------------------------------------------------------------------
# post-training quantisation


@dataclass
class QuantizedParams:
    params: dict[str, np.ndarray]  # weights already on the 4-bit grid, biases float
    weight_scales: dict[str, np.ndarray]
    act_steps: dict[str, float]
    act_unsigned: dict[str, bool]
    weight_bits: int = 4
    act_bits: int = 8


def quantize_weights(w: np.ndarray, bits: int = 4, fractions: int = 71) -> tuple[np.ndarray, np.ndarray]:
    """Channel-wise symmetric quantisation on the narrow grid [-(2^(b-1)-1), 2^(b-1)-1].

    Each column's range is the fraction of max|w| (searched over [0.3, 1]) with least squared error.
    """
    levels = 2 ** (bits - 1) - 1
    amax = np.abs(w).max(axis=0)
    cand = np.linspace(1.0, 0.3, fractions)[:, None] * np.where(amax > 0, amax / levels, 1.0)
    err = np.stack([((np.clip(np.round(w / c), -levels, levels) * c - w) ** 2).sum(axis=0) for c in cand])
    scale = cand[err.argmin(axis=0), np.arange(w.shape[1])].astype(np.float32)
    q = np.clip(np.round(w / scale), -levels, levels) * scale
    return q.astype(np.float32), scale


def quantize_activation(x: np.ndarray, step: float, unsigned: bool, bits: int = 8) -> np.ndarray:
    hi = 2**bits - 1 if unsigned else 2 ** (bits - 1) - 1
    lo = 0 if unsigned else -hi
    return (np.clip(np.round(x / step), lo, hi) * step).astype(np.float32)


def _layer_inputs(spec, params, images) -> dict[str, np.ndarray]:
    seen = {}

    def capture(name, x, w):
        seen[name] = x.data
        return T.matmul(x, w)

    nn.forward(spec, nn.as_tensors(params), T.Tensor(images), capture)
    return seen


def ptq(spec: nn.NetworkSpec, params: dict[str, np.ndarray], calibration: np.ndarray,
        weight_bits: int = 4, act_bits: int = 8) -> QuantizedParams:
    """4-bit channel-wise MSE-clipped weights and 8-bit per-tensor activations."""
    if calibration is None or len(calibration) == 0:
        raise ArgumentError("PTQ needs a non-empty calibration set")
    qparams = dict(params)
    wscales = {}
    for layer in spec.linear_layers:
        key = f"{layer.name}.weight"
        qparams[key], wscales[layer.name] = quantize_weights(params[key], weight_bits)
    steps, unsigned = {}, {}
    for name, acts in _layer_inputs(spec, params, calibration).items():
        unsigned[name] = bool(acts.min() >= 0)
        hi = 2**act_bits - 1 if unsigned[name] else 2 ** (act_bits - 1) - 1
        amax = float(np.abs(acts).max())
        steps[name] = amax / hi if amax > 0 else 1.0
    return QuantizedParams(qparams, wscales, steps, unsigned, weight_bits, act_bits)


# ----------------------------------------------------------------------
# analog layers


@dataclass
class AnalogLayer:
    """A weight matrix split over one or more tiles (row and column blocks)."""

    name: str
    shape: tuple[int, int]
    blocks: list[tuple[slice, slice, TileState]]

    def forward(self, x: np.ndarray, minibatch_id) -> np.ndarray:
        y = np.zeros((x.shape[0], self.shape[1]), dtype=np.float32)
        for rs, cs, tile in self.blocks:
            y[:, cs] += analog_mvm(tile, x[:, rs], minibatch_id)
        return y

    def effective_weights(self) -> np.ndarray:
        w = np.zeros(self.shape, dtype=np.float32)
        for rs, cs, tile in self.blocks:
            w[rs, cs] = tile.effective_weights()
        return w

    def target_weights(self) -> np.ndarray:
        w = np.zeros(self.shape, dtype=np.float32)
        for rs, cs, tile in self.blocks:
            w[rs, cs] = tile.g_target / tile.config.g_max * tile.column_scales
        return w

    @property
    def tiles(self) -> list[TileState]:
        return [b[2] for b in self.blocks]


def tile_blocks(shape: tuple[int, int], config: TileConfig) -> list[tuple[slice, slice]]:
    rows, cols = shape
    return [
        (slice(r, min(r + config.rows, rows)), slice(c, min(c + config.cols, cols)))
        for r in range(0, rows, config.rows)
        for c in range(0, cols, config.cols)
    ]


# ----------------------------------------------------------------------
# deployed network


@dataclass
class ActivationCache:
    inputs: dict[str, np.ndarray] = field(default_factory=dict)
    outputs: dict[str, np.ndarray] = field(default_factory=dict)
    logits: np.ndarray | None = None

    def complete(self, spec: nn.NetworkSpec) -> bool:
        names = [layer.name for layer in spec.linear_layers]
        return self.logits is not None and all(n in self.inputs and n in self.outputs for n in names)


class DeployedNetwork:
    """A network bound to one platform.

    ``minibatch_id`` keys every recurrent noise draw. Calls that leave it out
    take the next value of an internal counter, so a stochastic platform gives
    a fresh draw per query while explicit ids reproduce a draw exactly.
    """

    def __init__(self, spec: nn.NetworkSpec, platform: PlatformKind, params: dict[str, np.ndarray],
                 seed: int = 0, analog: dict[str, AnalogLayer] | None = None,
                 quant: QuantizedParams | None = None, noise: NoiseModel | None = None,
                 drift: DriftModel | None = None, tile_config: TileConfig | None = None):
        self.spec = spec
        self.platform = PlatformKind(platform)
        self.params = params
        self.seed = seed
        self.analog = analog or {}
        self.quant = quant
        self.noise = noise
        self.drift = drift
        self.tile_config = tile_config
        self.cache_enabled = False
        self.last_cache: ActivationCache | None = None
        self.elapsed = 0.0
        self._counter = 0
        self._tensors = nn.as_tensors(params)

    @property
    def stochastic(self) -> bool:
        return self.platform.stochastic

    # time ---------------------------------------------------------------
    def set_elapsed(self, seconds: float) -> None:
        """Seconds elapsed since the drift reference time t0."""
        if seconds < 0:
            raise ArgumentError("elapsed time must be non-negative")
        self.elapsed = float(seconds)
        for layer in self.analog.values():
            for _, _, tile in layer.blocks:
                tile.time = tile.drift.t0 + self.elapsed

    def advance(self, seconds: float) -> None:
        self.set_elapsed(self.elapsed + seconds)

    def next_minibatch_id(self) -> int:
        self._counter += 1
        return self._stream + self._counter

    _stream = 1 << 40

    def fork(self, *label) -> "DeployedNetwork":
        """Same deployment, private id stream keyed by ``label``.

        Lets independent work items draw recurrent noise deterministically
        whatever order they run in. Tiles are shared, so time stays common.
        """
        twin = copy.copy(self)
        twin._stream = (1 << 62) + (derive_seed(self.seed, "stream", *label) >> 8 << 20)
        twin._counter = 0
        twin.last_cache = None
        return twin

    # forward ------------------------------------------------------------
    def _linear(self, minibatch_id, cache: ActivationCache | None):
        kind = self.platform

        def fp(name, x, w):
            out = T.matmul(x, w)
            if cache is not None:
                cache.inputs[name], cache.outputs[name] = x.data, out.data
            return out

        def digital(name, x, w):
            q = self.quant
            xq = T.ste(x, lambda a: quantize_activation(a, q.act_steps[name], q.act_unsigned[name], q.act_bits),
                       name="act_quant")
            out = T.matmul(xq, w)
            if cache is not None:
                cache.inputs[name], cache.outputs[name] = xq.data, out.data
            return out

        def analog(name, x, w):
            layer = self.analog[name]
            w_eff = layer.effective_weights()

            def fwd(a):
                return layer.forward(a, minibatch_id), None

            def bwd(ctx, g, a):
                return (g @ w_eff.T,)

            out = T.custom("analog_linear", (x,), fwd, bwd)
            if cache is not None:
                cache.inputs[name], cache.outputs[name] = x.data, out.data
            return out

        if kind.analog:
            return analog
        if kind == PlatformKind.DIGITAL:
            return digital
        return fp

    def _forward(self, x, minibatch_id=None, cache: bool = False, requires_grad=False):
        if minibatch_id is None:
            minibatch_id = self.next_minibatch_id()
        store = ActivationCache() if (cache or self.cache_enabled) else None
        xt = T.Tensor(x, requires_grad=requires_grad)
        logits = nn.forward(self.spec, self._tensors, xt, self._linear(minibatch_id, store))
        if store is not None:
            store.logits = logits.data
            self.last_cache = store
        return xt, logits

    def logits(self, x, minibatch_id=None, cache: bool = False) -> np.ndarray:
        """One mini-batch through the platform."""
        return self._forward(np.asarray(x, dtype=np.float32), minibatch_id, cache)[1].data

    def predict(self, x, minibatch_id=None, batch_size: int = 128) -> np.ndarray:
        """Logits for any number of samples, consumed in mini-batches.

        Mini-batch ``k`` uses id ``minibatch_id + k`` when an id is given.
        """
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4:
            raise DimensionError(f"expected N x C x H x W input, got {x.shape}")
        out = []
        for k, start in enumerate(range(0, x.shape[0], batch_size)):
            mb = None if minibatch_id is None else minibatch_id + k
            out.append(self.logits(x[start : start + batch_size], mb))
        if not out:
            return np.zeros((0, self.spec.num_classes), dtype=np.float32)
        return np.concatenate(out)

    def classify(self, x, minibatch_id=None, batch_size: int = 128) -> np.ndarray:
        return self.predict(x, minibatch_id, batch_size).argmax(axis=1)

    def loss_grad(self, x, y, minibatch_id=None):
        """(summed cross-entropy, d loss / d x, logits) for one mini-batch."""
        xt, logits = self._forward(np.asarray(x, dtype=np.float32), minibatch_id, requires_grad=True)
        loss = T.softmax_cross_entropy(logits, y, reduction="sum")
        loss.backward()
        return float(loss.data), xt.grad, logits.data

    __call__ = logits

    # bookkeeping --------------------------------------------------------
    def programmed_conductances(self) -> dict[str, list[np.ndarray]]:
        return {name: [t.g_programmed for t in layer.tiles] for name, layer in self.analog.items()}

    def tile_count(self, name: str | None = None) -> int:
        layers = [self.analog[name]] if name else self.analog.values()
        return sum(len(layer.blocks) for layer in layers)

    def manifest(self) -> dict:
        doc = {
            "platform": self.platform.value,
            "seed": int(self.seed),
            "weights_hash": content_hash(self.params),
            "elapsed": self.elapsed,
        }
        if self.analog:
            doc["tiles"] = {
                name: [{"rows": [rs.start, rs.stop], "cols": [cs.start, cs.stop], "tile_id": list(t.tile_id),
                        "in_scale": t.in_scale, "out_bound": t.out_bound} for rs, cs, t in layer.blocks]
                for name, layer in self.analog.items()
            }
            doc["noise_model"] = models_to_json(self.noise, self.drift)
            doc["tile_config"] = vars(self.tile_config)
        return doc


def deploy(spec: nn.NetworkSpec, params: dict[str, np.ndarray], platform, seed: int = 0,
           calibration: np.ndarray | None = None, tile_config: TileConfig | None = None,
           noise: NoiseModel | None = None, drift: DriftModel | None = None,
           quant: QuantizedParams | None = None) -> DeployedNetwork:
    """Bind weights to a platform.

    Analog platforms map each conv (lowered) and dense weight matrix onto
    tiles, program them once (programming noise, drift exponents) and
    calibrate per-tile input and ADC ranges on ``calibration`` images.
    """
    platform = PlatformKind(platform)
    for layer in spec.linear_layers:
        if f"{layer.name}.weight" not in params:
            raise DeploymentError(f"missing weights for layer {layer.name}")
    if platform == PlatformKind.DIGITAL:
        if quant is None:
            if calibration is None:
                raise DeploymentError("DIGITAL deployment needs PTQ parameters or a calibration set")
            quant = ptq(spec, params, calibration)
        return DeployedNetwork(spec, platform, quant.params, seed, quant=quant)
    if not platform.analog:
        return DeployedNetwork(spec, platform, params, seed)

    for layer in spec.layers:
        if layer.kind not in ("conv", "dense", "relu", "maxpool", "flatten"):
            raise DeploymentError(f"layer kind {layer.kind!r} cannot be deployed on analog tiles")
    tile_config = tile_config or TileConfig()
    noise = noise or NoiseModel()
    drift = drift or DriftModel()
    inputs = _layer_inputs(spec, params, calibration) if calibration is not None else {}
    analog = {}
    for li, layer in enumerate(spec.linear_layers):
        w = params[f"{layer.name}.weight"]
        blocks = []
        for bi, (rs, cs) in enumerate(tile_blocks(w.shape, tile_config)):
            tile = make_tile(w[rs, cs], tile_config, noise, drift, seed=seed, tile_id=(li, bi))
            tile = program(tile)
            if layer.name in inputs:
                tile = calibrate_ranges(tile, inputs[layer.name][:, rs])
            blocks.append((rs, cs, tile))
        analog[layer.name] = AnalogLayer(layer.name, w.shape, blocks)
    bias_only = {k: v for k, v in params.items()}
    return DeployedNetwork(spec, platform, bias_only, seed, analog=analog, noise=noise, drift=drift,
                           tile_config=tile_config)


def with_noise(net: DeployedNetwork, noise: NoiseModel, seed: int | None = None,
               calibration: np.ndarray | None = None) -> DeployedNetwork:
    """Redeploy an analog network's weights under a different noise model."""
    if not net.platform.analog:
        raise DeploymentError("only analog deployments carry a noise model")
    weights = {f"{name}.weight": layer.target_weights() for name, layer in net.analog.items()}
    params = {**net.params, **weights}
    new = deploy(net.spec, params, net.platform, net.seed if seed is None else seed, None,
                 net.tile_config, noise, net.drift)
    for name, layer in new.analog.items():
        for (rs, cs, tile), (_, _, ref) in zip(layer.blocks, net.analog[name].blocks):
            tile.in_scale, tile.out_bound = ref.in_scale, ref.out_bound
    new.set_elapsed(net.elapsed)
    return new
