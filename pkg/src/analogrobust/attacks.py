"""PGD (white-box), Square (score-based) and OnePixel (differential evolution).

Attacks see the target through two calls only: ``net.loss_grad(x, y)`` for
input gradients and ``net.predict(x)`` for logits. Samples in one call are
attacked side by side but never interact; every array is pixel-space
N x C x H x W in [0, 1].
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .rng import rng_for
from .serialization import load_arrays, save_arrays
from .tensor import softmax


class AttackKind(str, enum.Enum):
    PGD = "PGD"
    SQUARE = "SQUARE"
    ONEPIXEL = "ONEPIXEL"


@dataclass(frozen=True)
class AttackSpec:
    """``magnitude`` is eps in pixel units for PGD/Square, a pixel count for OnePixel."""

    kind: AttackKind
    iterations: int
    magnitude: float
    seed: int = 0
    step_size: float | None = None
    random_start: bool = False
    p_init: float = 0.08
    population_per_pixel: int = 20

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.iterations < 0:
            raise ArgumentError("iterations must be non-negative")
        if self.magnitude < 0:
            raise ArgumentError("magnitude must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass
class AdversarialBatch:
    clean: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    platform: str
    spec: AttackSpec
    budget: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.clean.shape != self.adversarial.shape or len(self.labels) != len(self.clean):
            raise ArgumentError("clean, adversarial and labels must be aligned")
        self.budget = check_budget(self.clean, self.adversarial, self.spec)

    def __len__(self) -> int:
        return len(self.labels)

    def save(self, stem) -> None:
        save_arrays(stem, {"clean": self.clean, "adversarial": self.adversarial, "labels": self.labels},
                    {"spec": self.spec.to_dict(), "platform": self.platform, "budget": self.budget})

    @classmethod
    def load(cls, stem) -> "AdversarialBatch":
        arrays, meta = load_arrays(stem)
        return cls(arrays["clean"], arrays["adversarial"], arrays["labels"], meta["platform"],
                   AttackSpec(**meta["spec"]))


def check_budget(clean: np.ndarray, adv: np.ndarray, spec: AttackSpec) -> dict:
    """Post-hoc perturbation audit, independent of attack internals."""
    in_domain = bool(np.all((adv >= 0) & (adv <= 1)))
    if spec.kind == AttackKind.ONEPIXEL:
        changed = np.any(adv != clean, axis=1).reshape(len(adv), -1).sum(axis=1) if len(adv) else np.zeros(0)
        worst = int(changed.max()) if changed.size else 0
        return {"max_pixels_changed": worst, "in_domain": in_domain,
                "ok": in_domain and worst <= int(spec.magnitude)}
    linf = float(np.abs(adv.astype(np.float64) - clean).max()) if adv.size else 0.0
    eps = float(np.float32(spec.magnitude))
    return {"max_linf": linf, "in_domain": in_domain, "ok": in_domain and linf <= eps + 1e-6}


def run_attack(net, x, y, spec: AttackSpec, platform: str = "") -> AdversarialBatch:
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if spec.kind == AttackKind.PGD:
        adv = pgd(net, x, y, spec.magnitude, spec.iterations, spec.step_size, spec.random_start, spec.seed)
    elif spec.kind == AttackKind.SQUARE:
        adv = square(net, x, y, spec.magnitude, spec.iterations, spec.p_init, spec.seed)
    else:
        adv = onepixel(net, x, y, int(spec.magnitude), spec.iterations,
                       spec.population_per_pixel * max(int(spec.magnitude), 1), spec.seed)
    return AdversarialBatch(x, adv, y, getattr(getattr(net, "platform", None), "value", platform), spec)


# ----------------------------------------------------------------------
# PGD


def project(adv: np.ndarray, x: np.ndarray, eps: np.float32) -> np.ndarray:
    return np.clip(np.clip(adv, x - eps, x + eps), 0.0, 1.0)


def pgd(net, x, y, eps: float, steps: int, step_size: float | None = None, random_start: bool = False,
        seed: int = 0) -> np.ndarray:
    """Signed-gradient ascent on the cross-entropy, projected to the L-inf ball and [0, 1]."""
    if eps < 0:
        raise ArgumentError("eps must be non-negative")
    x = np.asarray(x, dtype=np.float32)
    eps32 = np.float32(eps)
    step = np.float32(2.5 * eps / max(steps, 1) if step_size is None else step_size)
    adv = x.copy()
    if random_start:
        noise = rng_for(seed, "pgd-start").uniform(-eps, eps, size=x.shape).astype(np.float32)
        adv = project(x + noise, x, eps32)
    for _ in range(steps):
        _, grad, _ = net.loss_grad(adv, y)
        adv = project(adv + step * np.sign(grad).astype(np.float32), x, eps32)
    return adv


# ----------------------------------------------------------------------
# Square


def margin(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """True-class logit minus the best other logit (negative means misclassified)."""
    true = logits[np.arange(len(y)), y]
    other = logits.copy()
    other[np.arange(len(y)), y] = -np.inf
    return true - other.max(axis=1)


def p_schedule(p_init: float, it: int, n_iters: int) -> float:
    """Halving schedule of the square-area fraction, rescaled to a 10,000-query budget."""
    it = int(it / max(n_iters, 1) * 10000)
    for bound, div in ((8000, 512), (6000, 256), (4000, 128), (2000, 64), (1000, 32), (500, 16), (200, 8),
                       (50, 4), (10, 2)):
        if it > bound:
            return p_init / div
    return p_init


def square(net, x, y, eps: float, iterations: int, p_init: float = 0.08, seed: int = 0,
           trace: list | None = None) -> np.ndarray:
    """Random search over square patches at the L-inf corners.

    Iteration one proposes vertical stripes at +-eps; later iterations repaint
    one random square per sample. A proposal is kept only if it lowers the
    margin. ``trace`` (if given) receives the per-iteration margins.
    """
    if eps < 0:
        raise ArgumentError("eps must be non-negative")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    best = x.copy()
    if iterations == 0 or len(x) == 0:
        return best
    rng = rng_for(seed, "square")
    n, c, h, w = x.shape
    eps32 = np.float32(eps)
    best_m = margin(net.predict(best), y)
    if trace is not None:
        trace.append(best_m.copy())
    for it in range(iterations):
        if it == 0:
            cand = project(x + eps32 * rng.choice([-1, 1], size=(n, c, 1, w)).astype(np.float32), x, eps32)
        else:
            p = p_schedule(p_init, it, iterations)
            s = int(min(max(round(np.sqrt(p * h * w)), 1), h - 1 if h > 1 else 1))
            cand = best.copy()
            rows = rng.integers(0, h - s + 1, size=n)
            cols = rng.integers(0, w - s + 1, size=n)
            signs = rng.choice([-1, 1], size=(n, c)).astype(np.float32) * eps32
            for i in range(n):
                patch = x[i, :, rows[i] : rows[i] + s, cols[i] : cols[i] + s] + signs[i][:, None, None]
                cand[i, :, rows[i] : rows[i] + s, cols[i] : cols[i] + s] = patch
            cand = project(cand, x, eps32)
        active = best_m >= 0
        if not active.any():
            if trace is not None:
                trace.append(best_m.copy())
            continue
        m = np.full(n, np.inf)
        m[active] = margin(net.predict(cand[active]), y[active])
        take = m < best_m
        best[take] = cand[take]
        best_m = np.where(take, m, best_m)
        if trace is not None:
            trace.append(best_m.copy())
    return best


# ----------------------------------------------------------------------
# OnePixel


def apply_pixels(x: np.ndarray, genes: np.ndarray, pixels: int) -> np.ndarray:
    """Paint candidate pixels; ``genes`` is (N, P, pixels * (2 + C)) -> (N * P, C, H, W)."""
    n, c, h, w = x.shape
    pop = genes.shape[1]
    g = genes.reshape(n, pop, pixels, 2 + c)
    out = np.repeat(x[:, None], pop, axis=1).copy()
    r = np.clip(np.floor(g[..., 0]), 0, h - 1).astype(int)
    q = np.clip(np.floor(g[..., 1]), 0, w - 1).astype(int)
    vals = np.clip(g[..., 2:], 0.0, 1.0).astype(np.float32)
    ni, pi = np.meshgrid(np.arange(n), np.arange(pop), indexing="ij")
    for k in range(pixels):
        out[ni, pi, :, r[..., k], q[..., k]] = vals[:, :, k]
    return out.reshape(n * pop, c, h, w)


def _fitness(net, x, y, genes, pixels) -> np.ndarray:
    n, pop = genes.shape[:2]
    logits = net.predict(apply_pixels(x, genes, pixels))
    probs = softmax(logits.astype(np.float64))
    return probs[np.arange(n * pop), np.repeat(y, pop)].reshape(n, pop)


def onepixel(net, x, y, pixels: int, iterations: int, population: int | None = None, seed: int = 0,
             f: float = 0.5, crossover: float = 0.7, trace: list | None = None) -> np.ndarray:
    """DE/rand/1/bin over (row, col, channel values) per pixel, minimising the true-class probability."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    n, c, h, w = x.shape
    if pixels < 1:
        raise ArgumentError("pixels must be >= 1")
    if pixels > h * w:
        raise ArgumentError(f"pixels={pixels} exceeds the {h}x{w} image")
    if iterations == 0 or n == 0:
        return x.copy()
    pop = population or 20 * pixels
    if pop < 4:
        raise ArgumentError("differential evolution needs a population of at least 4")
    rng = rng_for(seed, "onepixel")
    dim = pixels * (2 + c)
    lo = np.tile(np.r_[0.0, 0.0, np.zeros(c)], pixels)
    hi = np.tile(np.r_[h, w, np.ones(c)], pixels) - np.tile(np.r_[1e-9, 1e-9, np.zeros(c)], pixels)
    genes = rng.uniform(lo, hi, size=(n, pop, dim))
    fit = _fitness(net, x, y, genes, pixels)
    if trace is not None:
        trace.append(fit.min(axis=1))
    for _ in range(iterations):
        # three distinct partners per member, none equal to the member itself
        idx = np.argsort(rng.random((n, pop, pop)) + np.eye(pop)[None] * 2, axis=2)[..., :3]
        a = np.take_along_axis(genes, idx[..., 0:1].repeat(dim, axis=2), axis=1)
        b = np.take_along_axis(genes, idx[..., 1:2].repeat(dim, axis=2), axis=1)
        d = np.take_along_axis(genes, idx[..., 2:3].repeat(dim, axis=2), axis=1)
        mutant = np.clip(a + f * (b - d), lo, hi)
        cross = rng.random((n, pop, dim)) < crossover
        cross[np.arange(n)[:, None], np.arange(pop)[None], rng.integers(0, dim, size=(n, pop))] = True
        trial = np.where(cross, mutant, genes)
        trial_fit = _fitness(net, x, y, trial, pixels)
        better = trial_fit <= fit
        genes = np.where(better[..., None], trial, genes)
        fit = np.where(better, trial_fit, fit)
        if trace is not None:
            trace.append(fit.min(axis=1))
    best = genes[np.arange(n), fit.argmin(axis=1)][:, None]
    return apply_pixels(x, best, pixels)


def to_json(batch: AdversarialBatch) -> str:
    return json.dumps({"spec": batch.spec.to_dict(), "platform": batch.platform, "budget": batch.budget},
                      sort_keys=True)


def load_batch(stem) -> AdversarialBatch:
    return AdversarialBatch.load(Path(stem))
